//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its value and, when any input
//! requires a gradient, a closure that pushes the output gradient back to its
//! inputs. Nodes are appended in evaluation order, so walking the tape
//! backwards visits a valid reverse topological order.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink<'_>)>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// A single forward/backward pass. Not `Send`: one tape per thread.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    detached: RefCell<Vec<Tensor>>,
    frozen: Option<Vec<Tensor>>,
    frozen_cursor: Cell<usize>,
    macs: Cell<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            detached: RefCell::new(Vec::new()),
            frozen: None,
            frozen_cursor: Cell::new(0),
            macs: Cell::new(0),
        }
    }

    /// A tape that replays previously recorded stop-gradient values instead of
    /// recomputing them. Finite-difference checks of a function containing a
    /// stop-gradient must hold those values fixed to compare like with like.
    pub fn with_frozen(values: Vec<Tensor>) -> Self {
        Self {
            frozen: Some(values),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that accumulates a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf without gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Inserts a value computed outside the graph as a constant, recording it
    /// so that a frozen replay can substitute the identical value.
    pub fn detached(&self, value: Tensor) -> Result<Var<'_>> {
        let value = match &self.frozen {
            Some(frozen) => {
                let k = self.frozen_cursor.get();
                self.frozen_cursor.set(k + 1);
                let replay = frozen.get(k).cloned().ok_or(TensorError::Invalid {
                    op: "detached",
                    msg: format!("frozen replay exhausted at value {k}"),
                })?;
                if replay.shape() != value.shape() {
                    return Err(TensorError::Shape {
                        op: "detached",
                        lhs: replay.shape().to_vec(),
                        rhs: value.shape().to_vec(),
                    });
                }
                replay
            }
            None => value,
        };
        self.detached.borrow_mut().push(value.clone());
        Ok(self.constant(value))
    }

    /// Stop-gradient values seen so far, in order.
    pub fn detached_values(&self) -> Vec<Tensor> {
        self.detached.borrow().clone()
    }

    /// Multiply-accumulate count of all ops recorded on this tape.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub(crate) fn add_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Appends an op result. `backward` is only kept when some input needs a
    /// gradient; it receives the output gradient and the sink for inputs.
    pub(crate) fn push(
        &self,
        op: &'static str,
        value: Tensor,
        inputs: &[usize],
        backward: impl Fn(&[f64], &mut GradSink<'_>) + 'static,
    ) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|&i| self.requires_grad(i));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Back-propagates from a single-element output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!(
                    "output must hold one value, has shape {:?}",
                    nodes[output.id].value.shape()
                ),
            });
        }
        let sizes: Vec<usize> = nodes.iter().map(|n| n.value.numel()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.id] = Some(vec![1.0]);
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &nodes[id].backward {
                Some(bw) => {
                    let mut sink = GradSink {
                        grads: &mut grads,
                        sizes: &sizes,
                        tape_requires: &nodes,
                    };
                    bw(&g, &mut sink);
                }
                // Leaves keep their gradient.
                None => grads[id] = Some(g),
            }
        }
        Ok(Gradients { grads })
    }
}

/// Accumulator handed to backward closures.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    sizes: &'a [usize],
    tape_requires: &'a [Node],
}

impl GradSink<'_> {
    pub fn wants(&self, id: usize) -> bool {
        self.tape_requires[id].requires_grad
    }

    /// Mutable gradient buffer of node `id`, zero-initialised on first use.
    pub fn slot(&mut self, id: usize) -> &mut [f64] {
        let n = self.sizes[id];
        self.grads[id].get_or_insert_with(|| vec![0.0; n])
    }

    pub fn add(&mut self, id: usize, g: &[f64]) {
        if !self.wants(id) {
            return;
        }
        for (a, b) in self.slot(id).iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Gradients of leaves after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient shaped like the variable; zeros if it did not reach `var`.
    pub fn tensor(&self, var: Var<'_>) -> Tensor {
        let value = var.value();
        match self.get(var) {
            Some(g) => Tensor::new(value.shape(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(value.shape()),
        }
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}
