use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};

type Partial = fn(f64, f64) -> f64;

impl<'t> Var<'t> {
    fn binary(
        self,
        rhs: Var<'t>,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        da: Partial,
        db: Partial,
    ) -> Result<Var<'t>> {
        let a = self.value();
        let b = rhs.value();
        let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let same = a.shape() == b.shape();
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; numel];
        if same {
            for ((o, &x), &y) in out.iter_mut().zip(a.data()).zip(b.data()) {
                *o = f(x, y);
            }
        } else {
            let (ad, bd) = (a.data(), b.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
        }
        let (aid, bid) = (self.id, rhs.id);
        let shape_for_bw = out_shape.clone();
        self.tape.push(op, Tensor::new(&out_shape, out)?, &[aid, bid], move |g, sink| {
            let (ad, bd) = (a.data(), b.data());
            let mut ga = sink.wants(aid).then(|| vec![0.0; ad.len()]);
            let mut gb = sink.wants(bid).then(|| vec![0.0; bd.len()]);
            if same {
                for i in 0..g.len() {
                    if let Some(ga) = ga.as_mut() {
                        ga[i] += g[i] * da(ad[i], bd[i]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[i] += g[i] * db(ad[i], bd[i]);
                    }
                }
            } else {
                for_each_broadcast(&shape_for_bw, &sa, &sb, |o, ia, ib| {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += g[o] * da(ad[ia], bd[ib]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += g[o] * db(ad[ia], bd[ib]);
                    }
                });
            }
            if let Some(ga) = ga {
                sink.add(aid, &ga);
            }
            if let Some(gb) = gb {
                sink.add(bid, &gb);
            }
        })
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "div", |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub(crate) fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.map(f);
        let y_data = y.data().to_vec();
        let id = self.id;
        self.tape.push(op, y, &[id], move |g, sink| {
            let xd = x.data();
            let gx: Vec<f64> = g
                .iter()
                .zip(xd)
                .zip(&y_data)
                .map(|((g, &x), &y)| g * df(x, y))
                .collect();
            sink.add(id, &gx);
        })
    }

    pub fn scale(self, k: f64) -> Result<Var<'t>> {
        self.unary("scale", move |x| k * x, move |_, _| k)
    }

    pub fn add_scalar(self, k: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", move |x| x + k, |_, _| 1.0)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// Gaussian-error linear unit, tanh form.
    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary("gelu", gelu, |x, _| gelu_grad(x))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
