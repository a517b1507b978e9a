//! Parameterised building blocks shared by every module.

use fuseg_tensor::{ParamId, ParamStore, Rng, Session, Tensor, Var};

use crate::error::Result;

/// Registers parameters under a name prefix, drawing initial values from a
/// seeded generator.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A child initialiser whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let full = self.full_name(name);
        Ok(self.store.add(full, value)?)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let rng = &mut *self.rng;
        let value = Tensor::from_fn(shape, |_| std * rng.normal());
        self.tensor(name, value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn full(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.tensor(name, Tensor::full(shape, value))
    }

    pub fn rng(&mut self) -> &mut Rng {
        self.rng
    }
}

/// Token-wise affine map `x W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights from `N(0, 1/fan_in)`, zero bias.
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let mut sc = init.scope(name);
        let weight = sc.normal("weight", &[in_dim, out_dim], (1.0 / in_dim as f64).sqrt())?;
        let bias = Some(sc.zeros("bias", &[out_dim])?);
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn from_weight(init: &mut Init<'_>, name: &str, weight: Tensor, bias: bool) -> Result<Self> {
        let (in_dim, out_dim) = (weight.shape()[0], weight.shape()[1]);
        let mut sc = init.scope(name);
        let weight = sc.tensor("weight", weight)?;
        let bias = if bias { Some(sc.zeros("bias", &[out_dim])?) } else { None };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = x.reshape(&[rows, self.in_dim])?;
        let mut y = flat.matmul(s.param(self.weight))?;
        if let Some(b) = self.bias {
            y = y.add(s.param(b))?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.out_dim;
        Ok(y.reshape(&out_shape)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, eps: f64) -> Result<Self> {
        let mut sc = init.scope(name);
        Ok(Self {
            gamma: sc.full("gamma", &[dim], 1.0)?,
            beta: sc.zeros("beta", &[dim])?,
            eps,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(s.param(self.gamma), s.param(self.beta), self.eps)?)
    }
}

/// Two linear layers with a GELU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        let mut sc = init.scope(name);
        Ok(Self {
            fc1: Linear::new(&mut sc, "fc1", in_dim, hidden)?,
            fc2: Linear::new(&mut sc, "fc2", hidden, out_dim)?,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(s, x)?.gelu()?;
        self.fc2.forward(s, h)
    }
}

/// Depthwise `k×k` convolution with a per-channel bias.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub size: usize,
}

impl DepthwiseConv {
    pub fn new(init: &mut Init<'_>, name: &str, size: usize, channels: usize) -> Result<Self> {
        let mut sc = init.scope(name);
        let std = (1.0 / (size * size) as f64).sqrt();
        Ok(Self {
            kernel: sc.normal("kernel", &[size * size, channels], std)?,
            bias: sc.zeros("bias", &[channels])?,
            size,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        Ok(x.depthwise_conv2d(s.param(self.kernel), h, w)?.add(s.param(self.bias))?)
    }
}
