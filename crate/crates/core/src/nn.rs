//! Parameterised layers shared by the encoders and decoder.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{kaiming_uniform, Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Registers parameters under a dotted name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Init) -> Result<T>) -> Result<T> {
        let saved = self.prefix.clone();
        self.prefix = self.path(name);
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor, decay: bool) -> Result<ParamId> {
        let path = self.path(name);
        self.store.add(&path, value, decay)
    }

    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> Result<ParamId> {
        let t = kaiming_uniform(self.rng, shape, fan_in, gain);
        self.tensor(name, t, true)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize, bias: bool, gain: f64) -> Result<Self> {
        init.scope(name, |init| {
            let w = init.kaiming("w", &[d_in, d_out], d_in, gain)?;
            let b = if bias {
                Some(init.tensor("b", Tensor::zeros(&[d_out]), false)?)
            } else {
                None
            };
            Ok(Linear { w, b })
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.get(self.w))?;
        match self.b {
            Some(b) => g.add_bias(y, p.get(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(init: &mut Init, name: &str, c: usize) -> Result<Self> {
        init.scope(name, |init| {
            Ok(Norm {
                gamma: init.tensor("gamma", Tensor::ones(&[c]), false)?,
                beta: init.tensor("beta", Tensor::zeros(&[c]), false)?,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.get(self.gamma), p.get(self.beta), LN_EPS)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        init.scope(name, |init| {
            Ok(Mlp {
                fc1: Linear::new(init, "fc1", d_in, hidden, true, RELU_GAIN)?,
                fc2: Linear::new(init, "fc2", hidden, d_out, true, 1.0)?,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// `Conv3x3 -> LayerNorm -> ReLU` on `H x W x C` maps.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub k: ParamId,
    pub b: ParamId,
    pub norm: Norm,
    pub stride: usize,
}

impl ConvBlock {
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        init.scope(name, |init| {
            Ok(ConvBlock {
                k: init.kaiming("k", &[3, 3, c_in, c_out], 9 * c_in, RELU_GAIN)?,
                b: init.tensor("b", Tensor::zeros(&[c_out]), false)?,
                norm: Norm::new(init, "norm", c_out)?,
                stride,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p.get(self.k), self.stride, 1)?;
        let y = g.add_bias(y, p.get(self.b))?;
        let y = self.norm.forward(g, p, y)?;
        Ok(g.relu(y))
    }
}
