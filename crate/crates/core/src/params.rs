//! Named parameters, initialisation and the AdamW optimiser.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    /// Whether decoupled weight decay applies (weights yes; biases, norms, temperatures no).
    pub decay: bool,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Insertion-ordered parameter map plus optimiser state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
    step: u64,
}

/// Graph handles for every parameter of a store, in store order.
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, decay: bool) -> Result<ParamId> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let n = value.numel();
        self.params.insert(
            name.to_string(),
            Param {
                value,
                decay,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).unwrap()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (k, p))| (ParamId(i), k.as_str(), &p.value))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Registers every parameter as a trainable leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.params.values().map(|p| g.param(&p.value)).collect())
    }

    /// Adds `scale * dL/dparam` from a finished backward pass to each stored
    /// gradient. Parameters the loss never reached receive zeros.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound, scale: f64) {
        for (p, &var) in self.params.values_mut().zip(&bound.0) {
            let n = p.value.numel();
            let mut acc = p.value.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            if let Some(gr) = g.grad(var) {
                acc.iter_mut().zip(gr).for_each(|(a, d)| *a += scale * d);
            }
            p.value.set_grad(acc).expect("gradient length matches parameter");
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.value.clear_grad());
    }

    /// One decoupled-weight-decay Adam step over every parameter.
    pub fn adamw_step(&mut self, opt: &AdamW) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| p.value.grad().is_none()) {
            return Err(Error::Contract(format!("parameter {name} has no gradient")));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = opt.betas;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for p in self.params.values_mut() {
            let grad = p.value.grad().unwrap().to_vec();
            let decay = if p.decay { 1.0 - opt.lr * opt.weight_decay } else { 1.0 };
            let w = p.value.values_mut();
            for i in 0..w.len() {
                let g = grad[i];
                w[i] *= decay;
                p.m[i] = b1 * p.m[i] + (1.0 - b1) * g;
                p.v[i] = b2 * p.v[i] + (1.0 - b2) * g * g;
                let mhat = p.m[i] / c1;
                let vhat = p.v[i] / c2;
                w[i] -= opt.lr * mhat / (vhat.sqrt() + opt.eps);
            }
        }
        Ok(())
    }
}

/// Kaiming-uniform draw: `U(-b, b)` with `b = gain * sqrt(3 / fan_in)`.
pub fn kaiming_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.uniform_range(-bound, bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(w: f64, grad: f64, decay: bool) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w), decay).unwrap();
        s.get_mut(id).set_grad(vec![grad]).unwrap();
        s
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut s = store_with(0.7, 0.0, true);
        s.adamw_step(&AdamW { weight_decay: 0.0, ..AdamW::default() }).unwrap();
        assert_eq!(s.by_name("w").unwrap().values()[0], 0.7);
    }

    #[test]
    fn decay_only_scales_weight() {
        let mut s = store_with(2.0, 0.0, true);
        s.adamw_step(&AdamW { lr: 0.1, weight_decay: 0.1, ..AdamW::default() }).unwrap();
        assert!((s.by_name("w").unwrap().values()[0] - 2.0 * 0.99).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store_with(1.0, 1.0, true);
        s.adamw_step(&AdamW {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        })
        .unwrap();
        // mhat = 1, vhat = 1 -> step = lr / (1 + eps)
        let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((s.by_name("w").unwrap().values()[0] - expected).abs() < 1e-15);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = ParamStore::new();
        s.add("enc.stem.w", Tensor::scalar(1.0), true).unwrap();
        let err = s.adamw_step(&AdamW::default()).unwrap_err().to_string();
        assert!(err.contains("enc.stem.w"), "{err}");
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s = ParamStore::new();
        s.add("b", Tensor::scalar(0.0), false).unwrap();
        s.add("a", Tensor::scalar(0.0), false).unwrap();
        assert!(s.add("b", Tensor::scalar(1.0), false).is_err());
        let names: Vec<_> = s.iter().map(|(_, n, _)| n.to_string()).collect();
        assert_eq!(names, ["b", "a"]);
    }

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = Rng::new(3);
        let t = kaiming_uniform(&mut rng, &[64, 16], 64, 2f64.sqrt());
        let b = 2f64.sqrt() * (3.0f64 / 64.0).sqrt();
        assert!(t.values().iter().all(|v| v.abs() <= b));
    }
}
