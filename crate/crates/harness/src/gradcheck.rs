//! Finite-difference checks runnable from the CLI.

use cgf_core::config::ModelConfig;
use cgf_core::gradcheck::{check, check_params, sample_scalars, Probe, DEFAULT_STEP};
use cgf_core::model::Model;
use cgf_core::{Graph, Rng, Tensor, Var};

use crate::data::{generate_dataset, Shape};
use crate::error::Result;

/// Relative-error bound shared by every check here.
pub const TOLERANCE: f64 = 1e-3;
const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

type OpBuilder = fn(&mut Graph, &[Var]) -> cgf_core::Result<Var>;

fn weighted(g: &mut Graph, y: Var) -> cgf_core::Result<Var> {
    let w = Tensor::from_fn(g.shape(y), |i| ((i * 37 % 11) as f64 - 5.0) / 5.0);
    let w = g.constant(&w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

const OPS: [(&str, &[&[usize]], OpBuilder); 8] = [
    ("matmul", &[&[3, 4], &[4, 5]], |g, x| {
        let y = g.matmul(x[0], x[1])?;
        weighted(g, y)
    }),
    ("softmax", &[&[4, 6]], |g, x| {
        let y = g.softmax(x[0], 1)?;
        weighted(g, y)
    }),
    ("layer_norm", &[&[3, 8], &[8], &[8]], |g, x| {
        let y = g.layer_norm(x[0], x[1], x[2], 1e-5)?;
        weighted(g, y)
    }),
    ("l2_normalize", &[&[5, 4]], |g, x| {
        let y = g.l2_normalize(x[0], 1, 1e-8)?;
        weighted(g, y)
    }),
    ("conv2d", &[&[6, 6, 3], &[3, 3, 3, 4]], |g, x| {
        let y = g.conv2d(x[0], x[1], 2, 1)?;
        weighted(g, y)
    }),
    ("upsample2x", &[&[3, 3, 2]], |g, x| {
        let y = g.upsample2x(x[0])?;
        weighted(g, y)
    }),
    ("gelu_softplus", &[&[10]], |g, x| {
        let a = g.gelu(x[0]);
        let b = g.softplus(a);
        weighted(g, b)
    }),
    ("bce_with_logits", &[&[12]], |g, x| {
        let t: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
        g.bce_with_logits(x[0], &t)
    }),
];

/// Checks each core op on a fixed random input.
pub fn op_checks(seed: u64) -> Result<Vec<CheckLine>> {
    let mut rng = Rng::stream(seed, "gradcheck");
    let mut out = Vec::with_capacity(OPS.len());
    for (name, shapes, build) in OPS {
        let inputs: Vec<Tensor> =
            shapes.iter().map(|s| Tensor::from_fn(s, |_| rng.uniform_range(-1.0, 1.0))).collect();
        let r = check(&inputs, Probe::All, DEFAULT_STEP, FLOOR, build)?;
        out.push(CheckLine { name: name.to_string(), checked: r.checked, max_rel_err: r.max_rel_err });
    }
    Ok(out)
}

/// The model used by the full check: 32x32 input, four tokens, desk widths.
pub fn full_check_config() -> ModelConfig {
    ModelConfig { image_size: 32, n_tokens: 4, ..ModelConfig::default() }
}

/// Total loss of the full model against central differences on
/// `per_group` random scalars from every parameter group.
pub fn full_model_check(cfg: &ModelConfig, seed: u64, per_group: usize) -> Result<Vec<CheckLine>> {
    let (model, store) = Model::init(cfg, seed)?;
    let sample = generate_dataset(seed, 1, Shape::ALL, cfg.image_size)?.remove(0);
    let mut rng = Rng::stream(seed, "gradcheck");
    let mut out = Vec::new();
    for (name, ids) in Model::param_groups(&store) {
        let probes = sample_scalars(&store, &ids, per_group, &mut rng);
        let r = check_params(&store, &probes, DEFAULT_STEP, FLOOR, |g, p| {
            let mut noise = Rng::stream(seed, "gumbel");
            let fwd = model.forward(g, p, &sample.image, &sample.expression, Some(&mut noise))?;
            Ok(model.loss(g, &fwd, &sample.mask)?.0)
        })?;
        out.push(CheckLine { name, checked: r.checked, max_rel_err: r.max_rel_err });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass() {
        for line in op_checks(0).unwrap() {
            assert!(line.passed(), "{line:?}");
            assert!(line.checked > 0);
        }
    }

    #[test]
    fn full_check_covers_every_group() {
        let cfg = ModelConfig { c_t: 8, c_l: 8, c_v: 16, ..full_check_config() };
        let lines = full_model_check(&cfg, 1, 3).unwrap();
        assert!(lines.len() >= 8);
        for l in &lines {
            assert!(l.passed(), "{l:?}");
        }
    }
}
