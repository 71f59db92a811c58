//! Central finite-difference gradient oracle.
//!
//! Perturbed evaluations rebuild the graph from scratch and replay the
//! base pass's stop-gradient values, so a detached quantity is held at its
//! base value exactly as the analytic backward pass assumes.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Which entries of which inputs to probe.
pub enum Probe {
    All,
    Indices(Vec<(usize, usize)>),
}

/// Checks `d build(inputs) / d inputs` against central differences.
///
/// `build` must be deterministic given its inputs (seed any randomness
/// inside it). All inputs are treated as trainable.
pub fn check<F>(inputs: &[Tensor], probe: Probe, h: f64, floor: f64, mut build: F) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        .collect();
    let log = g.take_detach_log();

    let probes = match probe {
        Probe::All => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
            .collect(),
        Probe::Indices(v) => v,
    };

    let mut eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
        let mut perturbed = inputs.to_vec();
        perturbed[which].values_mut()[idx] += delta;
        let mut g = Graph::replaying(log.clone());
        let vars: Vec<Var> = perturbed.iter().map(|t| g.param(t)).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for (which, idx) in probes {
        let numeric = (eval(which, idx, h)? - eval(which, idx, -h)?) / (2.0 * h);
        let a = analytic[which][idx];
        let err = relative_error(a, numeric, floor);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((which, idx, a, numeric));
        }
    }
    Ok(report)
}

/// Gradient check over entries of a [`ParamStore`]: `probes` lists
/// `(parameter, flat index)` pairs. `build` receives a fresh graph with the
/// store bound and must be deterministic.
pub fn check_params<F>(
    store: &ParamStore,
    probes: &[(ParamId, usize)],
    h: f64,
    floor: f64,
    mut build: F,
) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let loss = build(&mut g, &bound)?;
    g.backward(loss)?;
    let log = g.take_detach_log();

    let mut report = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut work = store.clone();
    for &(id, idx) in probes {
        let analytic = g.grad(bound.get(id)).map_or(0.0, |gr| gr[idx]);
        let base = work.get(id).values()[idx];
        let mut eval = |delta: f64| -> Result<f64> {
            work.get_mut(id).values_mut()[idx] = base + delta;
            let mut g = Graph::replaying(log.clone());
            let bound = work.bind(&mut g);
            let out = build(&mut g, &bound)?;
            Ok(g.scalar(out))
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        work.get_mut(id).values_mut()[idx] = base;
        let err = relative_error(analytic, numeric, floor);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((id.index(), idx, analytic, numeric));
        }
    }
    Ok(report)
}

/// Up to `per_param` random flat indices from each listed parameter.
pub fn sample_probes(store: &ParamStore, ids: &[ParamId], per_param: usize, rng: &mut crate::rng::Rng) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for &id in ids {
        let n = store.get(id).numel();
        if n <= per_param {
            out.extend((0..n).map(|i| (id, i)));
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            out.extend(idx[..per_param].iter().map(|&i| (id, i)));
        }
    }
    out
}

/// `k` distinct random scalar positions drawn uniformly across all entries
/// of the listed parameters (all of them when there are fewer than `k`).
pub fn sample_scalars(store: &ParamStore, ids: &[ParamId], k: usize, rng: &mut crate::rng::Rng) -> Vec<(ParamId, usize)> {
    let mut all: Vec<(ParamId, usize)> = ids
        .iter()
        .flat_map(|&id| (0..store.get(id).numel()).map(move |i| (id, i)))
        .collect();
    rng.shuffle(&mut all);
    all.truncate(k);
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
    }

    /// `sum(w * y)` with a fixed random `w`, so every output entry matters.
    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let mut rng = Rng::new(seed);
        let w = random(&mut rng, g.shape(y));
        let w = g.constant(&w);
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn matmul_gradcheck() {
        let mut rng = Rng::new(1);
        let ins = [random(&mut rng, &[5, 4]), random(&mut rng, &[4, 3])];
        let r = check(&ins, Probe::All, DEFAULT_STEP, 1e-8, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn matmul_nt_and_transpose_gradcheck() {
        let mut rng = Rng::new(11);
        let ins = [random(&mut rng, &[3, 4]), random(&mut rng, &[5, 4])];
        let r = check(&ins, Probe::All, DEFAULT_STEP, 1e-8, |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            let y = g.transpose(y)?;
            weighted_sum(g, y, 12)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn softmax_gradcheck() {
        let mut rng = Rng::new(2);
        let ins = [random(&mut rng, &[3, 4])];
        for axis in [0, 1] {
            let r = check(&ins, Probe::All, DEFAULT_STEP, 1e-8, |g, v| {
                let y = g.softmax(v[0], axis)?;
                weighted_sum(g, y, 3)
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-6, "axis {axis}: {r:?}");
        }
    }

    #[test]
    fn layer_norm_gradcheck() {
        let mut rng = Rng::new(4);
        let ins = [random(&mut rng, &[2, 6]), random(&mut rng, &[6]), random(&mut rng, &[6])];
        let r = check(&ins, Probe::All, DEFAULT_STEP, 1e-8, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, 5)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn l2_normalize_gradcheck() {
        let mut rng = Rng::new(6);
        let ins = [random(&mut rng, &[4, 8])];
        for axis in [0, 1] {
            let r = check(&ins, Probe::All, DEFAULT_STEP, 1e-8, |g, v| {
                let y = g.l2_normalize(v[0], axis, 1e-12)?;
                weighted_sum(g, y, 7)
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-5, "{r:?}");
        }
    }

    #[test]
    fn conv2d_gradcheck() {
        let mut rng = Rng::new(8);
        let ins = [random(&mut rng, &[5, 5, 2]), random(&mut rng, &[3, 3, 2, 3])];
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let r = check(&ins, Probe::All, DEFAULT_STEP, 1e-8, |g, v| {
                let y = g.conv2d(v[0], v[1], stride, pad)?;
                weighted_sum(g, y, 9)
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-5, "stride {stride} pad {pad}: {r:?}");
        }
    }

    #[test]
    fn upsample_gradcheck() {
        let mut rng = Rng::new(10);
        let ins = [random(&mut rng, &[2, 2, 3])];
        let r = check(&ins, Probe::All, DEFAULT_STEP, 1e-8, |g, v| {
            let y = g.upsample2x(v[0])?;
            weighted_sum(g, y, 11)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn elementwise_and_reduction_gradcheck() {
        let mut rng = Rng::new(13);
        let a = random(&mut rng, &[3, 4]);
        let b = Tensor::from_fn(&[3, 4], |_| rng.uniform_range(0.5, 2.0));
        let bias = random(&mut rng, &[4]);
        let d = Tensor::from_fn(&[3], |_| rng.uniform_range(0.5, 2.0));
        let s = Tensor::scalar(0.7);
        let r = check(&[a, b, bias, d, s], Probe::All, DEFAULT_STEP, 1e-8, |g, v| {
            let x = g.add_bias(v[0], v[2])?;
            let y = g.div(x, v[1])?;
            let y = g.scale_by(y, v[4])?;
            let z = g.div_rows(y, v[3])?;
            let e = g.gelu(z);
            let s = g.sigmoid(e);
            let sp = g.softplus(z);
            let m = g.mul(s, sp)?;
            let l = g.log(sp);
            let q = g.sub(m, l)?;
            let ex = g.exp(q);
            let sl = g.sum_last(ex)?;
            let lse = g.log_sum_exp(sl);
            let mr = g.mean_rows(q)?;
            let mm = g.mean(mr);
            let cat = g.concat(&[q, x])?;
            let sr = g.slice_rows(cat, 1, 2)?;
            let c = weighted_sum(g, sr, 14)?;
            let t = g.add(lse, mm)?;
            g.add(t, c)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn gather_and_bce_gradcheck() {
        let mut rng = Rng::new(15);
        let table = random(&mut rng, &[5, 3]);
        let r = check(&[table], Probe::All, DEFAULT_STEP, 1e-8, |g, v| {
            let rows = g.gather_rows(v[0], &[4, 1, 4])?;
            g.bce_with_logits(rows, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0])
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn detached_values_are_replayed() {
        // f(x) = sg(x) * x: analytic grad is sg(x); with replay the numeric agrees.
        let r = check(&[Tensor::scalar(3.0)], Probe::All, DEFAULT_STEP, 1e-8, |g, v| {
            let s = g.detach(v[0])?;
            g.mul(s, v[0])
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }
}
