//! Group transformer: query tokens alternately load linguistic context and
//! group visual features.
//!
//! The load block is single-head cross-attention from tokens to words. The
//! group block projects tokens and pixels into a shared space, scores them
//! by cosine affinity, assigns every pixel to exactly one token through a
//! Gumbel-softmax with a straight-through estimator, and updates each token
//! from the features of the pixels it owns.

use crate::config::{Affinity, AssignMode, ModelConfig, PoolNorm, TauMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Init, Linear, Mlp, Norm};
use crate::params::{Bound, ParamId};
use crate::rng::Rng;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-12;

/// `ln(e - 1)`: softplus of this is exactly 1.
pub const TAU_THETA_INIT: f64 = 0.541_324_854_612_918_1;

#[derive(Clone, Debug)]
pub struct LoadBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wc: Linear,
    pub(crate) c_l: usize,
}

impl LoadBlock {
    pub fn new(init: &mut Init, name: &str, c_t: usize, c_l: usize) -> Result<Self> {
        init.scope(name, |init| {
            Ok(LoadBlock {
                wq: Linear::new(init, "wq", c_t, c_t, false, 1.0)?,
                wk: Linear::new(init, "wk", c_l, c_t, false, 1.0)?,
                wv: Linear::new(init, "wv", c_l, c_t, false, 1.0)?,
                wc: Linear::new(init, "wc", c_t, c_t, false, 1.0)?,
                c_l,
            })
        })
    }

    /// `softmax(T Wq (F Wk)^T / sqrt(C^l)) F Wv Wc`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, tokens: Var, words: Var) -> Result<Var> {
        let q = self.wq.forward(g, p, tokens)?;
        let k = self.wk.forward(g, p, words)?;
        let v = self.wv.forward(g, p, words)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, 1.0 / (self.c_l as f64).sqrt());
        let attn = g.softmax(scores, 1)?;
        let ctx = g.matmul(attn, v)?;
        self.wc.forward(g, p, ctx)
    }
}

/// Everything one group-block application decided.
#[derive(Clone, Debug)]
pub struct GroupAssignment {
    /// `N x HW` token/pixel affinities.
    pub s_pixel: Var,
    /// `N x HW` soft assignment; each pixel's column sums to 1.
    pub s_gumbel: Var,
    /// `HW x N` hard one-hot assignment.
    pub s_onehot: Tensor,
    /// `N x HW` mask the token update actually used.
    pub s_mask: Var,
    pub tau: f64,
    /// `N x HW` Gumbel noise added before the softmax (zeros in eval mode).
    pub noise: Tensor,
}

impl GroupAssignment {
    /// Token index owning each pixel.
    pub fn owners(&self) -> Vec<usize> {
        let n = self.s_onehot.shape()[1];
        self.s_onehot
            .values()
            .chunks(n)
            .map(|row| row.iter().position(|&v| v == 1.0).unwrap_or(0))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct GroupBlock {
    pub wt: Linear,
    pub wd: Linear,
    pub mlp: Mlp,
    pub tau_theta: Option<ParamId>,
    pub(crate) tau: TauMode,
    pub(crate) assign: AssignMode,
    pub(crate) affinity: Affinity,
    pub(crate) pool: PoolNorm,
    pub(crate) c_t: usize,
}

impl GroupBlock {
    pub fn new(init: &mut Init, name: &str, cfg: &ModelConfig, c_v: usize) -> Result<Self> {
        let c_t = cfg.c_t;
        init.scope(name, |init| {
            let tau_theta = match cfg.tau {
                TauMode::Learnable => Some(init.tensor("tau_theta", Tensor::scalar(TAU_THETA_INIT), false)?),
                TauMode::Fixed(_) => None,
            };
            Ok(GroupBlock {
                wt: Linear::new(init, "wt", c_t, c_t, false, 1.0)?,
                wd: Linear::new(init, "wd", c_v, c_t, false, 1.0)?,
                mlp: Mlp::new(init, "mlp", c_t, c_t, c_t)?,
                tau_theta,
                tau: cfg.tau,
                assign: cfg.assign,
                affinity: cfg.affinity,
                pool: cfg.pool,
                c_t,
            })
        })
    }

    fn temperature(&self, g: &mut Graph, p: &Bound) -> Var {
        match (self.tau, self.tau_theta) {
            (TauMode::Learnable, Some(theta)) => g.softplus(p.get(theta)),
            (TauMode::Fixed(v), _) => g.constant(&Tensor::scalar(v)),
            (TauMode::Learnable, None) => unreachable!("learnable tau always registers theta"),
        }
    }

    /// Updates `t_lang` (`N x C^t`) from `map` (`H x W x C^v`). Gumbel noise is
    /// drawn from `rng` when given (training); `None` means no noise.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        t_lang: Var,
        map: Var,
        rng: Option<&mut Rng>,
    ) -> Result<(Var, GroupAssignment)> {
        let (h, w, c) = match g.shape(map)[..] {
            [h, w, c] => (h, w, c),
            ref s => return Err(Error::dim("group_block", s, &[0, 0, 0])),
        };
        let n = g.shape(t_lang)[0];
        let hw = h * w;

        let t_proj = self.wt.forward(g, p, t_lang)?;
        let flat = g.reshape(map, &[hw, c])?;
        let d_proj = self.wd.forward(g, p, flat)?;

        let s_pixel = match self.affinity {
            Affinity::Cosine => {
                let tn = g.l2_normalize(t_proj, 1, NORM_EPS)?;
                let dn = g.l2_normalize(d_proj, 1, NORM_EPS)?;
                g.matmul_nt(tn, dn)?
            }
            Affinity::Dot => {
                let s = g.matmul_nt(t_proj, d_proj)?;
                g.scale(s, 1.0 / (self.c_t as f64).sqrt())
            }
        };

        let noise = match rng {
            Some(rng) => rng.gumbel_sample(&[n, hw]),
            None => Tensor::zeros(&[n, hw]),
        };

        let tau = self.temperature(g, p);
        let tau_value = g.scalar(tau);
        let (s_gumbel, s_mask, onehot) = match self.assign {
            AssignMode::Hard | AssignMode::Soft => {
                let gn = g.constant(&noise);
                let noisy = g.add(s_pixel, gn)?;
                let one = g.constant(&Tensor::scalar(1.0));
                let inv_tau = g.div(one, tau)?;
                let logits = g.scale_by(noisy, inv_tau)?;
                let soft = g.softmax(logits, 0)?;
                if self.assign == AssignMode::Hard {
                    // onehot - sg(soft) + soft, rearranged so the forward value is exactly onehot.
                    let sg = g.detach(soft)?;
                    let onehot = argmax_onehot(g.value(sg), n, hw);
                    let hard = g.constant_from(&[n, hw], onehot.clone())?;
                    let delta = g.sub(soft, sg)?;
                    let mask = g.add(hard, delta)?;
                    (soft, mask, onehot)
                } else {
                    let onehot = argmax_onehot(g.value(soft), n, hw);
                    (soft, soft, onehot)
                }
            }
            AssignMode::Pool => {
                let s = g.matmul_nt(t_proj, d_proj)?;
                let s = g.scale(s, 1.0 / (self.c_t as f64).sqrt());
                let attn = g.softmax(s, 1)?;
                let onehot = argmax_onehot(g.value(attn), n, hw);
                (attn, attn, onehot)
            }
        };

        let pooled = g.matmul(s_mask, d_proj)?;
        let pooled = match (self.assign, self.pool) {
            (AssignMode::Pool, _) | (_, PoolNorm::Sum) => pooled,
            (_, PoolNorm::Mean) => {
                let mass = g.sum_last(s_mask)?;
                let denom = g.add_scalar(mass, 1.0);
                g.div_rows(pooled, denom)?
            }
        };
        let update = self.mlp.forward(g, p, pooled)?;
        let tokens = g.add(update, t_proj)?;

        let s_onehot = Tensor::new(&[n, hw], onehot)?;
        let s_onehot = transpose(&s_onehot);
        Ok((
            tokens,
            GroupAssignment {
                s_pixel,
                s_gumbel,
                s_onehot,
                s_mask,
                tau: tau_value,
                noise,
            },
        ))
    }
}

/// Column-wise argmax of an `n x hw` matrix as a 0/1 matrix of the same
/// shape. Ties go to the lowest token index.
pub fn argmax_onehot(values: &[f64], n: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * hw];
    for px in 0..hw {
        let mut best = 0;
        for tok in 1..n {
            if values[tok * hw + px] > values[best * hw + px] {
                best = tok;
            }
        }
        out[best * hw + px] = 1.0;
    }
    out
}

fn transpose(t: &Tensor) -> Tensor {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(&[n, m], |i| t.values()[(i % m) * n + i / m])
}

/// Pre-norm transformer layer wrapping the load and group blocks.
#[derive(Clone, Debug)]
pub struct GroupTransformerLayer {
    pub norm_load: Norm,
    pub load: LoadBlock,
    pub norm_group: Norm,
    pub group: GroupBlock,
    pub norm_ffn: Norm,
    pub ffn: Mlp,
}

impl GroupTransformerLayer {
    pub fn new(init: &mut Init, name: &str, cfg: &ModelConfig, c_v: usize) -> Result<Self> {
        let c_t = cfg.c_t;
        init.scope(name, |init| {
            Ok(GroupTransformerLayer {
                norm_load: Norm::new(init, "norm_load", c_t)?,
                load: LoadBlock::new(init, "load", c_t, cfg.c_l)?,
                norm_group: Norm::new(init, "norm_group", c_t)?,
                group: GroupBlock::new(init, "group", cfg, c_v)?,
                norm_ffn: Norm::new(init, "norm_ffn", c_t)?,
                ffn: Mlp::new(init, "ffn", c_t, c_t, c_t)?,
            })
        })
    }

    /// `T += load(LN T, F)`, `T += group(LN T, D)`, `T += FFN(LN T)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        tokens: Var,
        map: Var,
        words: Var,
        rng: Option<&mut Rng>,
    ) -> Result<(Var, GroupAssignment)> {
        let h = self.norm_load.forward(g, p, tokens)?;
        let loaded = self.load.forward(g, p, h, words)?;
        let t = g.add(tokens, loaded)?;

        let h = self.norm_group.forward(g, p, t)?;
        let (grouped, assignment) = self.group.forward(g, p, h, map, rng)?;
        let t = g.add(t, grouped)?;

        let h = self.norm_ffn.forward(g, p, t)?;
        let h = self.ffn.forward(g, p, h)?;
        let t = g.add(t, h)?;
        Ok((t, assignment))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn layer(cfg: &ModelConfig, c_v: usize, seed: u64) -> (ParamStore, GroupTransformerLayer) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let l = GroupTransformerLayer::new(&mut init, "gt", cfg, c_v).unwrap();
        (store, l)
    }

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
    }

    #[test]
    fn single_word_attention_is_uniform_over_tokens() {
        let cfg = ModelConfig { c_t: 8, c_l: 8, ..ModelConfig::default() };
        let (store, l) = layer(&cfg, 8, 1);
        let mut rng = Rng::new(2);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let t = g.constant(&random(&mut rng, &[3, 8]));
        let f = g.constant(&random(&mut rng, &[1, 8]));
        let out = l.load.forward(&mut g, &p, t, f).unwrap();
        let v = g.value(out);
        for r in 1..3 {
            assert_eq!(v[..8], v[r * 8..(r + 1) * 8]);
        }
    }

    #[test]
    fn zero_words_load_nothing() {
        let cfg = ModelConfig { c_t: 8, c_l: 8, ..ModelConfig::default() };
        let (store, l) = layer(&cfg, 8, 1);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let t = g.constant(&Tensor::full(&[3, 8], 0.5));
        let f = g.constant(&Tensor::zeros(&[4, 8]));
        let out = l.load.forward(&mut g, &p, t, f).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    /// Sets `wt` and `wd` to identities so affinities are raw cosines.
    fn identity_projections(store: &mut ParamStore, l: &GroupTransformerLayer, c: usize) {
        *store.get_mut(l.group.wt.w) = Tensor::eye(c);
        *store.get_mut(l.group.wd.w) = Tensor::eye(c);
    }

    #[test]
    fn orthogonal_tokens_claim_matching_pixels() {
        let cfg = ModelConfig { c_t: 2, c_l: 2, tau: TauMode::Fixed(0.1), ..ModelConfig::default() };
        let (mut store, l) = layer(&cfg, 2, 3);
        identity_projections(&mut store, &l, 2);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let t = g.constant(&Tensor::eye(2));
        let d = g.constant(&Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let (_, a) = l.group.forward(&mut g, &p, t, d, None).unwrap();
        let sp = g.value(a.s_pixel);
        assert!((sp[0] - 1.0).abs() < 1e-12 && sp[1].abs() < 1e-12);
        assert!(sp[2].abs() < 1e-12 && (sp[3] - 1.0).abs() < 1e-12);
        assert_eq!(g.value(a.s_mask), Tensor::eye(2).values());
        assert_eq!(a.owners(), [0, 1]);
    }

    #[test]
    fn identical_pixels_go_to_one_token() {
        let cfg = ModelConfig { c_t: 8, c_l: 8, ..ModelConfig::default() };
        let (store, l) = layer(&cfg, 8, 4);
        let mut rng = Rng::new(5);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let t = g.constant(&random(&mut rng, &[4, 8]));
        let px = random(&mut rng, &[8]);
        let d = g.constant(&Tensor::from_fn(&[3, 3, 8], |i| px.values()[i % 8]));
        let (_, a) = l.group.forward(&mut g, &p, t, d, None).unwrap();
        let owners = a.owners();
        assert!(owners.iter().all(|&o| o == owners[0]));
        let mask = g.value(a.s_mask);
        for px in 0..9 {
            let col: f64 = (0..4).map(|n| mask[n * 9 + px]).sum();
            assert_eq!(col, 1.0);
        }
    }

    #[test]
    fn zero_output_projections_make_layer_identity() {
        let cfg = ModelConfig { c_t: 8, c_l: 8, ..ModelConfig::default() };
        let (mut store, l) = layer(&cfg, 8, 6);
        for id in [l.load.wc.w, l.group.wt.w, l.group.mlp.fc2.w, l.ffn.fc2.w] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut rng = Rng::new(7);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let tokens = random(&mut rng, &[3, 8]);
        let t = g.constant(&tokens);
        let d = g.constant(&random(&mut rng, &[4, 4, 8]));
        let f = g.constant(&random(&mut rng, &[2, 8]));
        let (out, _) = l.forward(&mut g, &p, t, d, f, Some(&mut rng)).unwrap();
        assert_eq!(g.value(out), tokens.values());
    }

    #[test]
    fn token_shape_preserved_for_every_stage() {
        let cfg = ModelConfig::default();
        for (c_v, s) in [(32usize, 4usize), (16, 8), (8, 16)] {
            let (store, l) = layer(&cfg, c_v, 8);
            let mut rng = Rng::new(9);
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let t = g.constant(&random(&mut rng, &[8, 32]));
            let d = g.constant(&random(&mut rng, &[s, s, c_v]));
            let f = g.constant(&random(&mut rng, &[4, 32]));
            let (out, a) = l.forward(&mut g, &p, t, d, f, Some(&mut rng)).unwrap();
            assert_eq!(g.shape(out), &[8, 32]);
            assert_eq!(a.s_onehot.shape(), &[s * s, 8]);
        }
    }

    #[test]
    fn temperature_sharpens_assignment() {
        let mut rng = Rng::new(10);
        let tokens = random(&mut rng, &[4, 8]);
        let map = random(&mut rng, &[4, 4, 8]);
        let mut prev = 0.0;
        for tau in [1.0, 0.1, 0.01] {
            let cfg = ModelConfig { c_t: 8, c_l: 8, tau: TauMode::Fixed(tau), ..ModelConfig::default() };
            let (store, l) = layer(&cfg, 8, 11);
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let t = g.constant(&tokens);
            let d = g.constant(&map);
            let (_, a) = l.group.forward(&mut g, &p, t, d, None).unwrap();
            let s = g.value(a.s_gumbel);
            let min_max = (0..16)
                .map(|px| (0..4).map(|n| s[n * 16 + px]).fold(0.0, f64::max))
                .fold(1.0, f64::min);
            assert!(min_max >= prev, "tau {tau}: {min_max} < {prev}");
            prev = min_max;
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let cfg = ModelConfig::default();
        let (store, l) = layer(&cfg, 16, 12);
        let mut rng = Rng::new(13);
        let tokens = random(&mut rng, &[8, 32]);
        let map = random(&mut rng, &[8, 8, 16]);
        let words = random(&mut rng, &[4, 32]);
        let run = || {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let t = g.constant(&tokens);
            let d = g.constant(&map);
            let f = g.constant(&words);
            let (out, a) = l.forward(&mut g, &p, t, d, f, None).unwrap();
            (g.value(out).to_vec(), a.s_onehot)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn learnable_tau_starts_at_one() {
        let cfg = ModelConfig { c_t: 8, c_l: 8, ..ModelConfig::default() };
        let (store, l) = layer(&cfg, 8, 14);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let tau = l.group.temperature(&mut g, &p);
        assert!((g.scalar(tau) - 1.0).abs() < 1e-15);
    }

    fn run_block(seed: u64, n: usize, h: usize, w: usize, cfg: &ModelConfig) -> (Graph, GroupAssignment, Var, Var) {
        let (store, l) = layer(cfg, 8, seed);
        let mut rng = Rng::new(seed ^ 0x5eed);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let t = g.param(&random(&mut rng, &[n, cfg.c_t]));
        let d = g.param(&random(&mut rng, &[h, w, 8]));
        let (out, a) = l.group.forward(&mut g, &p, t, d, Some(&mut rng)).unwrap();
        let _ = out;
        (g, a, t, d)
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig { c_t: 8, c_l: 8, ..ModelConfig::default() }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn hard_assignment_partitions_pixels(seed in any::<u64>(), ni in 0usize..3, h in 1usize..=16, w in 1usize..=16) {
            let n = [2, 4, 8][ni];
            let (g, a, _, _) = run_block(seed, n, h, w, &small_cfg());
            let hw = h * w;
            let mask = g.value(a.s_mask);
            let soft = g.value(a.s_gumbel);
            let sp = g.value(a.s_pixel);
            prop_assert!(sp.iter().all(|v| v.abs() <= 1.0 + 1e-9));
            prop_assert!(a.tau > 0.0);
            for px in 0..hw {
                let col: Vec<f64> = (0..n).map(|i| mask[i * hw + px]).collect();
                prop_assert!(col.iter().all(|&v| v == 0.0 || v == 1.0));
                prop_assert_eq!(col.iter().filter(|&&v| v == 1.0).count(), 1);
                let sum: f64 = (0..n).map(|i| soft[i * hw + px]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                let owner = a.owners()[px];
                prop_assert_eq!(mask[owner * hw + px], 1.0);
                for i in 0..n {
                    prop_assert!(soft[i * hw + px] <= soft[owner * hw + px]);
                    prop_assert_eq!(a.s_onehot.values()[px * n + i], mask[i * hw + px]);
                }
            }
        }

        #[test]
        fn straight_through_gradient_matches_soft_path(seed in any::<u64>(), ni in 0usize..3, h in 1usize..=8, w in 1usize..=8) {
            let n = [2, 4, 8][ni];
            let mut grads = Vec::new();
            for use_mask in [true, false] {
                let (mut g, a, t, d) = run_block(seed, n, h, w, &small_cfg());
                let target = if use_mask { a.s_mask } else { a.s_gumbel };
                let mut rng = Rng::new(seed.wrapping_add(1));
                let wts = random(&mut rng, &[n, h * w]);
                let wv = g.constant(&wts);
                let f = g.mul(target, wv).unwrap();
                let f = g.sum(f);
                g.backward(f).unwrap();
                grads.push([g.grad(t).unwrap().to_vec(), g.grad(d).unwrap().to_vec()]);
            }
            for (a, b) in grads[0].iter().zip(&grads[1]) {
                let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                prop_assert!(diff < 1e-12, "diff {}", diff);
            }
        }
    }

    #[test]
    fn layer_gradcheck() {
        use crate::gradcheck::{check_params, sample_probes};
        let mut rng = Rng::new(20);
        for assign in [AssignMode::Hard, AssignMode::Soft, AssignMode::Pool] {
            let cfg = ModelConfig { c_t: 8, c_l: 8, assign, ..ModelConfig::default() };
            let (store, l) = layer(&cfg, 8, 21);
            let t = random(&mut rng, &[3, 8]);
            let d = random(&mut rng, &[4, 4, 8]);
            let f = random(&mut rng, &[2, 8]);
            let wts = random(&mut rng, &[3, 8]);
            let ids: Vec<_> = store.ids().collect();
            let probes = sample_probes(&store, &ids, 8, &mut rng);
            let r = check_params(&store, &probes, 1e-5, 1e-8, |g, p| {
                let (tv, dv, fv) = (g.constant(&t), g.constant(&d), g.constant(&f));
                let mut noise = Rng::new(22);
                let (out, _) = l.forward(g, p, tv, dv, fv, Some(&mut noise))?;
                let wv = g.constant(&wts);
                let y = g.mul(out, wv)?;
                Ok(g.sum(y))
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "{assign}: {r:?}");
        }
    }
}
