//! Naive loop implementations of the model's blocks, used as independent
//! references by tests. Nothing here touches the tape.

use crate::config::{Affinity, AssignMode, PoolNorm, TauMode};
use crate::decoder::MaskHead;
use crate::group::{GroupBlock, LoadBlock};
use crate::metrics::Mask;
use crate::nn::{Linear, Mlp};
use crate::objectives::DICE_EPS;
use crate::params::ParamStore;

/// `x (rows x d_in)` times the layer's weight, plus bias.
fn linear(store: &ParamStore, l: &Linear, x: &[f64], rows: usize) -> Vec<f64> {
    let w = store.get(l.w);
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    let w = w.values();
    let b = l.b.map(|b| store.get(b).values().to_vec());
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        for j in 0..d_out {
            let mut acc = 0.0;
            for k in 0..d_in {
                acc += x[r * d_in + k] * w[k * d_out + j];
            }
            if let Some(b) = &b {
                acc += b[j];
            }
            out[r * d_out + j] = acc;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn mlp(store: &ParamStore, m: &Mlp, x: &[f64], rows: usize) -> Vec<f64> {
    let h: Vec<f64> = linear(store, &m.fc1, x, rows).into_iter().map(gelu).collect();
    linear(store, &m.fc2, &h, rows)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    (dot(a, a) + 1e-24).sqrt()
}

/// Cross-attention from `n` tokens to `l` words.
pub fn load_block(store: &ParamStore, block: &LoadBlock, tokens: &[f64], n: usize, words: &[f64], l: usize) -> Vec<f64> {
    let q = linear(store, &block.wq, tokens, n);
    let k = linear(store, &block.wk, words, l);
    let v = linear(store, &block.wv, words, l);
    let c = q.len() / n;
    let scale = (block.c_l as f64).sqrt();
    let mut ctx = vec![0.0; n * c];
    for i in 0..n {
        let scores: Vec<f64> = (0..l).map(|j| dot(&q[i * c..(i + 1) * c], &k[j * c..(j + 1) * c]) / scale).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..l {
            for ch in 0..c {
                ctx[i * c + ch] += exps[j] / z * v[j * c + ch];
            }
        }
    }
    linear(store, &block.wc, &ctx, n)
}

/// Forward values of one group block.
#[derive(Clone, Debug)]
pub struct GroupOutput {
    /// `n x hw`.
    pub s_mask: Vec<f64>,
    /// Owning token per pixel.
    pub owners: Vec<usize>,
    /// `n x c_t`.
    pub tokens: Vec<f64>,
}

/// Group block for hard or soft assignment. `map` is `hw x c` row-major and
/// `noise` is `n x hw`.
pub fn group_block(
    store: &ParamStore,
    block: &GroupBlock,
    t_lang: &[f64],
    n: usize,
    map: &[f64],
    hw: usize,
    noise: &[f64],
) -> GroupOutput {
    assert!(block.assign != AssignMode::Pool, "oracle covers hard and soft assignment");
    let tp = linear(store, &block.wt, t_lang, n);
    let dp = linear(store, &block.wd, map, hw);
    let c = block.c_t;
    let tau = match block.tau {
        TauMode::Learnable => softplus(store.get(block.tau_theta.unwrap()).values()[0]),
        TauMode::Fixed(v) => v,
    };
    let mut s_mask = vec![0.0; n * hw];
    let mut owners = vec![0; hw];
    for p in 0..hw {
        let d = &dp[p * c..(p + 1) * c];
        let logits: Vec<f64> = (0..n)
            .map(|i| {
                let t = &tp[i * c..(i + 1) * c];
                let s = match block.affinity {
                    Affinity::Cosine => dot(t, d) / (norm(t) * norm(d)),
                    Affinity::Dot => dot(t, d) / (c as f64).sqrt(),
                };
                (s + noise[i * hw + p]) / tau
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let soft: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let mut best = 0;
        for i in 1..n {
            if soft[i] > soft[best] {
                best = i;
            }
        }
        owners[p] = best;
        for i in 0..n {
            s_mask[i * hw + p] = match block.assign {
                AssignMode::Hard => f64::from(u8::from(i == best)),
                _ => soft[i],
            };
        }
    }
    let mut pooled = vec![0.0; n * c];
    for i in 0..n {
        let mass: f64 = (0..hw).map(|p| s_mask[i * hw + p]).sum();
        let denom = match block.pool {
            PoolNorm::Mean => mass + 1.0,
            PoolNorm::Sum => 1.0,
        };
        for ch in 0..c {
            let s: f64 = (0..hw).map(|p| s_mask[i * hw + p] * dp[p * c + ch]).sum();
            pooled[i * c + ch] = s / denom;
        }
    }
    let update = mlp(store, &block.mlp, &pooled, n);
    let tokens = update.iter().zip(&tp).map(|(u, t)| u + t).collect();
    GroupOutput { s_mask, owners, tokens }
}

/// Mask probabilities `n x hw` from a dynamic 1x1 convolution per token.
pub fn mask_head(store: &ParamStore, head: &MaskHead, tokens: &[f64], n: usize, map: &[f64], hw: usize) -> Vec<f64> {
    let kernels = mlp(store, &head.mlp, tokens, n);
    let c = kernels.len() / n - 1;
    let mut z = vec![0.0; n * hw];
    for i in 0..n {
        let k = &kernels[i * (c + 1)..(i + 1) * (c + 1)];
        for p in 0..hw {
            let logit = dot(&k[..c], &map[p * c..(p + 1) * c]) + k[c];
            z[i * hw + p] = 1.0 / (1.0 + (-logit).exp());
        }
    }
    z
}

/// Dice + BCE of referent logits at each stage against the ground truth
/// sampled at the top-left pixel of every cell.
pub fn segmentation_loss(referent_logits: &[Vec<f64>], sizes: &[(usize, usize)], gt: &Mask) -> Vec<f64> {
    referent_logits
        .iter()
        .zip(sizes)
        .map(|(logits, &(h, w))| {
            let (sy, sx) = (gt.height / h, gt.width / w);
            let mut inter = 0.0;
            let mut sum_p = 0.0;
            let mut sum_g = 0.0;
            let mut bce = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let t = f64::from(u8::from(gt.get(y * sy, x * sx)));
                    let z = logits[y * w + x];
                    let p = 1.0 / (1.0 + (-z).exp());
                    inter += p * t;
                    sum_p += p;
                    sum_g += t;
                    bce += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
                }
            }
            let dice = 1.0 - (2.0 * inter + DICE_EPS) / (sum_p + sum_g + DICE_EPS);
            dice + bce / (h * w) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::decoder::DecoderState;
    use crate::graph::Graph;
    use crate::group::GroupTransformerLayer;
    use crate::nn::Init;
    use crate::objectives::segmentation_loss as seg_loss;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn layer(cfg: &ModelConfig, c_v: usize, seed: u64) -> (ParamStore, GroupTransformerLayer) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let l = GroupTransformerLayer::new(&mut init, "gt", cfg, c_v).unwrap();
        (store, l)
    }

    #[test]
    fn load_block_matches_loops() {
        let cfg = ModelConfig { c_t: 8, c_l: 8, ..ModelConfig::default() };
        let (store, l) = layer(&cfg, 8, 1);
        let mut rng = Rng::new(2);
        let (t, f) = (random(&mut rng, 24), random(&mut rng, 32));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let tv = g.constant_from(&[3, 8], t.clone()).unwrap();
        let fv = g.constant_from(&[4, 8], f.clone()).unwrap();
        let out = l.load.forward(&mut g, &p, tv, fv).unwrap();
        assert!(max_diff(g.value(out), &load_block(&store, &l.load, &t, 3, &f, 4)) < 1e-12);
    }

    #[test]
    fn group_block_matches_loops() {
        for assign in [AssignMode::Hard, AssignMode::Soft] {
            let cfg = ModelConfig { c_t: 8, c_l: 8, assign, ..ModelConfig::default() };
            let (store, l) = layer(&cfg, 8, 3);
            let mut rng = Rng::new(4);
            let (t, d) = (random(&mut rng, 24), random(&mut rng, 128));
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let tv = g.constant_from(&[3, 8], t.clone()).unwrap();
            let dv = g.constant_from(&[4, 4, 8], d.clone()).unwrap();
            let (out, a) = l.group.forward(&mut g, &p, tv, dv, Some(&mut rng)).unwrap();
            let r = group_block(&store, &l.group, &t, 3, &d, 16, a.noise.values());
            assert!(max_diff(g.value(a.s_mask), &r.s_mask) < 1e-12);
            assert!(max_diff(g.value(out), &r.tokens) < 1e-12);
            assert_eq!(a.owners(), r.owners);
        }
    }

    #[test]
    fn mask_head_and_segmentation_loss_match_loops() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        let mut init = Init::new(&mut store, &mut rng);
        let heads: Vec<_> = [(32, 4), (16, 8), (8, 16)]
            .iter()
            .map(|&(c, _)| MaskHead::new(&mut init, &format!("h{c}"), 32, c).unwrap())
            .collect();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let tokens = random(&mut rng, 3 * 32);
        let tv = g.constant_from(&[3, 32], tokens.clone()).unwrap();
        let mut logits = Vec::new();
        let mut z = Vec::new();
        let mut refs = Vec::new();
        for (head, (c, s)) in heads.iter().zip([(32usize, 4usize), (16, 8), (8, 16)]) {
            let map = random(&mut rng, s * s * c);
            let dv = g.constant_from(&[s, s, c], map.clone()).unwrap();
            let l = head.logits(&mut g, &p, tv, dv).unwrap();
            let zv = g.sigmoid(l);
            let expect = mask_head(&store, head, &tokens, 3, &map, s * s);
            assert!(max_diff(g.value(zv), &expect) < 1e-12);
            refs.push(g.value(l)[..s * s].to_vec());
            logits.push(l);
            z.push(zv);
        }
        let gt = Mask::new(64, 64, (0..4096).map(|_| rng.bernoulli(0.3)).collect()).unwrap();
        let state = DecoderState {
            d: vec![],
            t: vec![],
            logits,
            z,
            assignments: vec![None, None, None],
            supervised: [true; 3],
            sizes: vec![(4, 4), (8, 8), (16, 16)],
        };
        let losses = seg_loss(&mut g, &state, &gt).unwrap();
        let got: Vec<f64> = losses.iter().map(|&v| g.scalar(v)).collect();
        let expect = segmentation_loss(&refs, &state.sizes, &gt);
        assert!(max_diff(&got, &expect) < 1e-12, "{got:?} vs {expect:?}");
    }
}
