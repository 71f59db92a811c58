//! Training objectives: token/sentence contrastive loss and multi-level
//! dice + BCE segmentation loss on the referent token's masks.

use crate::config::LossMode;
use crate::decoder::{DecoderState, STAGES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::Mask;
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1.0;
const NORM_EPS: f64 = 1e-12;

/// Scaled cosine similarities `s(T^(n), e)` as a `1 x N` row.
pub fn similarities(g: &mut Graph, tokens: Var, e: Var, tau_cl: f64) -> Result<Var> {
    let tn = g.l2_normalize(tokens, 1, NORM_EPS)?;
    let en = g.l2_normalize(e, 1, NORM_EPS)?;
    let s = g.matmul_nt(en, tn)?;
    Ok(g.scale(s, 1.0 / tau_cl))
}

/// Contrastive loss over a `1 x N` similarity row whose first entry is the
/// referent.
pub fn contrastive_from_sims(g: &mut Graph, sims: Var, mode: LossMode) -> Result<Var> {
    let n = g.shape(sims).iter().product::<usize>();
    if n < 2 {
        return Err(Error::Contract(format!("contrastive loss needs at least 2 tokens, got {n}")));
    }
    let col = g.reshape(sims, &[n, 1])?;
    let s1 = g.slice_rows(col, 0, 1)?;
    let denom = match mode {
        LossMode::AsWritten => g.slice_rows(col, 1, n - 1)?,
        LossMode::InfoNce => col,
    };
    let lse = g.log_sum_exp(denom);
    let s1 = g.reshape(s1, &[1])?;
    g.sub(lse, s1)
}

pub fn contrastive(g: &mut Graph, tokens: Var, e: Var, tau_cl: f64, mode: LossMode) -> Result<Var> {
    let s = similarities(g, tokens, e, tau_cl)?;
    contrastive_from_sims(g, s, mode)
}

/// `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`.
pub fn dice(g: &mut Graph, probs: Var, target: &[f64]) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    let t = g.constant_from(&shape, target.to_vec())?;
    let pg = g.mul(probs, t)?;
    let inter = g.sum(pg);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_EPS);
    let sp = g.sum(probs);
    let den = g.add_scalar(sp, target.iter().sum::<f64>() + DICE_EPS);
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

pub fn bce(g: &mut Graph, logits: Var, target: &[f64]) -> Result<Var> {
    g.bce_with_logits(logits, target)
}

/// Per-stage `dice + bce` of the referent token's mask against the
/// nearest-downsampled ground truth. Unsupervised stages contribute a
/// constant zero.
pub fn segmentation_loss(g: &mut Graph, state: &DecoderState, gt: &Mask) -> Result<[Var; STAGES]> {
    let mut out = Vec::with_capacity(STAGES);
    for s in 0..STAGES {
        if !state.supervised[s] {
            out.push(g.constant(&Tensor::scalar(0.0)));
            continue;
        }
        let (h, w) = state.sizes[s];
        let target = gt.resize_nearest(h, w).as_f64();
        let logit = g.slice_rows(state.logits[s], 0, 1)?;
        let prob = g.sigmoid(logit);
        let d = dice(g, prob, &target)?;
        let b = bce(g, logit, &target)?;
        out.push(g.add(d, b)?);
    }
    Ok([out[0], out[1], out[2]])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_cl: f64,
    pub l_seg: [f64; STAGES],
    pub l_total: f64,
}

impl LossReport {
    pub fn new(l_cl: f64, l_seg: [f64; STAGES]) -> Self {
        LossReport { l_cl, l_seg, l_total: l_seg.iter().fold(l_cl, |acc, v| acc + v) }
    }

    pub fn seg_sum(&self) -> f64 {
        self.l_seg.iter().sum()
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        let names = ["l_cl", "l_seg[2]", "l_seg[3]", "l_seg[4]"];
        let values = [self.l_cl, self.l_seg[0], self.l_seg[1], self.l_seg[2]];
        names.into_iter().zip(values).find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

/// Unweighted sum of all terms; `l_cl` is `None` when the contrastive loss
/// is inactive.
pub fn total_loss(g: &mut Graph, l_cl: Option<Var>, seg: &[Var; STAGES]) -> Result<(Var, LossReport)> {
    let mut total = match l_cl {
        Some(v) => v,
        None => g.constant(&Tensor::scalar(0.0)),
    };
    for &s in seg {
        total = g.add(total, s)?;
    }
    let report = LossReport::new(
        l_cl.map_or(0.0, |v| g.scalar(v)),
        [g.scalar(seg[0]), g.scalar(seg[1]), g.scalar(seg[2])],
    );
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, Probe};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn sims_loss(s: &[f64], mode: LossMode) -> f64 {
        let mut g = Graph::new();
        let v = g.constant_from(&[1, s.len()], s.to_vec()).unwrap();
        let l = contrastive_from_sims(&mut g, v, mode).unwrap();
        g.scalar(l)
    }

    #[test]
    fn contrastive_examples() {
        for c in [-3.0, 0.0, 7.5] {
            assert!(sims_loss(&[c, c], LossMode::AsWritten).abs() < 1e-15);
        }
        let l = sims_loss(&[1.0, 0.0, 0.0], LossMode::AsWritten);
        assert!((l - (-1.0 + 2f64.ln())).abs() < 1e-12);
        let l = sims_loss(&[0.3; 4], LossMode::InfoNce);
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_needs_two_tokens() {
        let mut g = Graph::new();
        let v = g.constant_from(&[1, 1], vec![1.0]).unwrap();
        assert!(matches!(contrastive_from_sims(&mut g, v, LossMode::InfoNce), Err(Error::Contract(_))));
    }

    #[test]
    fn dice_examples() {
        let mut g = Graph::new();
        let target = [1.0, 0.0, 1.0, 1.0];
        let p = g.constant_from(&[4], target.to_vec()).unwrap();
        let d = dice(&mut g, p, &target).unwrap();
        assert_eq!(g.scalar(d), 0.0);
        let p = g.constant(&Tensor::ones(&[4, 4]));
        let d = dice(&mut g, p, &[0.0; 16]).unwrap();
        assert!((g.scalar(d) - (1.0 - 1.0 / 17.0)).abs() < 1e-15);
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::new();
        let z = g.constant(&Tensor::zeros(&[4]));
        let b = bce(&mut g, z, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((g.scalar(b) - 2f64.ln()).abs() < 1e-15);
        let z = g.constant_from(&[2], vec![20.0, -20.0]).unwrap();
        let b = bce(&mut g, z, &[1.0, 0.0]).unwrap();
        assert!(g.scalar(b) < 1e-8);
    }

    #[test]
    fn dice_and_bce_gradcheck() {
        let mut rng = Rng::new(1);
        let logits = Tensor::from_fn(&[4, 4], |_| rng.uniform_range(-2.0, 2.0));
        let target: Vec<f64> = (0..16).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
        let r = check(&[logits.clone()], Probe::All, 1e-5, 1e-8, |g, x| {
            let p = g.sigmoid(x[0]);
            dice(g, p, &target)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
        let r = check(&[logits], Probe::All, 1e-5, 1e-8, |g, x| bce(g, x[0], &target)).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn contrastive_gradcheck() {
        let mut rng = Rng::new(2);
        let t = Tensor::from_fn(&[4, 6], |_| rng.uniform_range(-1.0, 1.0));
        let e = Tensor::from_fn(&[1, 6], |_| rng.uniform_range(-1.0, 1.0));
        for mode in [LossMode::AsWritten, LossMode::InfoNce] {
            let r = check(&[t.clone(), e.clone()], Probe::All, 1e-5, 1e-8, |g, x| {
                contrastive(g, x[0], x[1], 0.1, mode)
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn total_loss_examples() {
        let mut g = Graph::new();
        let zero = [(); 3].map(|_| g.constant(&Tensor::scalar(0.0)));
        let cl = g.constant(&Tensor::scalar(0.0));
        assert_eq!(total_loss(&mut g, Some(cl), &zero).unwrap().1.l_total, 0.0);
        let seg = [0.5, 0.4, 0.3].map(|v| g.constant(&Tensor::scalar(v)));
        let cl = g.constant(&Tensor::scalar(-0.3));
        let (v, r) = total_loss(&mut g, Some(cl), &seg).unwrap();
        assert!((r.l_total - 0.9).abs() < 1e-12);
        assert_eq!(g.scalar(v), r.l_total);
    }

    #[test]
    fn non_finite_terms_are_named() {
        let r = LossReport::new(0.1, [0.2, f64::NAN, 0.3]);
        assert_eq!(r.non_finite_term(), Some("l_seg[3]"));
        assert_eq!(LossReport::new(0.0, [0.0; 3]).non_finite_term(), None);
    }

    proptest! {
        #[test]
        fn report_sums_terms(cl in -5.0..5.0f64, a in 0.0..3.0f64, b in 0.0..3.0f64, c in 0.0..3.0f64) {
            let r = LossReport::new(cl, [a, b, c]);
            prop_assert_eq!(r.l_total, cl + a + b + c);
        }

        #[test]
        fn as_written_below_infonce(s in prop::collection::vec(-10.0..10.0f64, 2..9)) {
            let aw = sims_loss(&s, LossMode::AsWritten);
            let nce = sims_loss(&s, LossMode::InfoNce);
            prop_assert!(aw < nce);
            prop_assert!(nce >= 0.0);
        }

        #[test]
        fn referent_choice_ignores_sentence_scale(
            t in prop::collection::vec(-1.0..1.0f64, 12),
            e in prop::collection::vec(-1.0..1.0f64, 3),
            k in 0.01..100.0f64,
        ) {
            let argmax = |scale: f64| {
                let mut g = Graph::new();
                let tv = g.constant_from(&[4, 3], t.clone()).unwrap();
                let ev = g.constant_from(&[1, 3], e.iter().map(|v| v * scale).collect()).unwrap();
                let s = similarities(&mut g, tv, ev, 0.1).unwrap();
                let v = g.value(s).to_vec();
                (0..4).fold(0, |b, i| if v[i] > v[b] { i } else { b })
            };
            prop_assume!(e.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            prop_assert_eq!(argmax(1.0), argmax(k));
        }
    }
}
