//! Consecutive decoder: coarse-to-fine feature fusion, one group
//! transformer layer per stage, and dynamic-kernel mask heads.

use crate::config::{DecoderMode, ModelConfig, TokenMode};
use crate::encoders::FeaturePyramid;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::group::{GroupAssignment, GroupTransformerLayer};
use crate::metrics::Mask;
use crate::nn::{ConvBlock, Init, Mlp};
use crate::params::Bound;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Number of decoding stages after the pass-through stage.
pub const STAGES: usize = 3;

/// `ReLU(LN(Conv3x3([V_i ; up(D_prev)])))`.
#[derive(Clone, Debug)]
pub struct Fuse {
    pub conv: ConvBlock,
}

impl Fuse {
    pub fn new(init: &mut Init, name: &str, c_v: usize, c_prev: usize) -> Result<Self> {
        Ok(Fuse { conv: ConvBlock::new(init, name, c_v + c_prev, c_v, 1)? })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, v: Var, d_prev: Var) -> Result<Var> {
        let (vs, ds) = (g.shape(v).to_vec(), g.shape(d_prev).to_vec());
        if vs.len() != 3 || ds.len() != 3 || vs[0] != 2 * ds[0] || vs[1] != 2 * ds[1] {
            return Err(Error::dim("fuse", &vs, &ds));
        }
        let up = g.upsample2x(d_prev)?;
        let cat = g.concat(&[v, up])?;
        self.conv.forward(g, p, cat)
    }
}

/// Per-token 1x1 dynamic convolution: an MLP turns each token into
/// `C^v` weights plus a bias.
#[derive(Clone, Debug)]
pub struct MaskHead {
    pub mlp: Mlp,
}

impl MaskHead {
    pub fn new(init: &mut Init, name: &str, c_t: usize, c_v: usize) -> Result<Self> {
        Ok(MaskHead { mlp: Mlp::new(init, name, c_t, c_t, c_v + 1)? })
    }

    /// Pre-sigmoid mask logits, `N x HW`.
    pub fn logits(&self, g: &mut Graph, p: &Bound, tokens: Var, map: Var) -> Result<Var> {
        let kernels = self.mlp.forward(g, p, tokens)?;
        let (hw, c) = flat_dims(g, map)?;
        let flat = g.reshape(map, &[hw, c])?;
        let ones = g.constant(&Tensor::ones(&[hw, 1]));
        let aug = g.concat(&[flat, ones])?;
        g.matmul_nt(kernels, aug)
    }
}

fn flat_dims(g: &Graph, map: Var) -> Result<(usize, usize)> {
    match g.shape(map) {
        &[h, w, c] => Ok((h * w, c)),
        s => Err(Error::dim("map", s, &[0, 0, 0])),
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub fuse: Vec<Fuse>,
    /// Group layer per stage; absent where the mode skips grouping.
    pub layers: Vec<Option<GroupTransformerLayer>>,
    pub heads: Vec<MaskHead>,
    mode: DecoderMode,
}

/// Everything one decoder pass produced.
#[derive(Clone, Debug)]
pub struct DecoderState {
    /// Fused maps `D_1..D_4`.
    pub d: Vec<Var>,
    /// Tokens `T_1..T_4`.
    pub t: Vec<Var>,
    /// Mask logits for stages 2..4, `N x HW` each.
    pub logits: Vec<Var>,
    /// Mask probabilities for stages 2..4.
    pub z: Vec<Var>,
    pub assignments: Vec<Option<GroupAssignment>>,
    /// Stages whose referent mask is supervised.
    pub supervised: [bool; STAGES],
    /// Spatial size of each of stages 2..4.
    pub sizes: Vec<(usize, usize)>,
}

impl Decoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        init.scope("dec", |init| {
            let mut fuse = Vec::new();
            let mut layers = Vec::new();
            let mut heads = Vec::new();
            for s in 1..=STAGES {
                let (c, c_prev) = (cfg.stage_channels(s), cfg.stage_channels(s - 1));
                fuse.push(Fuse::new(init, &format!("fuse{}", s + 1), c, c_prev)?);
                let grouped = match (cfg.tokens, cfg.decoder) {
                    (TokenMode::Off, _) => false,
                    (_, DecoderMode::Single) => s == STAGES,
                    _ => true,
                };
                layers.push(if grouped {
                    Some(GroupTransformerLayer::new(init, &format!("layer{}", s + 1), cfg, c)?)
                } else {
                    None
                });
                heads.push(MaskHead::new(init, &format!("head{}", s + 1), cfg.c_t, c)?);
            }
            let mode = if cfg.tokens == TokenMode::Off { DecoderMode::Consecutive } else { cfg.decoder };
            Ok(Decoder { fuse, layers, heads, mode })
        })
    }

    pub fn mode(&self) -> DecoderMode {
        self.mode
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        pyramid: &FeaturePyramid,
        words: Var,
        t_init: Var,
        mut rng: Option<&mut Rng>,
    ) -> Result<DecoderState> {
        let mut d = vec![pyramid.maps[0]];
        let mut t = vec![t_init];
        let mut logits = Vec::new();
        let mut z = Vec::new();
        let mut assignments = Vec::new();
        let mut sizes = Vec::new();
        for s in 0..STAGES {
            let v = pyramid.maps[s + 1];
            let prev = match self.mode {
                DecoderMode::Parallel => {
                    let shape = g.shape(d[s]).to_vec();
                    g.constant(&Tensor::zeros(&shape))
                }
                _ => d[s],
            };
            let di = self.fuse[s].forward(g, p, v, prev)?;
            let t_in = match self.mode {
                DecoderMode::Parallel => t_init,
                _ => t[s],
            };
            let (ti, a) = match &self.layers[s] {
                Some(layer) => {
                    let (ti, a) = layer.forward(g, p, t_in, di, words, rng.as_deref_mut())?;
                    (ti, Some(a))
                }
                None => (t_in, None),
            };
            let l = self.heads[s].logits(g, p, ti, di)?;
            z.push(g.sigmoid(l));
            logits.push(l);
            let sh = g.shape(di);
            sizes.push((sh[0], sh[1]));
            d.push(di);
            t.push(ti);
            assignments.push(a);
        }
        let supervised = match self.mode {
            DecoderMode::Single if self.layers[0].is_none() && self.layers[STAGES - 1].is_some() => {
                [false, false, true]
            }
            _ => [true; STAGES],
        };
        Ok(DecoderState { d, t, logits, z, assignments, supervised, sizes })
    }
}

impl DecoderState {
    /// Final-stage referent probabilities, `H_4 x W_4`.
    pub fn referent_probs<'g>(&self, g: &'g Graph) -> &'g [f64] {
        let (h, w) = self.sizes[STAGES - 1];
        &g.value(self.z[STAGES - 1])[..h * w]
    }

    pub fn predict_mask(&self, g: &Graph, out_h: usize, out_w: usize, threshold: f64) -> Result<Mask> {
        let (h, w) = self.sizes[STAGES - 1];
        binarize(self.referent_probs(g), h, w, out_h, out_w, threshold)
    }
}

/// Nearest-neighbour upsampling of an `h x w` probability map followed by a
/// strict `> threshold` cut.
pub fn binarize(probs: &[f64], h: usize, w: usize, out_h: usize, out_w: usize, threshold: f64) -> Result<Mask> {
    if probs.len() != h * w {
        return Err(Error::dim("binarize", &[h, w], &[probs.len()]));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Contract(format!("threshold {threshold} outside (0, 1)")));
    }
    let small = Mask::new(h, w, probs.iter().map(|&v| v > threshold).collect())?;
    Ok(small.resize_nearest(out_h, out_w))
}
