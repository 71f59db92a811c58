//! Trainable-from-scratch image and text encoders.
//!
//! The image side is a strided convolution stack producing four maps at
//! strides 32, 16, 8 and 4. The text side is a learned embedding plus one
//! pre-norm self-attention block. Neither sees the other modality.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{ConvBlock, Init, Linear, Mlp, Norm};
use crate::params::{Bound, ParamId};
use crate::tensor::Tensor;

/// Visual maps `V_1..V_4`, coarse to fine: `maps[0]` is the stride-32 map.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub maps: [Var; 4],
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    /// Stride-4 stem followed by three stride-2 blocks, fine to coarse.
    blocks: [ConvBlock; 4],
}

impl ImageEncoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        init.scope("img", |init| {
            let c = |i| cfg.stage_channels(i);
            Ok(ImageEncoder {
                blocks: [
                    ConvBlock::new(init, "stem", 3, c(3), 4)?,
                    ConvBlock::new(init, "stage3", c(3), c(2), 2)?,
                    ConvBlock::new(init, "stage2", c(2), c(1), 2)?,
                    ConvBlock::new(init, "stage1", c(1), c(0), 2)?,
                ],
            })
        })
    }

    pub fn biases(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.blocks.iter().map(|b| b.b)
    }

    /// `img` is `H x W x 3` with `H`, `W` divisible by 32.
    pub fn encode(&self, g: &mut Graph, p: &Bound, img: Var) -> Result<FeaturePyramid> {
        let shape = g.shape(img).to_vec();
        match shape[..] {
            [h, w, 3] if h % 32 == 0 && w % 32 == 0 && h > 0 && w > 0 => {}
            _ => {
                return Err(Error::Config(format!(
                    "image shape {shape:?} must be H x W x 3 with H, W divisible by 32"
                )))
            }
        }
        let v4 = self.blocks[0].forward(g, p, img)?;
        let v3 = self.blocks[1].forward(g, p, v4)?;
        let v2 = self.blocks[2].forward(g, p, v3)?;
        let v1 = self.blocks[3].forward(g, p, v2)?;
        Ok(FeaturePyramid {
            maps: [v1, v2, v3, v4],
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TextFeatures {
    /// `L x C^l` per-word features.
    pub words: Var,
    /// `1 x C^l` sentence embedding.
    pub sentence: Var,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    embed: ParamId,
    pos: ParamId,
    norm1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm2: Norm,
    mlp: Mlp,
    pool: Linear,
    c_l: usize,
    max_len: usize,
}

impl TextEncoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.c_l;
        init.scope("txt", |init| {
            let table = Tensor::from_fn(&[cfg.vocab_size, c], |_| init.rng.uniform_range(-1.0, 1.0));
            let embed = init.tensor("embed", table, false)?;
            let table = Tensor::from_fn(&[cfg.max_len, c], |_| init.rng.uniform_range(-0.1, 0.1));
            let pos = init.tensor("pos", table, false)?;
            Ok(TextEncoder {
                embed,
                pos,
                norm1: Norm::new(init, "norm1", c)?,
                q: Linear::new(init, "q", c, c, false, 1.0)?,
                k: Linear::new(init, "k", c, c, false, 1.0)?,
                v: Linear::new(init, "v", c, c, false, 1.0)?,
                o: Linear::new(init, "o", c, c, false, 1.0)?,
                norm2: Norm::new(init, "norm2", c)?,
                mlp: Mlp::new(init, "mlp", c, c, c)?,
                pool: Linear::new(init, "pool", c, c, true, 1.0)?,
                c_l: c,
                max_len: cfg.max_len,
            })
        })
    }

    /// Positionless embedding lookup, `L x C^l`.
    pub fn embed(&self, g: &mut Graph, p: &Bound, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() || tokens.len() > self.max_len {
            return Err(Error::Contract(format!(
                "expression length {} outside 1..={}",
                tokens.len(),
                self.max_len
            )));
        }
        g.gather_rows(p.get(self.embed), tokens)
    }

    pub fn encode(&self, g: &mut Graph, p: &Bound, tokens: &[usize]) -> Result<TextFeatures> {
        let x = self.embed(g, p, tokens)?;
        let pos = g.slice_rows(p.get(self.pos), 0, tokens.len())?;
        let x = g.add(x, pos)?;

        let h = self.norm1.forward(g, p, x)?;
        let q = self.q.forward(g, p, h)?;
        let k = self.k.forward(g, p, h)?;
        let v = self.v.forward(g, p, h)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, 1.0 / (self.c_l as f64).sqrt());
        let attn = g.softmax(scores, 1)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = self.o.forward(g, p, ctx)?;
        let x = g.add(x, ctx)?;

        let h = self.norm2.forward(g, p, x)?;
        let h = self.mlp.forward(g, p, h)?;
        let words = g.add(x, h)?;

        let mean = g.mean_rows(words)?;
        let sentence = self.pool.forward(g, p, mean)?;
        Ok(TextFeatures { words, sentence })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::Rng;

    fn build(cfg: &ModelConfig) -> (ParamStore, ImageEncoder, TextEncoder) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let mut init = Init::new(&mut store, &mut rng);
        let img = ImageEncoder::new(&mut init, cfg).unwrap();
        let txt = TextEncoder::new(&mut init, cfg).unwrap();
        (store, img, txt)
    }

    #[test]
    fn pyramid_shapes_for_test_matrix() {
        for size in [32usize, 64, 96] {
            let cfg = ModelConfig { image_size: size, ..ModelConfig::default() };
            let (store, enc, _) = build(&cfg);
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let img = g.constant(&Tensor::full(&[size, size, 3], 0.3));
            let pyr = enc.encode(&mut g, &p, img).unwrap();
            for (i, &m) in pyr.maps.iter().enumerate() {
                let s = size / (32 >> i);
                assert_eq!(g.shape(m), &[s, s, 64 >> i], "size {size} stage {i}");
            }
        }
    }

    #[test]
    fn rejects_indivisible_image() {
        let cfg = ModelConfig::default();
        let (store, enc, _) = build(&cfg);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let img = g.constant(&Tensor::zeros(&[48, 64, 3]));
        assert!(matches!(enc.encode(&mut g, &p, img), Err(Error::Config(_))));
    }

    #[test]
    fn zero_image_zero_pyramid() {
        let cfg = ModelConfig::default();
        let (store, enc, _) = build(&cfg);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let img = g.constant(&Tensor::zeros(&[64, 64, 3]));
        let pyr = enc.encode(&mut g, &p, img).unwrap();
        for m in pyr.maps {
            assert!(g.value(m).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_word_expression() {
        let cfg = ModelConfig::default();
        let (store, _, txt) = build(&cfg);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = txt.encode(&mut g, &p, &[3]).unwrap();
        assert_eq!(g.shape(f.words), &[1, 32]);
        assert_eq!(g.shape(f.sentence), &[1, 32]);
        assert!(g.value(f.sentence).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn lookup_is_positionless() {
        let cfg = ModelConfig::default();
        let (store, _, txt) = build(&cfg);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let a = txt.embed(&mut g, &p, &[2, 5]).unwrap();
        let b = txt.embed(&mut g, &p, &[5, 2]).unwrap();
        assert_eq!(g.value(a)[..32], g.value(b)[32..]);
        assert_eq!(g.value(a)[32..], g.value(b)[..32]);
    }

    #[test]
    fn unknown_token_and_bad_length() {
        let cfg = ModelConfig::default();
        let (store, _, txt) = build(&cfg);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        assert!(matches!(txt.encode(&mut g, &p, &[99]), Err(Error::Vocabulary { .. })));
        assert!(txt.encode(&mut g, &p, &[]).is_err());
        assert!(txt.encode(&mut g, &p, &[1, 1, 1, 1, 1]).is_err());
    }

    fn gradcheck_all(store: &ParamStore, build: impl FnMut(&mut Graph, &Bound) -> Result<Var>) -> f64 {
        let mut rng = Rng::new(99);
        let ids: Vec<_> = store.ids().collect();
        let probes = crate::gradcheck::sample_probes(store, &ids, 6, &mut rng);
        let r = crate::gradcheck::check_params(store, &probes, 1e-5, 1e-8, build).unwrap();
        r.max_rel_err
    }

    fn weighted(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
        let mut rng = Rng::new(seed);
        let shape = g.shape(x).to_vec();
        let w = g.constant(&Tensor::from_fn(&shape, |_| rng.uniform_range(-1.0, 1.0)));
        let y = g.mul(x, w)?;
        Ok(g.sum(y))
    }

    #[test]
    fn image_encoder_gradcheck() {
        let cfg = ModelConfig { image_size: 32, ..ModelConfig::default() };
        let (store, enc, _) = build(&cfg);
        let mut rng = Rng::new(5);
        let img = Tensor::from_fn(&[32, 32, 3], |_| rng.uniform());
        let err = gradcheck_all(&store, |g, p| {
            let x = g.constant(&img);
            let pyr = enc.encode(g, p, x)?;
            let mut total = weighted(g, pyr.maps[0], 1)?;
            for (i, &m) in pyr.maps[1..].iter().enumerate() {
                let t = weighted(g, m, 2 + i as u64)?;
                total = g.add(total, t)?;
            }
            Ok(total)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn text_encoder_gradcheck() {
        let cfg = ModelConfig::default();
        let (store, _, txt) = build(&cfg);
        let err = gradcheck_all(&store, |g, p| {
            let f = txt.encode(g, p, &[3, 7, 11])?;
            let a = weighted(g, f.words, 1)?;
            let b = weighted(g, f.sentence, 2)?;
            g.add(a, b)
        });
        assert!(err < 1e-4, "{err}");
    }
}
