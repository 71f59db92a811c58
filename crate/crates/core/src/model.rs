//! The full referring-segmentation model: encoders, query tokens, decoder
//! and losses.

use crate::config::{ModelConfig, TokenMode};
use crate::decoder::{Decoder, DecoderState};
use crate::encoders::{FeaturePyramid, ImageEncoder, TextEncoder, TextFeatures};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::Mask;
use crate::nn::{Init, Linear};
use crate::objectives::{contrastive_from_sims, segmentation_loss, similarities, total_loss, LossReport};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum TokenSource {
    /// Learnable `N x C^t` token matrix.
    Learned(ParamId),
    /// A single token projected from the sentence embedding.
    Sentence(Linear),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub tokens: TokenSource,
    /// Projects the sentence embedding into token space for the
    /// contrastive similarity.
    pub sentence_proj: Linear,
    pub decoder: Decoder,
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub text: TextFeatures,
    pub pyramid: FeaturePyramid,
    pub state: DecoderState,
    /// `1 x N` similarities of final tokens to the sentence, when `N >= 2`.
    pub sims: Option<Var>,
}

impl Forward {
    /// Index of the token most similar to the sentence (0 when only one
    /// token exists).
    pub fn chosen_token(&self, g: &Graph) -> usize {
        match self.sims {
            Some(s) => {
                let v = g.value(s);
                (1..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
            }
            None => 0,
        }
    }
}

impl Model {
    /// Builds the model and registers its parameters in `store`.
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(store, rng);
        let image = ImageEncoder::new(&mut init, cfg)?;
        let text = TextEncoder::new(&mut init, cfg)?;
        let tokens = match cfg.tokens {
            TokenMode::Off => TokenSource::Sentence(Linear::new(&mut init, "token_proj", cfg.c_l, cfg.c_t, true, 1.0)?),
            _ => {
                let n = cfg.effective_tokens();
                let t = Tensor::from_fn(&[n, cfg.c_t], |_| init.rng.uniform_range(-1.0, 1.0));
                TokenSource::Learned(init.tensor("tokens", t, false)?)
            }
        };
        let sentence_proj = Linear::new(&mut init, "sentence_proj", cfg.c_l, cfg.c_t, true, 1.0)?;
        let decoder = Decoder::new(&mut init, cfg)?;
        Ok(Model { cfg: cfg.clone(), image, text, tokens, sentence_proj, decoder })
    }

    /// Builds a fresh parameter store and model from a seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(seed, "init");
        let model = Model::new(cfg, &mut store, &mut rng)?;
        Ok((model, store))
    }

    /// `rng` supplies Gumbel noise; `None` runs in evaluation mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        image: &Tensor,
        expression: &[usize],
        rng: Option<&mut Rng>,
    ) -> Result<Forward> {
        let s = self.cfg.image_size;
        if image.shape() != [s, s, 3] {
            return Err(Error::dim("model input", image.shape(), &[s, s, 3]));
        }
        let img = g.constant(image);
        let pyramid = self.image.encode(g, p, img)?;
        let text = self.text.encode(g, p, expression)?;
        let t_init = match &self.tokens {
            TokenSource::Learned(id) => p.get(*id),
            TokenSource::Sentence(proj) => proj.forward(g, p, text.sentence)?,
        };
        let state = self.decoder.forward(g, p, &pyramid, text.words, t_init, rng)?;
        let sims = if self.cfg.effective_tokens() >= 2 {
            let e = self.sentence_proj.forward(g, p, text.sentence)?;
            let t4 = *state.t.last().expect("decoder yields four token sets");
            Some(similarities(g, t4, e, self.cfg.tau_cl)?)
        } else {
            None
        };
        Ok(Forward { text, pyramid, state, sims })
    }

    pub fn loss(&self, g: &mut Graph, fwd: &Forward, gt: &Mask) -> Result<(Var, LossReport)> {
        let l_cl = match fwd.sims {
            Some(s) => Some(contrastive_from_sims(g, s, self.cfg.loss)?),
            None => None,
        };
        let seg = segmentation_loss(g, &fwd.state, gt)?;
        total_loss(g, l_cl, &seg)
    }

    /// Parameter groups used by the gradient check: one per top-level
    /// component.
    pub fn param_groups(store: &ParamStore) -> Vec<(String, Vec<ParamId>)> {
        let mut groups: Vec<(String, Vec<ParamId>)> = Vec::new();
        for (id, name, _) in store.iter() {
            let mut parts = name.split('.');
            let head = parts.next().unwrap_or(name);
            let key = if head == "dec" { format!("dec.{}", parts.next().unwrap_or("")) } else { head.to_string() };
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, ids)) => ids.push(id),
                None => groups.push((key, vec![id])),
            }
        }
        groups
    }
}
