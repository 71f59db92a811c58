//! Model dimensions and mechanism switches.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Where query tokens come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenMode {
    /// `n_tokens` learned tokens; token 0 is the referent.
    Learned,
    /// A single learned token.
    Single,
    /// No tokens: mask kernels come straight from the sentence embedding.
    Off,
}

/// How pixels are distributed over tokens in the group block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssignMode {
    /// Gumbel-softmax with straight-through one-hot assignment.
    Hard,
    /// Gumbel-softmax probabilities used directly.
    Soft,
    /// Plain cross-attention pooling (softmax over pixels per token).
    Pool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Affinity {
    Cosine,
    /// Scaled dot product `T'D'^T / sqrt(C^t)`.
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TauMode {
    /// `tau = softplus(theta)`, initialised at 1.
    Learnable,
    Fixed(f64),
}

/// Normalisation of the grouped feature sum `S_mask * D'`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolNorm {
    /// Divide each token's sum by `1 + (assigned mass)`.
    Mean,
    /// Raw sum.
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderMode {
    /// Token updates chained over stages 2..4 on chained fused maps.
    Consecutive,
    /// Each stage's group layer starts from the initial tokens and an unchained map.
    Parallel,
    /// Only the last stage runs a group layer.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Positive excluded from the denominator.
    AsWritten,
    InfoNce,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} {other:?}", stringify!($ty)
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text,)+ })
            }
        }
    };
}

keyword_enum!(TokenMode { Learned => "n", Single => "one", Off => "off" });
keyword_enum!(AssignMode { Hard => "hard", Soft => "soft", Pool => "pool" });
keyword_enum!(Affinity { Cosine => "cosine", Dot => "dot" });
keyword_enum!(PoolNorm { Mean => "mean", Sum => "sum" });
keyword_enum!(DecoderMode { Consecutive => "consecutive", Parallel => "parallel", Single => "single" });
keyword_enum!(LossMode { AsWritten => "as-written", InfoNce => "infonce" });

impl FromStr for TauMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "learnable" {
            return Ok(TauMode::Learnable);
        }
        let v = s
            .strip_prefix("fixed:")
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::Config(format!("unknown TauMode {s:?}")))?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("fixed tau must be positive, got {v}")));
        }
        Ok(TauMode::Fixed(v))
    }
}

impl fmt::Display for TauMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TauMode::Learnable => f.write_str("learnable"),
            TauMode::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub n_tokens: usize,
    /// Token width `C^t`.
    pub c_t: usize,
    /// Word feature width `C^l`.
    pub c_l: usize,
    /// Channels of the coarsest stage; later stages halve it.
    pub c_v: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub tokens: TokenMode,
    pub assign: AssignMode,
    pub affinity: Affinity,
    pub tau: TauMode,
    pub pool: PoolNorm,
    pub decoder: DecoderMode,
    pub loss: LossMode,
    /// Fixed temperature of the token/sentence similarity.
    pub tau_cl: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            n_tokens: 8,
            c_t: 32,
            c_l: 32,
            c_v: 64,
            vocab_size: 16,
            max_len: 4,
            tokens: TokenMode::Learned,
            assign: AssignMode::Hard,
            affinity: Affinity::Cosine,
            tau: TauMode::Learnable,
            pool: PoolNorm::Mean,
            decoder: DecoderMode::Consecutive,
            loss: LossMode::AsWritten,
            tau_cl: 0.1,
        }
    }
}

impl ModelConfig {
    /// Channel count of pyramid level `i` (0 = coarsest).
    pub fn stage_channels(&self, i: usize) -> usize {
        self.c_v >> i
    }

    /// Number of query tokens actually instantiated.
    pub fn effective_tokens(&self) -> usize {
        match self.tokens {
            TokenMode::Learned => self.n_tokens,
            TokenMode::Single | TokenMode::Off => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad(format!("image size {} must be a positive multiple of 32", self.image_size));
        }
        if self.c_v < 8 || self.c_v % 8 != 0 {
            return bad(format!("c_v {} must be a multiple of 8", self.c_v));
        }
        if self.tokens == TokenMode::Learned && self.n_tokens < 2 {
            return bad(format!("n_tokens {} must be at least 2", self.n_tokens));
        }
        if self.c_t == 0 || self.c_l == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return bad("dimensions must be positive".into());
        }
        if !(self.tau_cl > 0.0) {
            return bad(format!("tau_cl {} must be positive", self.tau_cl));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keywords_round_trip() {
        for s in ["consecutive", "parallel", "single"] {
            assert_eq!(s.parse::<DecoderMode>().unwrap().to_string(), s);
        }
        assert_eq!("fixed:0.1".parse::<TauMode>().unwrap(), TauMode::Fixed(0.1));
        assert_eq!(TauMode::Fixed(0.1).to_string(), "fixed:0.1");
        assert!("fixed:-1".parse::<TauMode>().is_err());
        assert!("infonce ".parse::<LossMode>().is_err());
    }

    #[test]
    fn default_channel_schedule() {
        let c = ModelConfig::default();
        let ch: Vec<_> = (0..4).map(|i| c.stage_channels(i)).collect();
        assert_eq!(ch, [64, 32, 16, 8]);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_sizes() {
        let c = ModelConfig { image_size: 48, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { n_tokens: 1, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }
}
