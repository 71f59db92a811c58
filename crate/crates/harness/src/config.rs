//! Flat `key = value` run configuration.
//!
//! Lines are `namespace.key = value`; blank lines and `#` comments are
//! ignored. Unknown keys and repeated keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use cgf_core::config::ModelConfig;
use cgf_core::AdamW;

use crate::data::Shape;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Mirror and recolor training scenes on the fly.
    pub augment: bool,
    /// Cosine decay of the learning rate to zero over all steps.
    pub cosine: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            augment: true,
            cosine: true,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamW {
        AdamW { lr: self.lr, betas: (self.beta1, self.beta2), eps: self.eps, weight_decay: self.weight_decay }
    }

    /// Learning rate for 0-based `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if self.cosine && total > 0 {
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Referent categories withheld from training.
    pub unseen: Vec<Shape>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_train: 500, n_val: 100, n_test: 100, unseen: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Binarisation threshold for predicted masks.
    pub threshold: f64,
    /// Seeds averaged by the ablation ladder.
    pub ablation_seeds: Vec<u64>,
    /// Epochs per ablation run; `None` uses `train.epochs`.
    pub ablation_epochs: Option<usize>,
}

impl Default for RunConfig {
    /// Desk defaults; the visual stem is twice the library default width.
    fn default() -> Self {
        RunConfig {
            model: ModelConfig { c_v: 128, ..ModelConfig::default() },
            train: TrainConfig::default(),
            data: DataConfig::default(),
            threshold: 0.5,
            ablation_seeds: vec![0, 1, 2],
            ablation_epochs: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model.image_size" => m.image_size = parse(key, value)?,
            "model.n_tokens" => m.n_tokens = parse(key, value)?,
            "model.c_t" => m.c_t = parse(key, value)?,
            "model.c_l" => m.c_l = parse(key, value)?,
            "model.c_v" => m.c_v = parse(key, value)?,
            "model.vocab_size" => m.vocab_size = parse(key, value)?,
            "model.max_len" => m.max_len = parse(key, value)?,
            "model.tokens" => m.tokens = parse(key, value)?,
            "group.assign" => m.assign = parse(key, value)?,
            "group.affinity" => m.affinity = parse(key, value)?,
            "group.pool" => m.pool = parse(key, value)?,
            "tau.mode" => m.tau = parse(key, value)?,
            "decoder.mode" => m.decoder = parse(key, value)?,
            "loss.mode" => m.loss = parse(key, value)?,
            "loss.tau_cl" => m.tau_cl = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.eps" => t.eps = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.augment" => t.augment = parse(key, value)?,
            "train.cosine" => t.cosine = parse(key, value)?,
            "data.n_train" => self.data.n_train = parse(key, value)?,
            "data.n_val" => self.data.n_val = parse(key, value)?,
            "data.n_test" => self.data.n_test = parse(key, value)?,
            "data.unseen" => self.data.unseen = parse_list(key, value)?,
            "eval.threshold" => self.threshold = parse(key, value)?,
            "ablation.seeds" => self.ablation_seeds = parse_list(key, value)?,
            "ablation.epochs" => {
                self.ablation_epochs = if value.is_empty() { None } else { Some(parse(key, value)?) }
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        vec![
            ("model.image_size", m.image_size.to_string()),
            ("model.n_tokens", m.n_tokens.to_string()),
            ("model.c_t", m.c_t.to_string()),
            ("model.c_l", m.c_l.to_string()),
            ("model.c_v", m.c_v.to_string()),
            ("model.vocab_size", m.vocab_size.to_string()),
            ("model.max_len", m.max_len.to_string()),
            ("model.tokens", m.tokens.to_string()),
            ("group.assign", m.assign.to_string()),
            ("group.affinity", m.affinity.to_string()),
            ("group.pool", m.pool.to_string()),
            ("tau.mode", m.tau.to_string()),
            ("decoder.mode", m.decoder.to_string()),
            ("loss.mode", m.loss.to_string()),
            ("loss.tau_cl", m.tau_cl.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.augment", t.augment.to_string()),
            ("train.cosine", t.cosine.to_string()),
            ("data.n_train", self.data.n_train.to_string()),
            ("data.n_val", self.data.n_val.to_string()),
            ("data.n_test", self.data.n_test.to_string()),
            ("data.unseen", join(&self.data.unseen)),
            ("eval.threshold", self.threshold.to_string()),
            ("ablation.seeds", join(&self.ablation_seeds)),
            ("ablation.epochs", self.ablation_epochs.map_or(String::new(), |e| e.to_string())),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        let t = &self.train;
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return bad("optimizer hyperparameters out of range".into());
        }
        if t.weight_decay < 0.0 || t.batch_size == 0 {
            return bad("weight decay must be non-negative and batch size positive".into());
        }
        if self.data.n_train == 0 || self.data.n_val == 0 || self.data.n_test == 0 {
            return bad("every split needs at least one sample".into());
        }
        if self.model.vocab_size < crate::data::VOCAB.len() {
            return bad(format!(
                "vocab_size {} smaller than the {} scene words",
                self.model.vocab_size,
                crate::data::VOCAB.len()
            ));
        }
        if self.model.max_len < crate::data::EXPRESSION_LEN {
            return bad(format!("max_len {} shorter than expressions", self.model.max_len));
        }
        if self.model.image_size % 16 != 0 {
            return bad("image size must be a multiple of the 16-cell scene grid".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if self.ablation_seeds.is_empty() {
            return bad("ablation needs at least one seed".into());
        }
        Ok(())
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::ConfigLine { line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(err(format!("duplicate key {k:?}")));
            }
            cfg.set(k, v).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
