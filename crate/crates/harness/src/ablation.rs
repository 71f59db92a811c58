//! The ablation ladder: nine variants trained over several seeds.

use std::fs;
use std::path::Path;

use cgf_core::metrics::MetricReport;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::split::{Dataset, SplitName};
use crate::train::{log_text, train};

/// Every key a variant may change. Each variant sets all of them, so the
/// base configuration's own switches never leak into the ladder.
const FLAG_KEYS: [&str; 5] = ["model.tokens", "group.assign", "decoder.mode", "group.affinity", "tau.mode"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    /// Row number in the ladder (8 is intentionally absent).
    pub row: usize,
    pub name: &'static str,
    /// Values for [`FLAG_KEYS`], in order.
    pub flags: [&'static str; 5],
}

pub const FULL: [&str; 5] = ["n", "hard", "consecutive", "cosine", "learnable"];

pub const VARIANTS: [Variant; 9] = [
    Variant { row: 1, name: "baseline", flags: ["off", "hard", "consecutive", "cosine", "learnable"] },
    Variant { row: 2, name: "one-token", flags: ["one", "pool", "single", "cosine", "learnable"] },
    Variant { row: 3, name: "n-tokens", flags: ["n", "pool", "single", "cosine", "learnable"] },
    Variant { row: 4, name: "soft-group", flags: ["n", "soft", "single", "cosine", "learnable"] },
    Variant { row: 5, name: "hard-group", flags: ["n", "hard", "single", "cosine", "learnable"] },
    Variant { row: 6, name: "parallel", flags: ["n", "hard", "parallel", "cosine", "learnable"] },
    Variant { row: 7, name: "full", flags: FULL },
    Variant { row: 9, name: "dot-affinity", flags: ["n", "hard", "consecutive", "dot", "learnable"] },
    Variant { row: 10, name: "fixed-tau", flags: ["n", "hard", "consecutive", "cosine", "fixed:0.1"] },
];

impl Variant {
    pub fn by_name(name: &str) -> Option<Variant> {
        VARIANTS.into_iter().find(|v| v.name == name)
    }

    /// `base` with this variant's switches, training seed and epoch count.
    pub fn config(&self, base: &RunConfig, seed: u64) -> Result<RunConfig> {
        let mut cfg = base.clone();
        for (k, v) in FLAG_KEYS.iter().zip(self.flags) {
            cfg.set(k, v).map_err(Error::Config)?;
        }
        cfg.train.seed = seed;
        if let Some(e) = base.ablation_epochs {
            cfg.train.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const CSV_HEADER: &str = "row,variant,seeds,miou,oiou,p50,p70,p90,referent_accuracy";

/// Seed-averaged val-seen results of one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub variant: Variant,
    pub per_seed: Vec<(u64, MetricReport, f64)>,
    pub miou: f64,
    pub oiou: f64,
    pub precision: [f64; 3],
    pub referent_accuracy: f64,
}

impl VariantResult {
    fn new(variant: Variant, per_seed: Vec<(u64, MetricReport, f64)>) -> Self {
        let n = per_seed.len() as f64;
        let mean = |f: &dyn Fn(&(u64, MetricReport, f64)) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
        let precision = [0, 1, 2].map(|k| mean(&|r| r.1.precision[k]));
        VariantResult {
            variant,
            miou: mean(&|r| r.1.miou),
            oiou: mean(&|r| r.1.oiou),
            precision,
            referent_accuracy: mean(&|r| r.2),
            per_seed,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.variant.row,
            self.variant.name,
            self.per_seed.len(),
            self.miou,
            self.oiou,
            self.precision[0],
            self.precision[1],
            self.precision[2],
            self.referent_accuracy
        )
    }
}

pub fn csv_text(results: &[VariantResult]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in results {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Trains `variant` once per seed and evaluates each best checkpoint on
/// val-seen. With `out_dir`, each run's log and checkpoint go to
/// `<out_dir>/<variant>/seed<k>/`.
pub fn run_variant(base: &RunConfig, variant: Variant, seeds: &[u64], out_dir: Option<&Path>) -> Result<VariantResult> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = variant.config(base, seed)?;
        let data = Dataset::build(&cfg)?;
        let out = train(&cfg, &data)?;
        let ev = evaluate(&out.model, &out.store, &data.subset(SplitName::ValSeen), cfg.threshold)?;
        if let Some(dir) = out_dir {
            let dir = dir.join(variant.name).join(format!("seed{seed}"));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            out.checkpoint.save(&dir.join("checkpoint.ckpt"))?;
            let log = dir.join("train.log");
            fs::write(&log, log_text(&out.log)).map_err(|e| Error::io(&log, e))?;
        }
        per_seed.push((seed, ev.report, ev.referent_accuracy));
    }
    Ok(VariantResult::new(variant, per_seed))
}

/// Runs the whole ladder over `base.ablation_seeds` and writes
/// `ablation.csv` into `out_dir`.
pub fn run_ablation(base: &RunConfig, out_dir: &Path, mut on_variant: impl FnMut(&VariantResult)) -> Result<Vec<VariantResult>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut results = Vec::with_capacity(VARIANTS.len());
    for v in VARIANTS {
        let r = run_variant(base, v, &base.ablation_seeds, Some(out_dir))?;
        on_variant(&r);
        results.push(r);
    }
    let path = out_dir.join("ablation.csv");
    fs::write(&path, csv_text(&results)).map_err(|e| Error::io(&path, e))?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cgf_core::config::{AssignMode, DecoderMode, TauMode, TokenMode};

    #[test]
    fn full_variant_matches_default_switches() {
        let base = RunConfig::default();
        assert_eq!(Variant::by_name("full").unwrap().config(&base, 0).unwrap(), base);
    }

    #[test]
    fn variants_override_base_switches() {
        let mut base = RunConfig::default();
        base.model.decoder = DecoderMode::Parallel;
        base.model.tau = TauMode::Fixed(0.5);
        base.ablation_epochs = Some(4);
        let cfg = Variant::by_name("soft-group").unwrap().config(&base, 2).unwrap();
        assert_eq!(cfg.model.decoder, DecoderMode::Single);
        assert_eq!(cfg.model.assign, AssignMode::Soft);
        assert_eq!(cfg.model.tau, TauMode::Learnable);
        assert_eq!((cfg.train.seed, cfg.train.epochs), (2, 4));
        let cfg = Variant::by_name("baseline").unwrap().config(&base, 0).unwrap();
        assert_eq!(cfg.model.tokens, TokenMode::Off);
    }

    #[test]
    fn every_variant_is_valid_and_distinct() {
        let base = RunConfig::default();
        let cfgs: Vec<_> = VARIANTS.iter().map(|v| v.config(&base, 0).unwrap()).collect();
        for i in 0..cfgs.len() {
            for j in i + 1..cfgs.len() {
                assert_ne!(cfgs[i], cfgs[j], "{} vs {}", VARIANTS[i].name, VARIANTS[j].name);
            }
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let r = MetricReport::from_counts(&[(1, 2), (2, 2)]).unwrap();
        let res: Vec<_> =
            VARIANTS.iter().map(|&v| VariantResult::new(v, vec![(0, r.clone(), 1.0), (1, r.clone(), 0.5)])).collect();
        let text = csv_text(&res);
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[7], "7,full,2,0.750000,0.750000,1.000000,0.500000,0.500000,0.750000");
    }
}
