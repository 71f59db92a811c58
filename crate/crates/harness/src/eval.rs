//! Evaluation: predicted masks, metrics and referent identification.

use std::path::Path;

use cgf_core::metrics::{compute_metrics, Mask, MetricReport};
use cgf_core::model::Model;
use cgf_core::{Checkpoint, Graph, ParamStore};

use crate::config::RunConfig;
use crate::data::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Fraction of samples whose most sentence-similar final token is the
    /// referent token.
    pub referent_accuracy: f64,
    pub preds: Vec<Mask>,
    /// Final-stage owning token per prediction-grid cell, when grouping ran.
    pub owners: Vec<Option<Vec<usize>>>,
}

/// Runs the model in evaluation mode (no Gumbel noise) over `samples`.
pub fn evaluate(model: &Model, store: &ParamStore, samples: &[&Sample], threshold: f64) -> Result<Evaluation> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut owners = Vec::with_capacity(samples.len());
    let mut correct = 0usize;
    for s in samples {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let fwd = model.forward(&mut g, &p, &s.image, &s.expression, None)?;
        preds.push(fwd.state.predict_mask(&g, s.mask.height, s.mask.width, threshold)?);
        owners.push(fwd.state.assignments.last().and_then(|a| a.as_ref()).map(|a| a.owners()));
        correct += usize::from(fwd.chosen_token(&g) == 0);
    }
    let gts: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
    let report = compute_metrics(&preds, &gts)?;
    Ok(Evaluation { report, referent_accuracy: correct as f64 / samples.len() as f64, preds, owners })
}

/// Checkpoint metadata holding the full run configuration.
pub fn config_meta(cfg: &RunConfig) -> Vec<(String, String)> {
    cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn config_from_meta(ckpt: &Checkpoint) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in &ckpt.meta {
        if k.contains('.') {
            cfg.set(k, v).map_err(|m| Error::Core(cgf_core::Error::Checkpoint(m)))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Rebuilds the configuration, model and parameters stored in a
/// checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, Model, ParamStore)> {
    let ckpt = Checkpoint::load(path)?;
    restore(&ckpt)
}

pub fn restore(ckpt: &Checkpoint) -> Result<(RunConfig, Model, ParamStore)> {
    let cfg = config_from_meta(ckpt)?;
    let (model, mut store) = Model::init(&cfg.model, cfg.train.seed)?;
    ckpt.restore_into(&mut store)?;
    Ok((cfg, model, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, Shape};

    #[test]
    fn untrained_model_reports_bounded_metrics() {
        let cfg = RunConfig::default();
        let (model, store) = Model::init(&cfg.model, 0).unwrap();
        let data = generate_dataset(0, 50, Shape::ALL, 64).unwrap();
        let refs: Vec<&Sample> = data.iter().collect();
        let ev = evaluate(&model, &store, &refs, 0.5).unwrap();
        assert_eq!(ev.report.n(), 50);
        for v in [ev.report.miou, ev.report.oiou, ev.referent_accuracy] {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn oracle_masks_score_perfectly() {
        let data = generate_dataset(1, 10, Shape::ALL, 64).unwrap();
        let masks: Vec<Mask> = data.iter().map(|s| s.mask.clone()).collect();
        let r = compute_metrics(&masks, &masks).unwrap();
        assert_eq!((r.miou, r.oiou, r.precision), (1.0, 1.0, [1.0; 3]));
    }

    #[test]
    fn checkpoint_restores_config_and_params() {
        let mut cfg = RunConfig::default();
        cfg.model.decoder = cgf_core::config::DecoderMode::Parallel;
        let (_, store) = Model::init(&cfg.model, 0).unwrap();
        let ckpt = Checkpoint::from_store(&store, config_meta(&cfg));
        let (back, _, restored) = restore(&Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, cfg);
        for ((_, _, a), (_, _, b)) in store.iter().zip(restored.iter()) {
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn mismatched_checkpoint_is_rejected() {
        let cfg = RunConfig::default();
        let (_, store) = Model::init(&cfg.model, 0).unwrap();
        let mut meta = config_meta(&cfg);
        meta.iter_mut().find(|(k, _)| k == "model.c_t").unwrap().1 = "16".into();
        let ckpt = Checkpoint::from_store(&store, meta);
        assert!(matches!(restore(&ckpt), Err(Error::Core(cgf_core::Error::Checkpoint(_)))));
    }
}
