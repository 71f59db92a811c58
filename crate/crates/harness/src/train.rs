//! Mini-batch AdamW training with best-checkpoint selection on val-seen.

use std::fmt;
use std::fs;
use std::path::Path;

use cgf_core::metrics::compute_metrics;
use cgf_core::model::Model;
use cgf_core::{Checkpoint, Graph, ParamStore, Rng};

use crate::config::RunConfig;
use crate::data::augment;
use crate::error::{Error, Result};
use crate::eval::{config_meta, evaluate};
use crate::split::{Dataset, SplitName};

pub const LOG_HEADER: &str = "epoch\tl_cl\tl_seg\ttrain_miou\tval_miou";

/// Per-epoch means over the training set plus the val-seen mIoU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_cl: f64,
    pub l_seg: f64,
    pub train_miou: f64,
    pub val_miou: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.l_cl, self.l_seg, self.train_miou, self.val_miou
        )
    }
}

pub fn log_text(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        s.push_str(&format!("{e}\n"));
    }
    s
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_miou: f64,
    pub checkpoint: Checkpoint,
    pub model: Model,
    /// Parameters of the best epoch.
    pub store: ParamStore,
}

pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, data, |_| {})
}

/// Trains from the `train.seed` initialisation, calling `on_epoch` after
/// each epoch.
pub fn train_with(cfg: &RunConfig, data: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seed = cfg.train.seed;
    let (model, mut store) = Model::init(&cfg.model, seed)?;
    let mut opt = cfg.train.optimizer();
    let mut shuffle = Rng::stream(seed, "shuffle");
    let mut gumbel = Rng::stream(seed, "gumbel");
    let mut aug = Rng::stream(seed, "augment");
    let train_set = data.subset(SplitName::Train);
    let val_set = data.subset(SplitName::ValSeen);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let steps_per_epoch = order.len().div_ceil(cfg.train.batch_size);
    let total_steps = steps_per_epoch * cfg.train.epochs;
    let mut step = 0;

    let mut log = Vec::with_capacity(cfg.train.epochs);
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    for epoch in 1..=cfg.train.epochs {
        shuffle.shuffle(&mut order);
        let (mut sum_cl, mut sum_seg) = (0.0, 0.0);
        let mut preds = Vec::with_capacity(order.len());
        let mut gts = Vec::with_capacity(order.len());
        for batch in order.chunks(cfg.train.batch_size) {
            store.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let augmented;
                let s = if cfg.train.augment {
                    augmented = augment(train_set[i], &mut aug);
                    &augmented
                } else {
                    train_set[i]
                };
                let mut g = Graph::new();
                let p = store.bind(&mut g);
                let fwd = model.forward(&mut g, &p, &s.image, &s.expression, Some(&mut gumbel))?;
                let (loss, report) = model.loss(&mut g, &fwd, &s.mask)?;
                if let Some(term) = report.non_finite_term() {
                    return Err(Error::NonFinite { epoch, term });
                }
                sum_cl += report.l_cl;
                sum_seg += report.seg_sum();
                preds.push(fwd.state.predict_mask(&g, s.mask.height, s.mask.width, cfg.threshold)?);
                gts.push(s.mask.clone());
                g.backward(loss)?;
                store.accumulate_grads(&g, &p, scale);
            }
            opt.lr = cfg.train.lr_at(step, total_steps);
            store.adamw_step(&opt)?;
            step += 1;
        }
        store.zero_grads();
        let n = order.len() as f64;
        let train_miou = compute_metrics(&preds, &gts)?.miou;
        let val_miou = evaluate(&model, &store, &val_set, cfg.threshold)?.report.miou;
        let entry = EpochLog { epoch, l_cl: sum_cl / n, l_seg: sum_seg / n, train_miou, val_miou };
        on_epoch(&entry);
        log.push(entry);
        if best.as_ref().map_or(true, |(_, m, _)| val_miou > *m) {
            let mut meta = config_meta(cfg);
            meta.push(("best_epoch".into(), epoch.to_string()));
            best = Some((epoch, val_miou, Checkpoint::from_store(&store, meta)));
        }
    }
    let (best_epoch, best_val_miou, checkpoint) =
        best.ok_or_else(|| Error::Config("training needs at least one epoch".into()))?;
    checkpoint.restore_into(&mut store)?;
    Ok(TrainOutcome { log, best_epoch, best_val_miou, checkpoint, model, store })
}

/// Trains and writes `checkpoint.ckpt`, `train.log`, `config.txt` and
/// `metrics.csv` (val-seen and test splits of the best checkpoint) into
/// `out_dir`.
pub fn train_to_dir(cfg: &RunConfig, out_dir: &Path, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let data = Dataset::build(cfg)?;
    let outcome = train_with(cfg, &data, on_epoch)?;
    let write = |name: &str, text: String| {
        let path = out_dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    outcome.checkpoint.save(&out_dir.join("checkpoint.ckpt"))?;
    write("train.log", log_text(&outcome.log))?;
    write("config.txt", cfg.to_text())?;
    let mut csv = format!("{}\n", cgf_core::metrics::MetricReport::CSV_HEADER);
    for name in [SplitName::ValSeen, SplitName::Test] {
        let set = data.subset(name);
        if !set.is_empty() {
            let ev = evaluate(&outcome.model, &outcome.store, &set, cfg.threshold)?;
            csv.push_str(&format!("{}\n", ev.report.csv_row(name.as_str())));
        }
    }
    write("metrics.csv", csv)?;
    Ok(outcome)
}
