//! Segmentation metrics: per-sample IoU, mIoU, oIoU and precision at
//! IoU thresholds.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Binary `H x W` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim("mask", &[height, width], &[data.len()]));
        }
        Ok(Mask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![false; height * width] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Nearest-neighbour resampling to `height x width`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        let data = (0..height * width)
            .map(|i| {
                let (y, x) = (i / width, i % width);
                self.get(y * self.height / height, x * self.width / width)
            })
            .collect();
        Mask { height, width, data }
    }

    /// `(|a & b|, |a | b|)`.
    pub fn overlap(&self, other: &Mask) -> Result<(usize, usize)> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dim(
                "mask overlap",
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        let mut inter = 0;
        let mut union = 0;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        Ok((inter, union))
    }
}

/// IoU from intersection and union counts; an empty union counts as a
/// perfect match.
pub fn iou(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub const THRESHOLDS: [f64; 3] = [0.5, 0.7, 0.9];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub ious: Vec<f64>,
    pub miou: f64,
    pub oiou: f64,
    /// Precision at [`THRESHOLDS`].
    pub precision: [f64; 3],
}

impl MetricReport {
    pub fn n(&self) -> usize {
        self.ious.len()
    }

    pub fn from_counts(counts: &[(usize, usize)]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Contract("metrics need at least one sample".into()));
        }
        let ious: Vec<f64> = counts.iter().map(|&(i, u)| iou(i, u)).collect();
        let n = ious.len() as f64;
        let miou = ious.iter().sum::<f64>() / n;
        let (si, su) = counts.iter().fold((0, 0), |(a, b), &(i, u)| (a + i, b + u));
        let oiou = iou(si, su);
        let precision = THRESHOLDS.map(|t| ious.iter().filter(|&&v| v >= t).count() as f64 / n);
        Ok(MetricReport { ious, miou, oiou, precision })
    }

    pub const CSV_HEADER: &'static str = "split,n,miou,oiou,p50,p70,p90";

    pub fn csv_row(&self, split: &str) -> String {
        let mut s = format!("{split},{},{:.6},{:.6}", self.n(), self.miou, self.oiou);
        for p in self.precision {
            let _ = write!(s, ",{p:.6}");
        }
        s
    }
}

pub fn compute_metrics(preds: &[Mask], gts: &[Mask]) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let counts = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| p.overlap(g))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_counts(&counts)
}
