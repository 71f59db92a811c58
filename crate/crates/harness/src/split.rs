//! Train/val/test pools and the seen/unseen category split.

use std::fmt;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::data::{generate_dataset, Sample, Shape};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub seen: Vec<Shape>,
    pub unseen: Vec<Shape>,
    pub train: Vec<usize>,
    pub val_seen: Vec<usize>,
    pub val_unseen: Vec<usize>,
    pub test_seen: Vec<usize>,
    pub test_unseen: Vec<usize>,
}

/// Samples `0..n_train` form the train pool, the next `n_val` the val pool
/// and the rest the test pool. Train keeps only seen-category referents;
/// val and test are partitioned by referent category.
pub fn make_generalization_split(
    categories: &[Shape],
    n_train: usize,
    n_val: usize,
    unseen: &[Shape],
) -> Result<SplitSpec> {
    let seen: Vec<Shape> = Shape::ALL.iter().copied().filter(|s| !unseen.contains(s)).collect();
    if seen.is_empty() {
        return Err(Error::Config("unseen categories cover every shape".into()));
    }
    if n_train + n_val > categories.len() {
        return Err(Error::Config(format!(
            "{} samples cannot hold {n_train} train and {n_val} val",
            categories.len()
        )));
    }
    let is_unseen = |i: &usize| unseen.contains(&categories[*i]);
    let part = |r: std::ops::Range<usize>| -> (Vec<usize>, Vec<usize>) { r.partition(|i| !is_unseen(i)) };
    let (train, _) = part(0..n_train);
    let (val_seen, val_unseen) = part(n_train..n_train + n_val);
    let (test_seen, test_unseen) = part(n_train + n_val..categories.len());
    let mut unseen = unseen.to_vec();
    unseen.sort();
    unseen.dedup();
    Ok(SplitSpec { seen, unseen, train, val_seen, val_unseen, test_seen, test_unseen })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    ValSeen,
    ValUnseen,
    Test,
    TestSeen,
    TestUnseen,
}

impl SplitName {
    pub const ALL: [SplitName; 7] = [
        SplitName::Train,
        SplitName::Val,
        SplitName::ValSeen,
        SplitName::ValUnseen,
        SplitName::Test,
        SplitName::TestSeen,
        SplitName::TestUnseen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::ValSeen => "val-seen",
            SplitName::ValUnseen => "val-unseen",
            SplitName::Test => "test",
            SplitName::TestSeen => "test-seen",
            SplitName::TestUnseen => "test-unseen",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

impl SplitSpec {
    pub fn indices(&self, name: SplitName) -> Vec<usize> {
        let cat = |a: &[usize], b: &[usize]| {
            let mut v = [a, b].concat();
            v.sort_unstable();
            v
        };
        match name {
            SplitName::Train => self.train.clone(),
            SplitName::Val => cat(&self.val_seen, &self.val_unseen),
            SplitName::ValSeen => self.val_seen.clone(),
            SplitName::ValUnseen => self.val_unseen.clone(),
            SplitName::Test => cat(&self.test_seen, &self.test_unseen),
            SplitName::TestSeen => self.test_seen.clone(),
            SplitName::TestUnseen => self.test_unseen.clone(),
        }
    }
}

/// All samples of a run plus their split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: SplitSpec,
}

impl Dataset {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let d = &cfg.data;
        let n = d.n_train + d.n_val + d.n_test;
        let samples = generate_dataset(cfg.train.seed, n, Shape::ALL, cfg.model.image_size)?;
        let categories: Vec<Shape> = samples.iter().map(|s| s.category).collect();
        let split = make_generalization_split(&categories, d.n_train, d.n_val, &d.unseen)?;
        if split.train.is_empty() || split.val_seen.is_empty() {
            return Err(Error::Config("split left train or val-seen empty".into()));
        }
        Ok(Dataset { samples, split })
    }

    pub fn subset(&self, name: SplitName) -> Vec<&Sample> {
        self.split.indices(name).into_iter().map(|i| &self.samples[i]).collect()
    }
}
