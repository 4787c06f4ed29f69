use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetIndex;
use crate::error::{Error, Result};

fn shuffled(ids: &[String], seed: u64) -> Vec<String> {
    let mut v = ids.to_vec();
    v.sort();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

/// Random train/test split of `ids`: `floor(train_fraction · N)` ids train, the rest
/// test. Both halves come back sorted.
pub fn split_ids(ids: &[String], train_fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidConfig(format!("train_fraction must lie in [0, 1], got {train_fraction}")));
    }
    let v = shuffled(ids, seed);
    let n_train = (train_fraction * v.len() as f64 + 1e-9).floor() as usize;
    let (mut train, mut test) = (v[..n_train].to_vec(), v[n_train..].to_vec());
    train.sort();
    test.sort();
    Ok((train, test))
}

/// [`split_ids`] over every sample of a dataset.
pub fn split_dataset(index: &DatasetIndex, train_fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    split_ids(index.sample_ids(), train_fraction, seed)
}

/// Assignment of every sample id to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    /// Ids held out in `fold`, sorted.
    pub fn fold_ids(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, f)| **f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Ids of every other fold, sorted.
    pub fn train_ids(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, f)| **f != fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for f in self.assignments.values() {
            sizes[*f] += 1;
        }
        sizes
    }
}

fn deal(order: Vec<String>, k: usize) -> FoldPlan {
    let assignments = order.into_iter().enumerate().map(|(i, id)| (id, i % k)).collect();
    FoldPlan { k, assignments }
}

fn check_folds(n: usize, k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::TooFewSamples { n, k });
    }
    Ok(())
}

/// Uniformly random balanced partition: fold sizes differ by at most one, larger
/// folds first.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    check_folds(ids.len(), k)?;
    Ok(deal(shuffled(ids, seed), k))
}

/// Balanced partition that also spreads positives (per `is_positive`) evenly.
pub fn make_stratified_folds(ids: &[String], k: usize, seed: u64, is_positive: impl Fn(&str) -> bool) -> Result<FoldPlan> {
    check_folds(ids.len(), k)?;
    let (pos, neg): (Vec<String>, Vec<String>) = ids.iter().cloned().partition(|id| is_positive(id));
    let mut order = shuffled(&pos, seed);
    order.extend(shuffled(&neg, seed.wrapping_add(1)));
    Ok(deal(order, k))
}

/// Deterministic validation carve: about a tenth of `ids` (at least one when there are
/// two or more), returned as `(train, val)`.
pub fn carve_validation(ids: &[String], seed: u64) -> (Vec<String>, Vec<String>) {
    let n_val = if ids.len() >= 2 { (ids.len() / 10).max(1) } else { 0 };
    let v = shuffled(ids, seed ^ 0x5EED_CAFE);
    let (mut val, mut train) = (v[..n_val].to_vec(), v[n_val..].to_vec());
    train.sort();
    val.sort();
    (train, val)
}
