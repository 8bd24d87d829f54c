//! Train / AdvTrain / AdvTest partitioning.
//!
//! Each share is `floor(fraction * n)` samples, allocated across classes by
//! flooring the per-class quota and handing the leftover slots to the
//! classes with the largest fractional remainders (lowest class first on
//! ties). The remaining samples form the complementary subset.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::rng::{stream_rng, STREAM_SPLIT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub advtrain_fraction_of_test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_fraction: 0.8, advtrain_fraction_of_test: 0.7, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub train_per_class: Vec<usize>,
    pub adv_train_per_class: Vec<usize>,
    pub adv_test_per_class: Vec<usize>,
    /// Test-pool samples dropped because the classifier got them wrong.
    pub discarded: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub train: LabeledSet,
    pub adv_train: LabeledSet,
    pub adv_test: LabeledSet,
    /// Indices into the source set.
    pub train_indices: Vec<usize>,
    pub adv_train_indices: Vec<usize>,
    pub adv_test_indices: Vec<usize>,
    pub report: SplitReport,
}

fn floor_share(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// Per-class quotas summing to `floor(fraction * total)`.
fn allocate(counts: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let target = floor_share(fraction, total);
    let mut quota: Vec<usize> = counts.iter().map(|&c| floor_share(fraction, c)).collect();
    let mut remainders: Vec<(f64, usize)> =
        counts.iter().enumerate().map(|(k, &c)| (fraction * c as f64 - quota[k] as f64, k)).collect();
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut missing = target.saturating_sub(quota.iter().sum());
    for &(_, k) in remainders.iter().cycle().take(counts.len() * 2) {
        if missing == 0 {
            break;
        }
        if quota[k] < counts[k] {
            quota[k] += 1;
            missing -= 1;
        }
    }
    quota
}

/// Stratified two-way split of `indices` (grouped by `labels`).
fn stratified(
    indices: &[usize],
    labels: &[usize],
    classes: usize,
    fraction: f64,
    seed: u64,
    stage: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &i in indices {
        by_class[labels[i]].push(i);
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let quota = allocate(&counts, fraction);
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for (k, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut stream_rng(seed, STREAM_SPLIT, stage * 1_000_003 + k as u64));
        first.extend_from_slice(&members[..quota[k]]);
        second.extend_from_slice(&members[quota[k]..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    (first, second)
}

/// Splits `set` into Train (stratified `train_fraction`), then drops test-pool
/// samples misclassified by `net` (when given) and splits the rest into
/// AdvTrain / AdvTest.
pub fn split(set: &LabeledSet, spec: &SplitSpec, net: Option<&Network>) -> Result<SplitOutcome> {
    if set.is_empty() {
        return Err(Error::invalid("cannot split an empty set"));
    }
    for (name, f) in
        [("train_fraction", spec.train_fraction), ("advtrain_fraction_of_test", spec.advtrain_fraction_of_test)]
    {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::invalid(format!("{name} must lie in (0,1), got {f}")));
        }
    }
    let k = set.num_classes;
    let all: Vec<usize> = (0..set.len()).collect();
    let (train_idx, pool) = stratified(&all, &set.labels, k, spec.train_fraction, spec.seed, 0);
    let mut report = SplitReport::default();
    let kept: Vec<usize> = match net {
        Some(net) => {
            let mut kept = Vec::with_capacity(pool.len());
            for &i in &pool {
                if net.predict(&set.images[i])? == set.labels[i] {
                    kept.push(i);
                }
            }
            kept
        }
        None => pool.clone(),
    };
    report.discarded = pool.len() - kept.len();
    let (adv_train_idx, adv_test_idx) = stratified(&kept, &set.labels, k, spec.advtrain_fraction_of_test, spec.seed, 1);
    let train = set.subset(&train_idx);
    let adv_train = set.subset(&adv_train_idx);
    let adv_test = set.subset(&adv_test_idx);
    report.train_per_class = train.class_counts();
    report.adv_train_per_class = adv_train.class_counts();
    report.adv_test_per_class = adv_test.class_counts();
    let pool_counts = set.subset(&pool).class_counts();
    let kept_counts = set.subset(&kept).class_counts();
    for c in 0..k {
        if pool_counts[c] > 0 && kept_counts[c] == 0 {
            report.warnings.push(format!("class {c} emptied by discarding misclassified samples"));
        }
    }
    Ok(SplitOutcome {
        train,
        adv_train,
        adv_test,
        train_indices: train_idx,
        adv_train_indices: adv_train_idx,
        adv_test_indices: adv_test_idx,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_hits_floor_total() {
        assert_eq!(allocate(&[50, 50], 0.8), vec![40, 40]);
        assert_eq!(allocate(&[10, 10], 0.7), vec![7, 7]);
        // 16 survivors split 9/7: floor(0.7*16) = 11
        let q = allocate(&[9, 7], 0.7);
        assert_eq!(q.iter().sum::<usize>(), 11);
        assert_eq!(allocate(&[3, 3, 3], 0.5).iter().sum::<usize>(), 4);
    }

    #[test]
    fn floor_share_is_robust_to_rounding() {
        assert_eq!(floor_share(0.7, 20), 14);
        assert_eq!(floor_share(0.7, 16), 11);
        assert_eq!(floor_share(0.8, 100), 80);
    }
}
