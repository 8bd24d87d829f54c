//! Detection and attack metrics.

use crate::attacks::AttackResult;
use crate::error::{Error, Result};

fn check_sides(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid(format!(
            "metric needs scores on both sides ({} positive, {} negative)",
            pos.len(),
            neg.len()
        )));
    }
    if pos.iter().chain(neg).any(|s| s.is_nan()) {
        return Err(Error::invalid("metric scores contain NaN"));
    }
    Ok(())
}

/// Mann–Whitney AUC: the probability that a positive outscores a negative,
/// ties counting one half. Higher scores mean "more adversarial".
///
/// Pairs are counted exactly with integers after sorting, so the result
/// equals brute-force pair counting bit for bit.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_sides(pos, neg)?;
    let mut neg_sorted = neg.to_vec();
    neg_sorted.sort_by(f64::total_cmp);
    // twice the Mann-Whitney U: 2 per win, 1 per tie
    let mut doubled: u128 = 0;
    for &p in pos {
        let below = neg_sorted.partition_point(|&n| n < p);
        let not_above = neg_sorted.partition_point(|&n| n <= p);
        doubled += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(doubled as f64 / (2.0 * pos.len() as f64 * neg.len() as f64))
}

/// True-positive rate at the smallest threshold `t` (drawn from the observed
/// scores plus `+inf`) such that at least a `tnr` fraction of negatives
/// score strictly below `t`. Positives with score `>= t` count as detected.
pub fn tpr_at_tnr(pos: &[f64], neg: &[f64], tnr: f64) -> Result<f64> {
    check_sides(pos, neg)?;
    if !(0.0..=1.0).contains(&tnr) {
        return Err(Error::invalid(format!("tnr must lie in [0,1], got {tnr}")));
    }
    let mut neg_sorted = neg.to_vec();
    neg_sorted.sort_by(f64::total_cmp);
    let mut candidates: Vec<f64> = pos.iter().chain(neg).copied().collect();
    candidates.push(f64::INFINITY);
    candidates.sort_by(f64::total_cmp);
    let n = neg.len() as f64;
    let threshold = candidates
        .into_iter()
        .find(|&t| neg_sorted.partition_point(|&v| v < t) as f64 >= tnr * n)
        .unwrap_or(f64::INFINITY);
    Ok(pos.iter().filter(|&&p| p >= threshold).count() as f64 / pos.len() as f64)
}

/// Fraction of attacks whose prediction reached the target class.
pub fn adv_acc(results: &[AttackResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::invalid("adversarial accuracy of an empty result set"));
    }
    Ok(results.iter().filter(|r| r.success).count() as f64 / results.len() as f64)
}
