//! Robust aggregation of per-user query losses.
//!
//! The threshold `tau` is the `ceil((1 - rho) n)`-th smallest loss (1-based),
//! or `-inf` when that index is 0. Hard mode keeps users with `L > tau`;
//! soft mode weights every user by `sigmoid((L - tau) / gamma)`. The returned
//! weights are treated as constants by the meta-gradient.

use serde::{Deserialize, Serialize};

use crate::btcore::sigmoid;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateMode {
    Mean,
    Hard,
    Soft,
}

impl std::str::FromStr for AggregateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(AggregateMode::Mean),
            "hard" => Ok(AggregateMode::Hard),
            "soft" => Ok(AggregateMode::Soft),
            other => Err(Error::Unknown {
                kind: "aggregate mode",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpoResult {
    pub tau: f64,
    pub weights: Vec<f64>,
    pub aggregate: f64,
}

impl RpoResult {
    /// Users strictly above the threshold.
    pub fn retained(&self, losses: &[f64]) -> usize {
        losses.iter().filter(|&&l| l > self.tau).count()
    }
}

fn check_losses(losses: &[f64]) -> Result<()> {
    if losses.is_empty() {
        return Err(Error::Empty("loss list"));
    }
    if let Some(bad) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("user loss {bad}")));
    }
    Ok(())
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("rho must lie in (0, 1], got {rho}")))
    }
}

/// Number of users below the cut, `ceil((1 - rho) n)`.
fn cut_index(n: usize, rho: f64) -> usize {
    // absorb rounding in (1 - rho) * n, e.g. (1 - 0.7) * 10 = 3.0000000000000004
    let x = (1.0 - rho) * n as f64;
    ((x - 1e-9).ceil().max(0.0) as usize).min(n)
}

pub fn quantile_threshold(losses: &[f64], rho: f64) -> Result<f64> {
    check_losses(losses)?;
    check_rho(rho)?;
    let m = cut_index(losses.len(), rho);
    if m == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[m - 1])
}

fn weighted(tau: f64, losses: &[f64], weights: Vec<f64>) -> RpoResult {
    let aggregate = weights.iter().zip(losses).map(|(c, l)| c * l).sum();
    RpoResult {
        tau,
        weights,
        aggregate,
    }
}

pub fn hard_aggregate(losses: &[f64], rho: f64) -> Result<RpoResult> {
    let tau = quantile_threshold(losses, rho)?;
    let weights = losses
        .iter()
        .map(|&l| if l > tau { 1.0 } else { 0.0 })
        .collect();
    Ok(weighted(tau, losses, weights))
}

pub fn soft_aggregate(losses: &[f64], rho: f64, gamma: f64) -> Result<RpoResult> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "soft reweighting needs gamma > 0, got {gamma}"
        )));
    }
    let tau = quantile_threshold(losses, rho)?;
    let weights = losses.iter().map(|&l| sigmoid((l - tau) / gamma)).collect();
    Ok(weighted(tau, losses, weights))
}

pub fn mean_aggregate(losses: &[f64]) -> Result<RpoResult> {
    check_losses(losses)?;
    Ok(weighted(f64::NEG_INFINITY, losses, vec![1.0; losses.len()]))
}

/// Dispatch on mode. Soft mode with `gamma == 0` falls back to hard filtering.
pub fn aggregate(mode: AggregateMode, losses: &[f64], rho: f64, gamma: f64) -> Result<RpoResult> {
    match mode {
        AggregateMode::Mean => mean_aggregate(losses),
        AggregateMode::Hard => hard_aggregate(losses, rho),
        AggregateMode::Soft if gamma == 0.0 => hard_aggregate(losses, rho),
        AggregateMode::Soft => soft_aggregate(losses, rho, gamma),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent oracle: count how many values are <= each candidate and
    /// pick the smallest value with at least m values at or below it.
    fn brute_tau(losses: &[f64], m: usize) -> f64 {
        if m == 0 {
            return f64::NEG_INFINITY;
        }
        *losses
            .iter()
            .filter(|&&c| losses.iter().filter(|&&l| l <= c).count() >= m)
            .min_by(|a, b| a.total_cmp(b))
            .unwrap()
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(quantile_threshold(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.0);
        assert_eq!(quantile_threshold(&[4.0, 1.0, 3.0, 2.0], 0.5).unwrap(), 2.0);
        assert_eq!(quantile_threshold(&[1.0, 2.0], 1.0).unwrap(), f64::NEG_INFINITY);
        assert_eq!(quantile_threshold(&[5.0; 6], 0.5).unwrap(), 5.0);
        assert!(quantile_threshold(&[], 0.5).is_err());
        assert!(quantile_threshold(&[1.0], 0.0).is_err());
        assert!(quantile_threshold(&[1.0], 1.5).is_err());
        // 0.3 * 10 must count as exactly 3
        let l: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(quantile_threshold(&l, 0.7).unwrap(), 3.0);
    }

    #[test]
    fn hard_examples() {
        let r = hard_aggregate(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap();
        assert_eq!(r.weights, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(r.aggregate, 7.0);
        let all = hard_aggregate(&[1.0, 2.0, 3.0], 1.0).unwrap();
        assert_eq!(all.weights, vec![1.0; 3]);
        assert_eq!(all.aggregate, 6.0);
        let ties = hard_aggregate(&[5.0; 4], 0.5).unwrap();
        assert_eq!(ties.weights, vec![0.0; 4]);
        assert_eq!(ties.aggregate, 0.0);
    }

    #[test]
    fn soft_examples() {
        let r = soft_aggregate(&[2.0, 3.0], 0.5, 0.5).unwrap();
        assert_eq!(r.tau, 2.0);
        assert_eq!(r.weights[0], 0.5);
        assert!((r.weights[1] - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert!((r.weights[1] * 3.0 - 2.642_391_233_933_647).abs() < 1e-12);

        let losses = [1.0, 2.0, 3.0, 4.0];
        let r = soft_aggregate(&losses, 0.5, 0.5).unwrap();
        let oracle: f64 = losses
            .iter()
            .map(|l| l / (1.0 + (-(l - 2.0) / 0.5f64).exp()))
            .sum();
        assert!((r.aggregate - oracle).abs() < 1e-12);
        assert!((r.aggregate - 7.690).abs() < 5e-4);
        assert!(soft_aggregate(&losses, 0.5, 0.0).is_err());
        assert!(soft_aggregate(&losses, 0.5, -1.0).is_err());
    }

    #[test]
    fn mean_examples() {
        assert_eq!(mean_aggregate(&[1.0, 2.0, 3.0]).unwrap().aggregate, 6.0);
        assert_eq!(mean_aggregate(&[2.5]).unwrap().aggregate, 2.5);
        assert!(mean_aggregate(&[]).is_err());
        assert_eq!(
            mean_aggregate(&[1.0, 7.0]).unwrap(),
            hard_aggregate(&[1.0, 7.0], 1.0).unwrap()
        );
    }

    #[test]
    fn zero_gamma_soft_is_hard() {
        let l = [0.3, 0.9, 0.1, 2.0];
        assert_eq!(
            aggregate(AggregateMode::Soft, &l, 0.5, 0.0).unwrap(),
            hard_aggregate(&l, 0.5).unwrap()
        );
    }

    proptest! {
        #[test]
        fn threshold_matches_brute_force(losses in prop::collection::vec(0.0f64..10.0, 1..40), rho in 0.01f64..=1.0) {
            let m = cut_index(losses.len(), rho);
            prop_assert_eq!(quantile_threshold(&losses, rho).unwrap(), brute_tau(&losses, m));
        }

        #[test]
        fn permutation_invariance(mut losses in prop::collection::vec(0.0f64..10.0, 1..30), rho in 0.05f64..=1.0, gamma in 0.05f64..2.0) {
            let a = soft_aggregate(&losses, rho, gamma).unwrap();
            let h = hard_aggregate(&losses, rho).unwrap();
            losses.reverse();
            let b = soft_aggregate(&losses, rho, gamma).unwrap();
            let hb = hard_aggregate(&losses, rho).unwrap();
            prop_assert!((a.aggregate - b.aggregate).abs() <= 1e-9);
            prop_assert!((h.aggregate - hb.aggregate).abs() <= 1e-9);
            let mut wa = a.weights.clone();
            let mut wb = b.weights.clone();
            wa.sort_by(f64::total_cmp);
            wb.sort_by(f64::total_cmp);
            prop_assert_eq!(wa, wb);
        }

        #[test]
        fn weights_bounded_and_monotone(losses in prop::collection::vec(0.0f64..10.0, 1..30), rho in 0.05f64..=1.0, gamma in 0.01f64..2.0) {
            let s = soft_aggregate(&losses, rho, gamma).unwrap();
            let h = hard_aggregate(&losses, rho).unwrap();
            prop_assert!(s.weights.iter().all(|c| (0.0..=1.0).contains(c)));
            prop_assert!(h.weights.iter().all(|c| *c == 0.0 || *c == 1.0));
            for i in 0..losses.len() {
                for j in 0..losses.len() {
                    if losses[i] <= losses[j] {
                        prop_assert!(s.weights[i] <= s.weights[j]);
                    }
                }
            }
            let recomputed: f64 = s.weights.iter().zip(&losses).map(|(c, l)| c * l).sum();
            prop_assert!((recomputed - s.aggregate).abs() <= 1e-12);
        }

        #[test]
        fn retention_count_for_distinct_losses(n in 1usize..50, rho in 0.01f64..=1.0, seed in 0u64..1000) {
            // distinct losses via a scrambled arithmetic sequence
            let losses: Vec<f64> = (0..n).map(|i| ((i as u64 * 7919 + seed) % 10007) as f64 + i as f64 * 1e-3).collect();
            let h = hard_aggregate(&losses, rho).unwrap();
            let kept = h.weights.iter().filter(|c| **c == 1.0).count();
            prop_assert_eq!(kept, n - cut_index(n, rho));
            prop_assert_eq!(kept, h.retained(&losses));
        }

        #[test]
        fn scaling_covariance(losses in prop::collection::vec(0.1f64..10.0, 1..30), rho in 0.05f64..=1.0, c in 0.1f64..10.0) {
            let scaled: Vec<f64> = losses.iter().map(|l| c * l).collect();
            let t = quantile_threshold(&losses, rho).unwrap();
            let ts = quantile_threshold(&scaled, rho).unwrap();
            if t.is_finite() {
                prop_assert!((ts - c * t).abs() <= 1e-9 * ts.abs().max(1.0));
            } else {
                prop_assert_eq!(ts, f64::NEG_INFINITY);
            }
            prop_assert_eq!(hard_aggregate(&losses, rho).unwrap().weights, hard_aggregate(&scaled, rho).unwrap().weights);
        }
    }
}
