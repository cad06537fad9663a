//! Binary classification metrics, paired significance tests and the
//! crossover sample size between two learning curves.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::gradcore::sigmoid;

/// Default tolerance δ on the mean-AUC difference that defines comparable
/// performance.
pub const CROSSOVER_DELTA: f64 = 0.01;

/// Discordant-pair count below which McNemar uses the exact binomial test.
pub const MCNEMAR_EXACT_LIMIT: u64 = 25;

/// Real-valued scores (logits) with binary labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPredictions {
    pub scores: Vec<f64>,
    pub labels: Vec<f64>,
    /// Decision threshold on the sigmoid-probability scale.
    pub threshold: f64,
}

impl ScoredPredictions {
    pub fn new(scores: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::dim(format!("{} scores for {} labels", scores.len(), labels.len())));
        }
        if labels.iter().any(|y| *y != 0.0 && *y != 1.0) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::invalid("scores contain NaN"));
        }
        Ok(ScoredPredictions { scores, labels, threshold: 0.5 })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|y| **y == 1.0).count()
    }

    /// Hard decisions `σ(score) ≥ threshold`.
    pub fn decisions(&self) -> Vec<bool> {
        self.scores.iter().map(|s| sigmoid(*s) >= self.threshold).collect()
    }

    /// Per-sample correctness of the hard decisions.
    pub fn correct(&self) -> Vec<bool> {
        self.decisions().iter().zip(&self.labels).map(|(d, y)| *d == (*y == 1.0)).collect()
    }

    fn check_both_classes(&self) -> Result<(usize, usize)> {
        let pos = self.positives();
        let neg = self.labels.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::invalid(format!("AUC needs both classes, got {pos} positive and {neg} negative")));
        }
        Ok((pos, neg))
    }
}

/// Mann–Whitney AUC via mid-ranks; ties between classes count one half.
pub fn auc(preds: &ScoredPredictions) -> Result<f64> {
    let (pos, neg) = preds.check_both_classes()?;
    let mut order: Vec<usize> = (0..preds.scores.len()).collect();
    order.sort_by(|&a, &b| preds.scores[a].total_cmp(&preds.scores[b]));
    // twice the rank sum keeps mid-ranks integral
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && preds.scores[order[j + 1]] == preds.scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u64;
        twice_rank_sum += twice_mid * order[i..=j].iter().filter(|&&k| preds.labels[k] == 1.0).count() as u64;
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Paired DeLong comparison of two AUCs on the same samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DeLongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    /// Estimated variance of `auc_a − auc_b`.
    pub variance: f64,
    pub z: f64,
    pub p: f64,
    /// Zero variance with unequal AUCs; `z` is ±∞ and `p` is 0.
    pub degenerate: bool,
}

fn placements(preds: &ScoredPredictions) -> (Vec<f64>, Vec<f64>) {
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..preds.labels.len()).partition(|&i| preds.labels[i] == 1.0);
    let s = &preds.scores;
    let psi = |x: f64, y: f64| {
        if x > y {
            1.0
        } else if x == y {
            0.5
        } else {
            0.0
        }
    };
    let v10 = pos.iter().map(|&i| neg.iter().map(|&j| psi(s[i], s[j])).sum::<f64>() / neg.len() as f64).collect();
    let v01 = neg.iter().map(|&j| pos.iter().map(|&i| psi(s[i], s[j])).sum::<f64>() / pos.len() as f64).collect();
    (v10, v01)
}

/// Unbiased covariance of two equally long samples.
fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len();
    if k < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / k as f64;
    let mb = b.iter().sum::<f64>() / k as f64;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (k - 1) as f64
}

/// Two-sided normal p-value.
pub fn normal_two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

pub fn delong_test(a: &ScoredPredictions, b: &ScoredPredictions) -> Result<DeLongResult> {
    if a.labels != b.labels {
        return Err(Error::invalid("DeLong test needs predictions on identical labels"));
    }
    a.check_both_classes()?;
    let (a10, a01) = placements(a);
    let (b10, b01) = placements(b);
    let auc_a = a10.iter().sum::<f64>() / a10.len() as f64;
    let auc_b = b10.iter().sum::<f64>() / b10.len() as f64;
    let (m, n) = (a10.len() as f64, a01.len() as f64);
    let s10 = covariance(&a10, &a10) + covariance(&b10, &b10) - 2.0 * covariance(&a10, &b10);
    let s01 = covariance(&a01, &a01) + covariance(&b01, &b01) - 2.0 * covariance(&a01, &b01);
    let variance = (s10 / m + s01 / n).max(0.0);
    let diff = auc_a - auc_b;
    let (z, p, degenerate) = if variance > 0.0 {
        let z = diff / variance.sqrt();
        (z, normal_two_sided_p(z), false)
    } else if diff == 0.0 {
        (0.0, 1.0, false)
    } else {
        (diff.signum() * f64::INFINITY, 0.0, true)
    };
    Ok(DeLongResult { auc_a, auc_b, variance, z, p, degenerate })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum McNemarMethod {
    ExactBinomial,
    ChiSquaredCorrected,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McNemarResult {
    /// `a` wrong, `b` right.
    pub b01: u64,
    /// `a` right, `b` wrong.
    pub b10: u64,
    /// Continuity-corrected χ² statistic `(|b01 − b10| − 1)² / (b01 + b10)`,
    /// zero when there are no discordant pairs.
    pub statistic: f64,
    pub p: f64,
    pub method: McNemarMethod,
}

/// Two-sided exact binomial p-value `min(1, 2·P(X ≤ min(b01, b10)))`,
/// `X ~ Bin(b01 + b10, 1/2)`.
pub fn mcnemar_exact_p(b01: u64, b10: u64) -> f64 {
    let total = b01 + b10;
    if total == 0 {
        return 1.0;
    }
    let k = b01.min(b10);
    // accumulate C(total, i)/2^total in log space to stay finite for large totals
    let ln_half = -(total as f64) * std::f64::consts::LN_2;
    let mut ln_c = 0.0;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            ln_c += ((total - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (ln_c + ln_half).exp();
    }
    (2.0 * tail).min(1.0)
}

pub fn mcnemar_statistic(b01: u64, b10: u64) -> f64 {
    let total = b01 + b10;
    if total == 0 {
        return 0.0;
    }
    let d = (b01 as f64 - b10 as f64).abs() - 1.0;
    d.max(0.0).powi(2) / total as f64
}

/// Upper-tail p of the continuity-corrected χ²₁ statistic.
pub fn mcnemar_chi2_p(b01: u64, b10: u64) -> f64 {
    let stat = mcnemar_statistic(b01, b10);
    if stat == 0.0 {
        return 1.0;
    }
    let chi = ChiSquared::new(1.0).expect("one degree of freedom");
    chi.sf(stat)
}

pub fn mcnemar_test(correct_a: &[bool], correct_b: &[bool]) -> Result<McNemarResult> {
    if correct_a.len() != correct_b.len() {
        return Err(Error::dim(format!("{} and {} correctness flags", correct_a.len(), correct_b.len())));
    }
    let b01 = correct_a.iter().zip(correct_b).filter(|(a, b)| !**a && **b).count() as u64;
    let b10 = correct_a.iter().zip(correct_b).filter(|(a, b)| **a && !**b).count() as u64;
    let (p, method) = if b01 + b10 < MCNEMAR_EXACT_LIMIT {
        (mcnemar_exact_p(b01, b10), McNemarMethod::ExactBinomial)
    } else {
        (mcnemar_chi2_p(b01, b10), McNemarMethod::ChiSquaredCorrected)
    };
    Ok(McNemarResult { b01, b10, statistic: mcnemar_statistic(b01, b10), p, method })
}

/// Significance-test record emitted alongside run results.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignificanceReport {
    pub test: String,
    pub statistic: f64,
    pub p: f64,
    pub n: usize,
}

/// Threshold metrics; `None` marks a value whose denominator is empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConfusionMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn confusion_from_decisions(decisions: &[bool], labels: &[f64]) -> Result<ConfusionMetrics> {
    if decisions.len() != labels.len() {
        return Err(Error::dim(format!("{} decisions for {} labels", decisions.len(), labels.len())));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&d, &y) in decisions.iter().zip(labels) {
        match (d, y == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let sensitivity = ratio(tp, tp + fn_);
    let specificity = ratio(tn, tn + fp);
    Ok(ConfusionMetrics {
        tp,
        fp,
        tn,
        fn_,
        accuracy: ratio(tp + tn, decisions.len()),
        balanced_accuracy: sensitivity.zip(specificity).map(|(a, b)| (a + b) / 2.0),
        sensitivity,
        specificity,
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
    })
}

pub fn confusion_metrics(preds: &ScoredPredictions) -> Result<ConfusionMetrics> {
    confusion_from_decisions(&preds.decisions(), &preds.labels)
}

/// Mean and spread of test AUC over seeds, per training-set size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucCurve {
    pub n_grid: Vec<usize>,
    pub mean: Vec<f64>,
    /// Sample standard deviation (zero for a single seed).
    pub std: Vec<f64>,
    pub seeds: usize,
}

impl AucCurve {
    /// `per_n[i]` holds one AUC per seed for `n_grid[i]`.
    pub fn from_runs(n_grid: Vec<usize>, per_n: &[Vec<f64>]) -> Result<Self> {
        if n_grid.len() != per_n.len() || n_grid.is_empty() {
            return Err(Error::dim(format!("{} grid points, {} result sets", n_grid.len(), per_n.len())));
        }
        if n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("N grid must be strictly increasing"));
        }
        let seeds = per_n[0].len();
        if seeds == 0 || per_n.iter().any(|r| r.len() != seeds) {
            return Err(Error::invalid("every grid point needs the same, nonzero number of seeds"));
        }
        let mean: Vec<f64> = per_n.iter().map(|r| r.iter().sum::<f64>() / seeds as f64).collect();
        let std = per_n
            .iter()
            .zip(&mean)
            .map(|(r, m)| {
                if seeds < 2 {
                    0.0
                } else {
                    (r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (seeds - 1) as f64).sqrt()
                }
            })
            .collect();
        Ok(AucCurve { n_grid, mean, std, seeds })
    }
}

/// Smallest `N` at which `spectral − spatial` mean AUC falls below `delta`,
/// interpolating linearly in `log₁₀ N` between grid points. Returns
/// `f64::INFINITY` when the gap never closes on the grid.
pub fn crossover(spectral: &AucCurve, spatial: &AucCurve, delta: f64) -> Result<f64> {
    if spectral.n_grid != spatial.n_grid {
        return Err(Error::invalid("crossover needs curves on the same N grid"));
    }
    let grid = &spectral.n_grid;
    let diff: Vec<f64> = spectral.mean.iter().zip(&spatial.mean).map(|(a, b)| a - b).collect();
    if diff.len() != grid.len() || grid.is_empty() {
        return Err(Error::dim("curve lengths do not match the grid"));
    }
    if diff[0] < delta {
        return Ok(grid[0] as f64);
    }
    for i in 1..grid.len() {
        if diff[i] < delta {
            let t = (diff[i - 1] - delta) / (diff[i - 1] - diff[i]);
            let (l0, l1) = ((grid[i - 1] as f64).log10(), (grid[i] as f64).log10());
            return Ok(10f64.powf(l0 + t * (l1 - l0)));
        }
    }
    Ok(f64::INFINITY)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn preds(scores: &[f64], labels: &[f64]) -> ScoredPredictions {
        ScoredPredictions::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    fn brute_auc(s: &[f64], y: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1.0 && y[j] == 0.0 {
                    pairs += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&preds(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0])).unwrap(), 1.0);
        assert_eq!(auc(&preds(&[0.3; 5], &[0.0, 1.0, 0.0, 1.0, 1.0])).unwrap(), 0.5);
        assert_eq!(auc(&preds(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0])).unwrap(), 0.75);
        assert!(auc(&preds(&[0.1, 0.4], &[1.0, 1.0])).is_err());
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(scores in prop::collection::vec(0u8..6, 2..30), bits in prop::collection::vec(any::<bool>(), 30)) {
            let s: Vec<f64> = scores.iter().map(|v| f64::from(*v) * 0.1).collect();
            let y: Vec<f64> = bits[..s.len()].iter().map(|b| f64::from(u8::from(*b))).collect();
            prop_assume!(y.contains(&0.0) && y.contains(&1.0));
            let p = preds(&s, &y);
            prop_assert_eq!(auc(&p).unwrap(), brute_auc(&s, &y));
            // strictly increasing transform
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(auc(&preds(&t, &y)).unwrap(), auc(&p).unwrap());
        }
    }

    #[test]
    fn delong_identity_and_antisymmetry() {
        let y = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        let a = preds(&[0.9, 0.2, 0.6, 0.7, 0.8, 0.1, 0.3], &y);
        let b = preds(&[0.4, 0.5, 0.9, 0.1, 0.6, 0.3, 0.2], &y);
        let same = delong_test(&a, &a).unwrap();
        assert_eq!((same.z, same.p), (0.0, 1.0));
        let ab = delong_test(&a, &b).unwrap();
        let ba = delong_test(&b, &a).unwrap();
        assert_eq!(ab.z, -ba.z);
        assert_eq!(ab.p, ba.p);
        assert!(ab.p > 0.0 && ab.p <= 1.0);
    }

    #[test]
    fn delong_degenerate_flag() {
        // both perfectly ranked except b misorders every pair identically: zero variance
        let y = [1.0, 1.0, 0.0, 0.0];
        let a = preds(&[0.9, 0.8, 0.1, 0.2], &y);
        let b = preds(&[0.1, 0.2, 0.9, 0.8], &y);
        let r = delong_test(&a, &b).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p, 0.0);
    }

    #[test]
    fn mcnemar_examples() {
        let same = [true, false, true, true];
        let r = mcnemar_test(&same, &same).unwrap();
        assert_eq!((r.statistic, r.p), (0.0, 1.0));
        let a = [false; 5];
        let b = [true; 5];
        let r = mcnemar_test(&a, &b).unwrap();
        assert_eq!((r.b01, r.b10), (5, 0));
        assert!((r.p - 0.0625).abs() < 1e-15);
        let s = mcnemar_test(&b, &a).unwrap();
        assert_eq!((s.b01, s.b10, s.p), (0, 5, r.p));
    }

    #[test]
    fn mcnemar_paths_agree_at_the_switch() {
        for b01 in 0..=25 {
            let b10 = 25 - b01;
            let gap = (mcnemar_exact_p(b01, b10) - mcnemar_chi2_p(b01, b10)).abs();
            assert!(gap < 0.02, "b01 = {b01}: {gap}");
        }
    }

    #[test]
    fn confusion_examples() {
        let m = confusion_from_decisions(&[true, false, true], &[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(
            (m.accuracy, m.balanced_accuracy, m.sensitivity, m.specificity, m.f1),
            (Some(1.0), Some(1.0), Some(1.0), Some(1.0), Some(1.0))
        );
        let m = confusion_from_decisions(&[true; 4], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!((m.sensitivity, m.specificity, m.balanced_accuracy), (Some(1.0), Some(0.0), Some(0.5)));
        // TP=3, FP=1, FN=1, TN=5
        let d = [true, true, true, true, false, false, false, false, false, false];
        let y = [1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let m = confusion_from_decisions(&d, &y).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (3, 1, 1, 5));
        assert_eq!(m.f1, Some(0.75));
        let m = confusion_from_decisions(&[false, true], &[0.0, 0.0]).unwrap();
        assert_eq!((m.sensitivity, m.balanced_accuracy), (None, None));
    }

    #[test]
    fn threshold_is_on_probability_scale() {
        let p = preds(&[-0.1, 0.0, 2.0], &[0.0, 1.0, 1.0]);
        assert_eq!(p.decisions(), vec![false, true, true]);
    }

    fn curve(grid: &[usize], mean: &[f64]) -> AucCurve {
        AucCurve { n_grid: grid.to_vec(), mean: mean.to_vec(), std: vec![0.0; grid.len()], seeds: 1 }
    }

    #[test]
    fn crossover_examples() {
        let g = [10, 100];
        assert_eq!(crossover(&curve(&g, &[0.8, 0.9]), &curve(&g, &[0.8, 0.9]), CROSSOVER_DELTA).unwrap(), 10.0);
        let n = crossover(&curve(&g, &[0.9, 0.9]), &curve(&g, &[0.7, 0.9]), CROSSOVER_DELTA).unwrap();
        // t = (0.2 − 0.01)/0.2 = 0.95 of a decade past 10
        assert!((n - 10f64.powf(1.95)).abs() < 1e-9);
        assert!((n - 89.125).abs() < 1e-3);
        let never = crossover(&curve(&g, &[0.9, 0.95]), &curve(&g, &[0.7, 0.8]), CROSSOVER_DELTA).unwrap();
        assert!(never.is_infinite());
        assert!(crossover(&curve(&g, &[0.9, 0.9]), &curve(&[10, 1000], &[0.7, 0.9]), 0.01).is_err());
    }

    proptest! {
        #[test]
        fn crossover_monotone_in_spectral_curve(
            spec in prop::collection::vec(0.5f64..1.0, 4),
            spat in prop::collection::vec(0.5f64..1.0, 4),
            lift in 0.0f64..0.3,
        ) {
            let g = [10, 32, 100, 316];
            let base = crossover(&curve(&g, &spec), &curve(&g, &spat), CROSSOVER_DELTA).unwrap();
            let up: Vec<f64> = spec.iter().map(|v| v + lift).collect();
            let lifted = crossover(&curve(&g, &up), &curve(&g, &spat), CROSSOVER_DELTA).unwrap();
            prop_assert!(lifted >= base * (1.0 - 1e-12));
        }
    }

    #[test]
    fn curve_from_runs() {
        let c = AucCurve::from_runs(vec![10, 100], &[vec![0.5, 0.7], vec![0.9, 0.9]]).unwrap();
        assert_eq!(c.mean, vec![0.6, 0.9]);
        assert!((c.std[0] - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(AucCurve::from_runs(vec![100, 10], &[vec![0.5], vec![0.9]]).is_err());
    }
}
