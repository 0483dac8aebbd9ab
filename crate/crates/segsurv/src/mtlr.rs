//! Discrete-time survival machinery: time bins, label encoding, the
//! monotone-sequence probability model, and the derived risk score.
//!
//! The time axis is split into K bins by edges `t_1 < ... < t_{K-1}`
//! (with implicit `t_0 = 0` and `t_K = inf`). One logistic score per edge
//! produces a distribution over the K possible event bins by scoring the K
//! monotone label sequences: the sequence for an event in bin `j` has
//! `y_k = 1` exactly for `t_k > T`, so its score is the suffix sum of the
//! per-edge scores from `j` onward, and the all-survived sequence (empty
//! suffix, score 0) is the reference.

use crate::error::SurvivalError;
use serde::{Deserialize, Serialize};

/// Bin layout for the discretized future horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtlrConfig {
    /// Interior edges, strictly increasing, nonnegative. K = len + 1 bins.
    pub edges: Vec<f64>,
}

impl MtlrConfig {
    pub fn new(edges: Vec<f64>) -> Result<Self, SurvivalError> {
        if edges.is_empty() {
            return Err(SurvivalError::TooFewBins(1));
        }
        let increasing = edges.windows(2).all(|w| w[0] < w[1]);
        if !increasing || edges[0] < 0.0 || edges.iter().any(|e| !e.is_finite()) {
            return Err(SurvivalError::BadEdges(edges));
        }
        Ok(Self { edges })
    }

    /// Edges at the empirical quantiles of observed times: `k` requested
    /// bins put edges at probabilities 1/k .. (k-1)/k. Duplicate quantiles
    /// (small samples) are merged, which lowers the effective bin count.
    pub fn from_quantiles(times: &[f64], k: usize) -> Result<Self, SurvivalError> {
        if k < 2 {
            return Err(SurvivalError::TooFewBins(k));
        }
        if times.is_empty() {
            return Err(SurvivalError::BadEdges(vec![]));
        }
        let mut sorted: Vec<f64> = times.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("times must be comparable"));
        let mut edges = Vec::with_capacity(k - 1);
        for i in 1..k {
            let q = i as f64 / k as f64;
            // Nearest-rank quantile.
            let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
            let e = sorted[idx];
            if edges.last().map(|&l| e > l).unwrap_or(e > 0.0) {
                edges.push(e);
            }
        }
        Self::new(edges)
    }

    /// Number of bins K.
    pub fn bins(&self) -> usize {
        self.edges.len() + 1
    }

    /// Bin containing time `t`: the number of edges at or below `t`.
    pub fn bin_of(&self, t: f64) -> usize {
        self.edges.iter().filter(|&&e| e <= t).count()
    }
}

/// Survival target in bin encoding. The implicit binary vector `y` switches
/// monotonically from 0 to 1 at the event bin; for censored subjects it is
/// only defined up to the censoring bin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtlrLabel {
    /// Bin containing the event (uncensored) or censoring time.
    pub bin: usize,
    /// True when the event was observed.
    pub event: bool,
}

impl MtlrLabel {
    pub fn new(time: f64, event: bool, cfg: &MtlrConfig) -> Self {
        Self {
            bin: cfg.bin_of(time),
            event,
        }
    }

    /// The explicit `y` vector over the K-1 edges for an observed event:
    /// `y_k = 1` iff the event precedes edge `k`. Censored labels have no
    /// complete vector.
    pub fn y(&self, bins: usize) -> Option<Vec<u8>> {
        if !self.event {
            return None;
        }
        Some((0..bins - 1).map(|k| u8::from(k >= self.bin)).collect())
    }

    /// Event bins consistent with this label: the single observed bin, or
    /// every bin from the censoring bin onward.
    pub fn consistent_bins(&self, bins: usize) -> std::ops::Range<usize> {
        if self.event {
            self.bin..self.bin + 1
        } else {
            self.bin..bins
        }
    }
}

/// Scores of the K monotone sequences: suffix sums of the per-edge scores,
/// with the all-survived sequence pinned at 0.
pub fn sequence_scores(scores: &[f64]) -> Vec<f64> {
    let k = scores.len() + 1;
    let mut phi = vec![0.0; k];
    for j in (0..k - 1).rev() {
        phi[j] = phi[j + 1] + scores[j];
    }
    phi
}

/// Probability of the event falling in each of the K bins.
pub fn survival_pmf(scores: &[f64]) -> Result<Vec<f64>, SurvivalError> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(SurvivalError::NonFiniteScores);
    }
    let phi = sequence_scores(scores);
    let mx = phi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = phi.iter().map(|&p| (p - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Survival function at the interior edges: `S(t_k) = P(event in bin >= k)`.
pub fn survival_curve(pmf: &[f64]) -> Vec<f64> {
    let k = pmf.len();
    let mut s = vec![0.0; k - 1];
    let mut tail = 0.0;
    for j in (1..k).rev() {
        tail += pmf[j];
        s[j - 1] = tail;
    }
    s
}

/// Scalar risk: negative area under the discrete survival curve,
/// `-sum_k S(t_k)`. Mass in earlier bins gives strictly higher risk.
pub fn risk_score(pmf: &[f64], edges: &[f64]) -> Result<f64, SurvivalError> {
    if pmf.len() != edges.len() + 1 {
        return Err(SurvivalError::PmfLength {
            expected: edges.len() + 1,
            got: pmf.len(),
        });
    }
    let total: f64 = pmf.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(SurvivalError::BadPmf(total));
    }
    Ok(-survival_curve(pmf).iter().sum::<f64>())
}

/// Plain (non-differentiable) negative log-likelihood of a batch, for
/// baseline evaluation. `scores[i]` holds the K-1 edge scores of subject i.
pub fn nll_value(scores: &[Vec<f64>], labels: &[MtlrLabel]) -> Result<f64, SurvivalError> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(SurvivalError::NonFiniteScores);
    }
    let mut total = 0.0;
    for (s, label) in scores.iter().zip(labels) {
        let phi = sequence_scores(s);
        let k = phi.len();
        let lse_all = logsumexp(&phi);
        let range = label.consistent_bins(k);
        let lse_consistent = logsumexp(&phi[range]);
        total += lse_all - lse_consistent;
    }
    Ok(total / scores.len() as f64)
}

fn logsumexp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + v.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_edges_from_quantiles_dedupe() {
        let times = vec![10.0, 10.0, 10.0, 50.0];
        let cfg = MtlrConfig::from_quantiles(&times, 10).unwrap();
        assert!(cfg.edges.windows(2).all(|w| w[0] < w[1]));
        assert!(cfg.bins() >= 2);
    }

    #[test]
    fn bin_of_boundaries() {
        let cfg = MtlrConfig::new(vec![10.0, 20.0, 30.0]).unwrap();
        assert_eq!(cfg.bins(), 4);
        assert_eq!(cfg.bin_of(5.0), 0);
        assert_eq!(cfg.bin_of(10.0), 1); // an edge belongs to the later bin
        assert_eq!(cfg.bin_of(25.0), 2);
        assert_eq!(cfg.bin_of(1000.0), 3);
    }

    #[test]
    fn y_vector_is_monotone_and_switches_at_bin() {
        let cfg = MtlrConfig::new(vec![10.0, 20.0, 30.0]).unwrap();
        let label = MtlrLabel::new(15.0, true, &cfg);
        let y = label.y(cfg.bins()).unwrap();
        assert_eq!(y, vec![0, 1, 1]);
        assert!(y.windows(2).all(|w| w[0] <= w[1]));
        let censored = MtlrLabel::new(15.0, false, &cfg);
        assert!(censored.y(cfg.bins()).is_none());
        assert_eq!(censored.consistent_bins(cfg.bins()), 1..4);
    }

    #[test]
    fn zero_scores_give_uniform_pmf() {
        for k in [2usize, 3, 5, 8] {
            let pmf = survival_pmf(&vec![0.0; k - 1]).unwrap();
            for p in &pmf {
                assert!((p - 1.0 / k as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_bin_pmf_is_binary_softmax() {
        let s = 0.7;
        let pmf = survival_pmf(&[s]).unwrap();
        let z = s.exp() + 1.0;
        assert!((pmf[0] - s.exp() / z).abs() < 1e-12);
        assert!((pmf[1] - 1.0 / z).abs() < 1e-12);
    }

    #[test]
    fn uniform_pmf_risk_matches_hand_value() {
        let pmf = vec![0.25; 4];
        let edges = vec![1.0, 2.0, 3.0];
        let s = survival_curve(&pmf);
        assert_eq!(s, vec![0.75, 0.5, 0.25]);
        let r = risk_score(&pmf, &edges).unwrap();
        assert!((r - (-1.5)).abs() < 1e-12);
    }

    #[test]
    fn risk_is_extreme_for_first_and_last_bin_mass() {
        let edges = vec![1.0, 2.0, 3.0];
        let first = risk_score(&[1.0, 0.0, 0.0, 0.0], &edges).unwrap();
        let last = risk_score(&[0.0, 0.0, 0.0, 1.0], &edges).unwrap();
        let uniform = risk_score(&[0.25; 4], &edges).unwrap();
        assert!(first > uniform && uniform > last);
        assert_eq!(first, 0.0);
        assert_eq!(last, -3.0);
    }

    #[test]
    fn non_finite_scores_error() {
        assert!(matches!(
            survival_pmf(&[f64::NAN]),
            Err(SurvivalError::NonFiniteScores)
        ));
    }
}
