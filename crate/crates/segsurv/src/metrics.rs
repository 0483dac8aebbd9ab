//! Evaluation metrics: dice similarity on masks and Harrell's concordance
//! index on risk scores.

use crate::data::Volume;
use crate::error::MetricsError;

/// Dice similarity coefficient `2|A n B| / (|A| + |B|)` on binarized masks.
/// Two empty masks score 0 (there is no overlap to reward).
pub fn dsc_metric(pred: &Volume, truth: &Volume) -> Result<f64, MetricsError> {
    if pred.shape != truth.shape {
        return Err(MetricsError::MaskShapeMismatch {
            lhs: pred.shape,
            rhs: truth.shape,
        });
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        let (p, t) = (p > 0.5, t > 0.5);
        a += usize::from(p);
        b += usize::from(t);
        inter += usize::from(p && t);
    }
    if a + b == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

struct Fenwick {
    tree: Vec<usize>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self {
            tree: vec![0; n + 1],
        }
    }

    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted values with index <= i.
    fn prefix(&self, i: usize) -> usize {
        let mut i = i + 1;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's concordance index.
///
/// A pair is comparable iff the subject with the strictly smaller time has
/// an observed event; the pair is concordant when that subject also has the
/// strictly higher risk, and tied risks earn half credit. Implemented by a
/// descending-time sweep over a Fenwick tree of risk ranks, O(n log n).
pub fn c_index(risks: &[f64], times: &[f64], events: &[u8]) -> Result<f64, MetricsError> {
    if risks.len() != times.len() || times.len() != events.len() {
        return Err(MetricsError::LengthMismatch(
            risks.len(),
            times.len(),
            events.len(),
        ));
    }
    if risks.iter().chain(times).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }

    // Compress risks to ranks.
    let mut sorted_risks: Vec<f64> = risks.to_vec();
    sorted_risks.sort_by(|a, b| a.partial_cmp(b).expect("finite risks"));
    sorted_risks.dedup();
    let rank = |r: f64| sorted_risks.partition_point(|&x| x < r);

    // Process subjects in descending time, whole tied-time groups at once:
    // events in a group compare only against strictly later times.
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&i, &j| times[j].partial_cmp(&times[i]).expect("finite times"));

    let mut tree = Fenwick::new(sorted_risks.len());
    let mut inserted = 0usize;
    let (mut concordant, mut tied, mut discordant) = (0usize, 0usize, 0usize);

    let mut at = 0;
    while at < order.len() {
        let mut group_end = at;
        while group_end + 1 < order.len() && times[order[group_end + 1]] == times[order[at]] {
            group_end += 1;
        }
        for &i in &order[at..=group_end] {
            if events[i] == 1 {
                let r = rank(risks[i]);
                let le = tree.prefix(r);
                let lt = if r == 0 { 0 } else { tree.prefix(r - 1) };
                let eq = le - lt;
                // Later-time subjects with lower risk are concordant.
                concordant += lt;
                tied += eq;
                discordant += inserted - le;
            }
        }
        for &i in &order[at..=group_end] {
            tree.add(rank(risks[i]));
            inserted += 1;
        }
        at = group_end + 1;
    }

    let comparable = concordant + tied + discordant;
    if comparable == 0 {
        return Err(MetricsError::NoComparablePairs);
    }
    Ok((concordant as f64 + 0.5 * tied as f64) / comparable as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Modality;

    fn mask(data: Vec<f32>) -> Volume {
        let d = data.len();
        Volume::new([1, 1, d], [1.0; 3], data, Modality::Mask).unwrap()
    }

    #[test]
    fn dsc_identical_nonempty_is_one() {
        let m = mask(vec![1.0, 0.0, 1.0, 1.0]);
        assert_eq!(dsc_metric(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn dsc_symmetric_and_empty_rules() {
        let a = mask(vec![1.0, 1.0, 0.0, 0.0]);
        let b = mask(vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(dsc_metric(&a, &b).unwrap(), dsc_metric(&b, &a).unwrap());
        assert!((dsc_metric(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        let e = mask(vec![0.0; 4]);
        assert_eq!(dsc_metric(&e, &e).unwrap(), 0.0);
    }

    #[test]
    fn perfect_ranking_scores_one() {
        // Higher risk, earlier event.
        let risks = [4.0, 3.0, 2.0, 1.0];
        let times = [1.0, 2.0, 3.0, 4.0];
        let events = [1, 1, 1, 1];
        assert_eq!(c_index(&risks, &times, &events).unwrap(), 1.0);
    }

    #[test]
    fn constant_risks_score_half() {
        let risks = [0.5; 5];
        let times = [1.0, 2.0, 3.0, 4.0, 5.0];
        let events = [1; 5];
        assert_eq!(c_index(&risks, &times, &events).unwrap(), 0.5);
    }

    #[test]
    fn all_censored_is_an_error() {
        let risks = [1.0, 2.0];
        let times = [1.0, 2.0];
        let events = [0, 0];
        assert!(matches!(
            c_index(&risks, &times, &events),
            Err(MetricsError::NoComparablePairs)
        ));
    }

    #[test]
    fn censored_subject_is_comparable_only_as_the_later_member() {
        // Subject 0: event at t=1. Subject 1: censored at t=2.
        // The (0, 1) pair is comparable; (1, 0) direction is not a new pair.
        let risks = [2.0, 1.0];
        let times = [1.0, 2.0];
        let events = [1, 0];
        assert_eq!(c_index(&risks, &times, &events).unwrap(), 1.0);
        // Flip risks: now discordant.
        assert_eq!(c_index(&[1.0, 2.0], &times, &events).unwrap(), 0.0);
    }

    #[test]
    fn tied_times_are_not_comparable() {
        let risks = [1.0, 2.0];
        let times = [3.0, 3.0];
        let events = [1, 1];
        assert!(matches!(
            c_index(&risks, &times, &events),
            Err(MetricsError::NoComparablePairs)
        ));
    }
}
