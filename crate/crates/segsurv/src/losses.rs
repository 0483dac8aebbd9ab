//! Training objectives: soft Dice, focal loss, the discrete-survival
//! negative log-likelihood, and their weighted combination
//! `beta * (dice + focal) + (1 - beta) * nll`.

use crate::autodiff::{Scalar, Tape, Tensor, TensorRef};
use crate::error::DiffError;
use crate::mtlr::MtlrLabel;
use serde::{Deserialize, Serialize};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    /// Focal class weight.
    pub alpha: f64,
    /// Focal focusing exponent.
    pub gamma: f64,
    /// Task weight between segmentation and survival terms.
    pub beta: f64,
    /// Dice smoothing added to numerator and denominator.
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 2.0,
            beta: 0.3,
            dice_eps: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), DiffError> {
        if self.gamma < 0.0 || !(0.0..=1.0).contains(&self.beta) || self.dice_eps <= 0.0 {
            return Err(DiffError::GradCheck(format!(
                "invalid loss config: alpha {}, gamma {}, beta {}, eps {}",
                self.alpha, self.gamma, self.beta, self.dice_eps
            )));
        }
        Ok(())
    }
}

/// Soft Dice loss `1 - (2 sum(p y) + eps) / (sum(p^2) + sum(y^2) + eps)`,
/// in [0, 1]. `probs` must already be probabilities.
pub fn dice_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: TensorRef,
    target: TensorRef,
    eps: f64,
) -> Result<TensorRef, DiffError> {
    if tape.value(probs).shape() != tape.value(target).shape() {
        return Err(DiffError::ShapeMismatch {
            op: "dice_loss",
            lhs: tape.value(probs).shape().to_vec(),
            rhs: tape.value(target).shape().to_vec(),
        });
    }
    let py = tape.mul(probs, target)?;
    let s_py = tape.sum_all(py)?;
    let num = tape.scale(s_py, 2.0)?;
    let num = tape.add_scalar(num, eps)?;
    let pp = tape.mul(probs, probs)?;
    let s_pp = tape.sum_all(pp)?;
    let yy = tape.mul(target, target)?;
    let s_yy = tape.sum_all(yy)?;
    let den = tape.add(s_pp, s_yy)?;
    let den = tape.add_scalar(den, eps)?;
    let ratio = tape.div(num, den)?;
    tape.one_minus(ratio)
}

/// Focal loss, averaged over voxels:
/// `mean(-alpha y (1-p)^gamma log p - (1-y) p^gamma log(1-p))`.
pub fn focal_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: TensorRef,
    target: TensorRef,
    alpha: f64,
    gamma: f64,
) -> Result<TensorRef, DiffError> {
    if tape.value(probs).shape() != tape.value(target).shape() {
        return Err(DiffError::ShapeMismatch {
            op: "focal_loss",
            lhs: tape.value(probs).shape().to_vec(),
            rhs: tape.value(target).shape().to_vec(),
        });
    }
    let n = tape.value(probs).numel();
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let one_minus_p = tape.one_minus(p)?;
    let log_p = tape.log(p)?;
    let log_1mp = tape.log(one_minus_p)?;

    let w_pos = tape.pow_const(one_minus_p, gamma)?;
    let pos = tape.mul(target, w_pos)?;
    let pos = tape.mul(pos, log_p)?;
    let pos = tape.scale(pos, -alpha)?;

    let one_minus_y = tape.one_minus(target)?;
    let w_neg = tape.pow_const(p, gamma)?;
    let neg = tape.mul(one_minus_y, w_neg)?;
    let neg = tape.mul(neg, log_1mp)?;
    let neg = tape.scale(neg, -1.0)?;

    let total = tape.add(pos, neg)?;
    let s = tape.sum_all(total)?;
    tape.scale(s, 1.0 / n as f64)
}

/// Batch-mean negative log-likelihood of the monotone-sequence survival
/// model. `scores` is `[B, K-1]`; `labels[i]` gives subject i's event bin
/// and censoring flag. Censored subjects marginalize over every bin from
/// the censoring bin onward; the log-partition runs over all K sequences.
pub fn mtlr_nll<T: Scalar>(
    tape: &mut Tape<T>,
    scores: TensorRef,
    labels: &[MtlrLabel],
) -> Result<TensorRef, DiffError> {
    let sh = tape.value(scores).shape().to_vec();
    if sh.len() != 2 || sh[0] == 0 || labels.is_empty() {
        return Err(DiffError::InvalidShape {
            op: "mtlr_nll",
            shape: sh,
            message: "expected a nonempty [B, K-1] score matrix and labels".into(),
        });
    }
    let (b, km1) = (sh[0], sh[1]);
    let k = km1 + 1;
    if labels.len() != b {
        return Err(DiffError::InvalidShape {
            op: "mtlr_nll",
            shape: sh,
            message: format!("{} labels for {b} score rows", labels.len()),
        });
    }
    for l in labels {
        if l.bin >= k {
            return Err(DiffError::InvalidShape {
                op: "mtlr_nll",
                shape: sh,
                message: format!("label bin {} out of range for K = {k}", l.bin),
            });
        }
    }

    // Suffix-sum matrix: phi[:, j] = sum_{kk >= j} scores[:, kk].
    let mut m = vec![T::zero(); km1 * k];
    for kk in 0..km1 {
        for j in 0..=kk {
            m[kk * k + j] = T::one();
        }
    }
    let m = tape.constant(Tensor::new(vec![km1, k], m)?);
    let phi = tape.matmul(scores, m)?;
    let lse_all = tape.logsumexp_rows(phi)?;

    let mut terms = Vec::with_capacity(b);
    for (i, label) in labels.iter().enumerate() {
        let row = tape.slice(phi, 0, i, i + 1)?;
        let range = label.consistent_bins(k);
        let consistent = tape.slice(row, 1, range.start, range.end)?;
        let lse_consistent = tape.logsumexp_rows(consistent)?;
        let lse_i = tape.slice(lse_all, 0, i, i + 1)?;
        terms.push(tape.sub(lse_i, lse_consistent)?);
    }
    let stacked = tape.concat(&terms, 0)?;
    let total = tape.sum_all(stacked)?;
    tape.scale(total, 1.0 / b as f64)
}

/// `beta * (dice + focal) + (1 - beta) * nll`.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    dice: TensorRef,
    focal: TensorRef,
    nll: TensorRef,
    beta: f64,
) -> Result<TensorRef, DiffError> {
    let seg = tape.add(dice, focal)?;
    let seg = tape.scale(seg, beta)?;
    let surv = tape.scale(nll, 1.0 - beta)?;
    tape.add(seg, surv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mtlr::MtlrConfig;

    fn scalar_of<T: Scalar>(tape: &Tape<T>, r: TensorRef) -> f64 {
        tape.value(r).item().to_f64()
    }

    #[test]
    fn dice_perfect_overlap_is_zero() {
        let mut tape = Tape::<f64>::new();
        let y = tape.constant(Tensor::from_f64(vec![4], &[1.0, 0.0, 1.0, 0.0]).unwrap());
        let loss = dice_loss(&mut tape, y, y, 1e-6).unwrap();
        assert!(scalar_of(&tape, loss).abs() < 1e-6);
    }

    #[test]
    fn dice_disjoint_masks_is_one() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_f64(vec![4], &[0.0, 1.0, 0.0, 1.0]).unwrap());
        let y = tape.constant(Tensor::from_f64(vec![4], &[1.0, 0.0, 1.0, 0.0]).unwrap());
        let loss = dice_loss(&mut tape, p, y, 1e-6).unwrap();
        assert!((scalar_of(&tape, loss) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dice_hand_value_one_third() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_f64(vec![2], &[0.5, 0.5]).unwrap());
        let y = tape.constant(Tensor::from_f64(vec![2], &[1.0, 0.0]).unwrap());
        let loss = dice_loss(&mut tape, p, y, 1e-6).unwrap();
        assert!((scalar_of(&tape, loss) - 1.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn focal_hand_value_quarter_log_two() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_f64(vec![1], &[0.5]).unwrap());
        let y = tape.constant(Tensor::from_f64(vec![1], &[1.0]).unwrap());
        let loss = focal_loss(&mut tape, p, y, 1.0, 2.0).unwrap();
        assert!((scalar_of(&tape, loss) - 0.25 * std::f64::consts::LN_2).abs() < 1e-10);
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let mut tape = Tape::<f64>::new();
        let pv = [0.3, 0.8, 0.6];
        let yv = [1.0, 0.0, 1.0];
        let p = tape.constant(Tensor::from_f64(vec![3], &pv).unwrap());
        let y = tape.constant(Tensor::from_f64(vec![3], &yv).unwrap());
        let loss = focal_loss(&mut tape, p, y, 1.0, 0.0).unwrap();
        let bce: f64 = pv
            .iter()
            .zip(&yv)
            .map(|(&p, &y)| -y * p.ln() - (1.0 - y) * (1.0 - p).ln())
            .sum::<f64>()
            / 3.0;
        assert!((scalar_of(&tape, loss) - bce).abs() < 1e-10);
    }

    #[test]
    fn focal_is_near_zero_when_predictions_match() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_f64(vec![2], &[1.0, 0.0]).unwrap());
        let y = tape.constant(Tensor::from_f64(vec![2], &[1.0, 0.0]).unwrap());
        let loss = focal_loss(&mut tape, p, y, 1.0, 2.0).unwrap();
        assert!(scalar_of(&tape, loss).abs() < 1e-6);
    }

    #[test]
    fn nll_uniform_scores_give_log_k() {
        for k in [2usize, 4, 6] {
            let mut tape = Tape::<f64>::new();
            let scores = tape.constant(Tensor::zeros(vec![1, k - 1]));
            let labels = vec![MtlrLabel {
                bin: k / 2,
                event: true,
            }];
            let nll = mtlr_nll(&mut tape, scores, &labels).unwrap();
            assert!((scalar_of(&tape, nll) - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_censored_past_last_edge_uses_survive_all_only() {
        let cfg = MtlrConfig::new(vec![1.0, 2.0, 3.0]).unwrap();
        let label = MtlrLabel::new(10.0, false, &cfg);
        assert_eq!(label.consistent_bins(cfg.bins()), 3..4);

        let mut tape = Tape::<f64>::new();
        let sv = [0.3, -0.2, 0.9];
        let scores = tape.constant(Tensor::from_f64(vec![1, 3], &sv).unwrap());
        let nll = mtlr_nll(&mut tape, scores, &[label]).unwrap();
        // -log p(survive all) computed by hand.
        let pmf = crate::mtlr::survival_pmf(&sv).unwrap();
        assert!((scalar_of(&tape, nll) + pmf[3].ln()).abs() < 1e-10);
    }

    #[test]
    fn combined_loss_hand_value() {
        let mut tape = Tape::<f64>::new();
        let dice = tape.constant(Tensor::scalar(0.4));
        let focal = tape.constant(Tensor::scalar(0.6));
        let nll = tape.constant(Tensor::scalar(2.0));
        let c = combined_loss(&mut tape, dice, focal, nll, 0.3).unwrap();
        assert!((scalar_of(&tape, c) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let scores = tape.constant(Tensor::zeros(vec![1, 3]));
        assert!(mtlr_nll(&mut tape, scores, &[]).is_err());
    }
}
