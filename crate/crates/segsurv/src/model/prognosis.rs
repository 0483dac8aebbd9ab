//! Prognostic head: mean pooling over all tokens (images and EHR), two
//! ReLU fully connected reductions, then one logistic score per time-bin
//! edge.

use crate::autodiff::{Scalar, Tape, TensorRef};
use crate::error::ModelError;
use crate::params::BoundParams;

use super::ModelConfig;

/// `[(n+1), h]` encoder output to a `[1, head_hidden[1]]` feature vector.
pub fn head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    _cfg: &ModelConfig,
    z_final: TensorRef,
) -> Result<TensorRef, ModelError> {
    let pooled = tape.mean_axis(z_final, 0)?;
    let f = tape.matmul(pooled, bound.get("prog.fc1_w"))?;
    let f = tape.add_bias(f, bound.get("prog.fc1_b"))?;
    let f = tape.relu(f)?;
    let f = tape.matmul(f, bound.get("prog.fc2_w"))?;
    let f = tape.add_bias(f, bound.get("prog.fc2_b"))?;
    Ok(tape.relu(f)?)
}

/// Features to `[1, K-1]` edge scores.
pub fn mtlr_scores<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    features: TensorRef,
) -> Result<TensorRef, ModelError> {
    let s = tape.matmul(features, bound.get("prog.mtlr_w"))?;
    Ok(tape.add_bias(s, bound.get("prog.mtlr_b"))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::model::{init_params, ModelConfig};
    use crate::mtlr::MtlrConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            input_shape: [8, 8, 8],
            patch: 4,
            embed_dim: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            ehr_features: 4,
            taps: vec![1, 2],
            decoder_widths: vec![3, 5],
            head_hidden: [6, 4],
            time_bins: 3,
        }
    }

    #[test]
    fn identical_rows_mean_pool_to_the_row() {
        let c = cfg();
        let mtlr = MtlrConfig::new(vec![10.0, 20.0]).unwrap();
        let params = init_params::<f64>(&c, &mtlr, 0).unwrap();
        let mut tape = Tape::new();
        let bound = params.register(&mut tape);
        let row = [0.5, -1.0, 2.0, 0.0, 1.0, -0.5, 0.25, 3.0];
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(&row);
        }
        let z = tape.constant(Tensor::new(vec![5, 8], data).unwrap());
        let pooled = tape.mean_axis(z, 0).unwrap();
        let got: Vec<f64> = tape.value(pooled).iter_f64().collect();
        for (a, b) in got.iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
        // And the head runs on it with the configured widths.
        let f = head_forward(&mut tape, &bound, &c, z).unwrap();
        assert_eq!(tape.value(f).shape(), &[1, 4]);
        let s = mtlr_scores(&mut tape, &bound, f).unwrap();
        assert_eq!(tape.value(s).shape(), &[1, 2]);
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let c = cfg();
        let mtlr = MtlrConfig::new(vec![10.0, 20.0]).unwrap();
        let mut params = init_params::<f64>(&c, &mtlr, 0).unwrap();
        params.zero_where(|n| n.starts_with("prog."));
        let mut tape = Tape::new();
        let bound = params.register(&mut tape);
        let z = tape.constant(Tensor::full(vec![5, 8], 3.0));
        let f = head_forward(&mut tape, &bound, &c, z).unwrap();
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }
}
