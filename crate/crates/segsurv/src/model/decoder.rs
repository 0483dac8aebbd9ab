//! Convolutional decoder over the tapped token representations.
//!
//! The deepest tap seeds the main path, which is deconvolved x2 once per
//! stage. Shallower taps are brought to the stage's resolution by their own
//! deconv chains and concatenated; at full resolution the conv-processed
//! original CT/PET volumes are concatenated instead. Every concatenation is
//! followed by two conv-BN-ReLU blocks, and a final 1x1x1 convolution emits
//! one logit per voxel. Only image token rows ever reach this module.

use crate::autodiff::{Scalar, Tape, TensorRef};
use crate::data::{Modality, Volume};
use crate::error::{DataError, ModelError};
use crate::params::BoundParams;

use super::ModelConfig;

/// Reassembles `[n, h]` image-token rows into an `[h, gh, gw, gd]` feature
/// grid (row order inverts the patch enumeration).
pub fn tokens_to_grid<T: Scalar>(
    tape: &mut Tape<T>,
    image_rows: TensorRef,
    grid: [usize; 3],
) -> Result<TensorRef, ModelError> {
    let rows = tape.value(image_rows).shape()[0];
    if rows != grid[0] * grid[1] * grid[2] {
        return Err(ModelError::TokenGridMismatch { tokens: rows, grid });
    }
    Ok(tape.tokens_to_grid(image_rows, grid)?)
}

fn conv_bn_relu<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    x: TensorRef,
    conv: &str,
    bn: &str,
) -> Result<TensorRef, ModelError> {
    let c = tape.conv3d(x, bound.get(conv), None, 1, 1)?;
    let n = tape.batch_norm_3d(
        c,
        bound.get(&format!("{bn}_g")),
        bound.get(&format!("{bn}_b")),
    )?;
    Ok(tape.relu(n)?)
}

/// Decodes the tapped feature grids (shallow to deep, one per stage) plus
/// the original two-channel volume into `[1, H, W, D]` logits.
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    grids: &[TensorRef],
    ct_pet: TensorRef,
) -> Result<TensorRef, ModelError> {
    let stages = cfg.stages();
    debug_assert_eq!(grids.len(), stages);
    let mut main = grids[stages - 1];

    for j in 0..stages {
        let stage = format!("stage{j}");
        main = tape.conv_transpose3d(main, bound.get(&format!("dec.up{j}_w")), None, 2, 0)?;

        let skip = if j < stages - 1 {
            // The deeper remaining taps pair with earlier stages.
            let mut s = tape.conv_transpose3d(
                grids[stages - 2 - j],
                bound.get(&format!("dec.skip{j}.d0_w")),
                None,
                2,
                0,
            )?;
            for e in 1..=j {
                s = tape.conv_transpose3d(
                    s,
                    bound.get(&format!("dec.skip{j}.d{e}_w")),
                    None,
                    2,
                    0,
                )?;
            }
            s
        } else {
            let s = conv_bn_relu(tape, bound, ct_pet, "dec.stem.c1_w", "dec.stem.bn1")?;
            conv_bn_relu(tape, bound, s, "dec.stem.c2_w", "dec.stem.bn2")?
        };

        let cat = tape
            .concat(&[main, skip], 0)
            .map_err(|source| ModelError::DecoderStage {
                stage: stage.clone(),
                source,
            })?;
        let b1 = conv_bn_relu(
            tape,
            bound,
            cat,
            &format!("dec.{stage}.c1_w"),
            &format!("dec.{stage}.bn1"),
        )?;
        main = conv_bn_relu(
            tape,
            bound,
            b1,
            &format!("dec.{stage}.c2_w"),
            &format!("dec.{stage}.bn2"),
        )?;
    }

    Ok(tape.conv3d(main, bound.get("dec.out_w"), Some(bound.get("dec.out_b")), 1, 0)?)
}

/// Thresholds logits into a binary MASK volume: voxels with
/// `sigmoid(logit) >= threshold` become foreground.
pub fn logits_to_mask(
    logits: &[f64],
    shape: [usize; 3],
    spacing: [f64; 3],
    threshold: f64,
) -> Result<Volume, DataError> {
    let data = logits
        .iter()
        .map(|&l| {
            let p = 1.0 / (1.0 + (-l).exp());
            if p >= threshold {
                1.0f32
            } else {
                0.0f32
            }
        })
        .collect();
    Volume::new(shape, spacing, data, Modality::Mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::model::{forward_subject, init_params, ModelConfig, SubjectInputs};
    use crate::mtlr::MtlrConfig;

    fn tiny_config() -> ModelConfig {
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

    fn mtlr() -> MtlrConfig {
        MtlrConfig::new(vec![50.0, 150.0]).unwrap()
    }

    fn toy_subject(cfg: &ModelConfig, seed: u64) -> crate::data::Subject {
        let synth = crate::data::SynthConfig {
            shape: cfg.input_shape,
            ..Default::default()
        };
        crate::data::generate_synthetic(1, seed, &synth)
            .unwrap()
            .remove(0)
    }

    #[test]
    fn grid_round_trip_is_identity() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..8 * 6).map(|i| i as f64 * 0.3).collect();
        let rows = tape.constant(Tensor::new(vec![8, 6], data.clone()).unwrap());
        let grid = tokens_to_grid(&mut tape, rows, [2, 2, 2]).unwrap();
        assert_eq!(tape.value(grid).shape(), &[6, 2, 2, 2]);
        let back = tape.grid_to_tokens(grid).unwrap();
        assert_eq!(tape.value(back).data(), data.as_slice());
    }

    #[test]
    fn constant_rows_make_spatially_constant_grid() {
        let mut tape = Tape::<f64>::new();
        let mut data = Vec::new();
        for _ in 0..8 {
            data.extend_from_slice(&[1.0, 2.0, 3.0]);
        }
        let rows = tape.constant(Tensor::new(vec![8, 3], data).unwrap());
        let grid = tokens_to_grid(&mut tape, rows, [2, 2, 2]).unwrap();
        let v = tape.value(grid).data();
        for c in 0..3 {
            let chunk = &v[c * 8..(c + 1) * 8];
            assert!(chunk.iter().all(|&x| x == (c + 1) as f64));
        }
    }

    #[test]
    fn token_count_mismatch_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let rows = tape.constant(Tensor::zeros(vec![7, 3]));
        assert!(matches!(
            tokens_to_grid(&mut tape, rows, [2, 2, 2]),
            Err(ModelError::TokenGridMismatch { tokens: 7, .. })
        ));
    }

    #[test]
    fn logits_shape_equals_input_shape() {
        let cfg = tiny_config();
        let params = init_params::<f64>(&cfg, &mtlr(), 3).unwrap();
        let subject = toy_subject(&cfg, 10);
        let inputs = SubjectInputs::<f64>::prepare(&subject, &cfg).unwrap();
        let mut tape = Tape::new();
        let bound = params.register(&mut tape);
        let fwd = forward_subject(&mut tape, &bound, &cfg, &inputs).unwrap();
        assert_eq!(tape.value(fwd.logits).shape(), &[1, 8, 8, 8]);
        assert!(tape.value(fwd.logits).all_finite());
    }

    #[test]
    fn all_zero_parameters_give_spatially_constant_logits() {
        let cfg = tiny_config();
        let mut params = init_params::<f64>(&cfg, &mtlr(), 3).unwrap();
        params.zero_where(|_| true);
        let subject = toy_subject(&cfg, 11);
        let inputs = SubjectInputs::<f64>::prepare(&subject, &cfg).unwrap();
        let mut tape = Tape::new();
        let bound = params.register(&mut tape);
        let fwd = forward_subject(&mut tape, &bound, &cfg, &inputs).unwrap();
        let v = tape.value(fwd.logits).data();
        assert!(v.iter().all(|&x| x == v[0]));
    }

    #[test]
    fn mask_threshold_rules() {
        let mask = logits_to_mask(&[0.0, 10.0, -10.0], [1, 1, 3], [1.0; 3], 0.5).unwrap();
        // Logit 0 has sigmoid exactly 0.5 and ties go to foreground.
        assert_eq!(mask.data, vec![1.0, 1.0, 0.0]);
        let empty = logits_to_mask(&[0.0, 10.0, -10.0], [1, 1, 3], [1.0; 3], 1.0).unwrap();
        assert_eq!(empty.data, vec![0.0, 0.0, 0.0]);
    }
}
