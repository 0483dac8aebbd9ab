//! Patch extraction and the joint image/EHR token embedding.
//!
//! Patch enumeration is C-order over the block grid (depth-block fastest);
//! within a row all CT voxels of the block come first (C-order, depth
//! fastest), then all PET voxels. The EHR projection is appended as the
//! final token; there is no class token. Learnable positional rows cover
//! all n+1 tokens, including the EHR one.

use crate::autodiff::{Scalar, Tape, Tensor, TensorRef};
use crate::data::{Modality, Volume};
use crate::error::ModelError;
use crate::params::BoundParams;

use super::ModelConfig;

/// Flattens a CT/PET pair into `[n, 2 P^3]` patch rows.
pub fn patchify<T: Scalar>(ct: &Volume, pet: &Volume, p: usize) -> Result<Tensor<T>, ModelError> {
    if ct.modality != Modality::Ct || pet.modality != Modality::Pet {
        return Err(ModelError::WrongModality(
            ct.modality.to_string(),
            pet.modality.to_string(),
        ));
    }
    if ct.shape != pet.shape {
        return Err(ModelError::VolumeShapeMismatch {
            lhs: ct.shape,
            rhs: pet.shape,
        });
    }
    if p == 0 || ct.shape.iter().any(|&s| s % p != 0) {
        return Err(ModelError::NotDivisible {
            shape: ct.shape,
            patch: p,
        });
    }
    let [h, w, d] = ct.shape;
    let (gh, gw, gd) = (h / p, w / p, d / p);
    let n = gh * gw * gd;
    let row_len = 2 * p * p * p;
    let mut data = Vec::with_capacity(n * row_len);
    for bx in 0..gh {
        for by in 0..gw {
            for bz in 0..gd {
                for vol in [ct, pet] {
                    for u in 0..p {
                        for v in 0..p {
                            for q in 0..p {
                                data.push(T::from_f64(
                                    vol.at(bx * p + u, by * p + v, bz * p + q) as f64,
                                ));
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, row_len], data).map_err(ModelError::Diff)
}

/// Inverse of [`patchify`]: reconstructs the CT and PET voxel arrays.
pub fn unpatchify<T: Scalar>(
    tokens: &Tensor<T>,
    shape: [usize; 3],
    p: usize,
) -> Result<(Vec<T>, Vec<T>), ModelError> {
    let [h, w, d] = shape;
    let (gh, gw, gd) = (h / p, w / p, d / p);
    let n = gh * gw * gd;
    let row_len = 2 * p * p * p;
    if tokens.shape() != [n, row_len] {
        return Err(ModelError::TokenGridMismatch {
            tokens: tokens.shape().first().copied().unwrap_or(0),
            grid: [gh, gw, gd],
        });
    }
    let mut ct = vec![T::zero(); h * w * d];
    let mut pet = vec![T::zero(); h * w * d];
    let data = tokens.data();
    let mut row = 0usize;
    for bx in 0..gh {
        for by in 0..gw {
            for bz in 0..gd {
                let base = row * row_len;
                let mut at = 0usize;
                for (buf, offset) in [(&mut ct, 0usize), (&mut pet, p * p * p)] {
                    for u in 0..p {
                        for v in 0..p {
                            for q in 0..p {
                                let x = bx * p + u;
                                let y = by * p + v;
                                let z = bz * p + q;
                                buf[(x * w + y) * d + z] = data[base + offset + at];
                                at += 1;
                            }
                        }
                    }
                    at = 0;
                }
                row += 1;
            }
        }
    }
    Ok((ct, pet))
}

/// Projects patch rows and the EHR vector to the embedding width, appends
/// the EHR token as row n, and adds the learnable positional matrix.
pub fn embed<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    tokens: TensorRef,
    ehr: TensorRef,
) -> Result<TensorRef, ModelError> {
    let got = tape.value(ehr).shape().to_vec();
    if got != [1, cfg.ehr_features] {
        return Err(ModelError::EhrLengthMismatch {
            got: got.last().copied().unwrap_or(0),
            expected: cfg.ehr_features,
        });
    }
    let img = tape.matmul(tokens, bound.get("embed.patch_w"))?;
    let img = tape.add_bias(img, bound.get("embed.patch_b"))?;
    let er = tape.matmul(ehr, bound.get("embed.ehr_w"))?;
    let er = tape.add_bias(er, bound.get("embed.ehr_b"))?;
    let x = tape.concat(&[img, er], 0)?;
    Ok(tape.embedding_add(x, bound.get("embed.pos"))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(shape: [usize; 3], ct_val: f32, pet_val: f32) -> (Volume, Volume) {
        let n = shape[0] * shape[1] * shape[2];
        (
            Volume::new(shape, [1.0; 3], vec![ct_val; n], Modality::Ct).unwrap(),
            Volume::new(shape, [1.0; 3], vec![pet_val; n], Modality::Pet).unwrap(),
        )
    }

    #[test]
    fn single_patch_covers_whole_volume() {
        let (ct, pet) = pair([4, 4, 4], 1.5, -0.5);
        let t: Tensor<f64> = patchify(&ct, &pet, 4).unwrap();
        assert_eq!(t.shape(), &[1, 128]);
        assert!(t.data()[..64].iter().all(|&v| v == 1.5));
        assert!(t.data()[64..].iter().all(|&v| v == -0.5));
    }

    #[test]
    fn constant_channels_fill_every_row() {
        let (ct, pet) = pair([4, 4, 2], 2.0, 3.0);
        let t: Tensor<f64> = patchify(&ct, &pet, 2).unwrap();
        assert_eq!(t.shape(), &[8, 16]);
        for row in 0..8 {
            let r = &t.data()[row * 16..(row + 1) * 16];
            assert!(r[..8].iter().all(|&v| v == 2.0));
            assert!(r[8..].iter().all(|&v| v == 3.0));
        }
    }

    #[test]
    fn patchify_round_trip_is_bit_exact() {
        let shape = [4, 6, 2];
        let n = 48;
        let ct_data: Vec<f32> = (0..n).map(|i| i as f32 * 0.5).collect();
        let pet_data: Vec<f32> = (0..n).map(|i| -(i as f32) * 0.25).collect();
        let ct = Volume::new(shape, [1.0; 3], ct_data.clone(), Modality::Ct).unwrap();
        let pet = Volume::new(shape, [1.0; 3], pet_data.clone(), Modality::Pet).unwrap();
        let t: Tensor<f64> = patchify(&ct, &pet, 2).unwrap();
        let (ct_back, pet_back) = unpatchify(&t, shape, 2).unwrap();
        for (a, b) in ct_back.iter().zip(&ct_data) {
            assert_eq!(*a, *b as f64);
        }
        for (a, b) in pet_back.iter().zip(&pet_data) {
            assert_eq!(*a, *b as f64);
        }
    }

    #[test]
    fn indivisible_shape_is_rejected() {
        let (ct, pet) = pair([4, 4, 4], 0.0, 0.0);
        assert!(matches!(
            patchify::<f64>(&ct, &pet, 3),
            Err(ModelError::NotDivisible { .. })
        ));
    }
}
