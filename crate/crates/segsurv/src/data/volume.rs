//! 3-D scalar volumes with spacing metadata, and the preprocessing that
//! brings a raw subject to network resolution: isotropic resampling,
//! intensity normalization, and symmetric center cropping.
//!
//! All operations are pure functions of their inputs.

use crate::error::DataError;
use serde::{Deserialize, Serialize};

/// What a volume's voxels mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "PET")]
    Pet,
    #[serde(rename = "MASK")]
    Mask,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Ct => write!(f, "CT"),
            Modality::Pet => write!(f, "PET"),
            Modality::Mask => write!(f, "MASK"),
        }
    }
}

/// Dense 3-D grid of scalars. Data is C-order with the depth axis fastest:
/// `index = (x * W + y) * D + z` for shape `(H, W, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub shape: [usize; 3],
    /// Voxel spacing in millimetres per axis.
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
    pub modality: Modality,
}

impl Volume {
    pub fn new(
        shape: [usize; 3],
        spacing: [f64; 3],
        data: Vec<f32>,
        modality: Modality,
    ) -> Result<Self, DataError> {
        let numel = shape[0] * shape[1] * shape[2];
        if data.len() != numel {
            return Err(DataError::DataShapeMismatch {
                len: data.len(),
                shape,
            });
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(DataError::NonPositiveSpacing { spacing });
        }
        if modality == Modality::Mask {
            if let Some(&bad) = data.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(DataError::NonBinaryMask { value: bad });
            }
        }
        Ok(Self {
            shape,
            spacing,
            data,
            modality,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[(x * self.shape[1] + y) * self.shape[2] + z]
    }

    /// Number of foreground voxels (mask volumes).
    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }
}

/// Resamples a volume to isotropic `target` mm spacing. The new extent per
/// axis is `round(extent * spacing / target)`. CT and PET interpolate
/// trilinearly; masks use nearest-neighbor so voxels stay binary.
pub fn resample_isotropic(v: &Volume, target: f64) -> Result<Volume, DataError> {
    if !(target > 0.0) || !target.is_finite() {
        return Err(DataError::NonPositiveSpacing {
            spacing: [target, target, target],
        });
    }
    let mut out_shape = [0usize; 3];
    for a in 0..3 {
        out_shape[a] = ((v.shape[a] as f64) * v.spacing[a] / target).round() as usize;
        if out_shape[a] < 1 {
            return Err(DataError::DegenerateResample {
                shape: v.shape,
                spacing: v.spacing,
                target,
            });
        }
    }
    // Source coordinate of output voxel i along axis a: i * target / spacing.
    // When spacings match this maps output grid points onto source grid
    // points exactly, so values are preserved there.
    let scale = [
        target / v.spacing[0],
        target / v.spacing[1],
        target / v.spacing[2],
    ];
    let nearest = v.modality == Modality::Mask;
    let mut data = Vec::with_capacity(out_shape[0] * out_shape[1] * out_shape[2]);
    for x in 0..out_shape[0] {
        let sx = x as f64 * scale[0];
        for y in 0..out_shape[1] {
            let sy = y as f64 * scale[1];
            for z in 0..out_shape[2] {
                let sz = z as f64 * scale[2];
                let val = if nearest {
                    sample_nearest(v, sx, sy, sz)
                } else {
                    sample_trilinear(v, sx, sy, sz)
                };
                data.push(val);
            }
        }
    }
    Volume::new(out_shape, [target; 3], data, v.modality)
}

fn sample_nearest(v: &Volume, x: f64, y: f64, z: f64) -> f32 {
    let cx = (x.round() as usize).min(v.shape[0] - 1);
    let cy = (y.round() as usize).min(v.shape[1] - 1);
    let cz = (z.round() as usize).min(v.shape[2] - 1);
    v.at(cx, cy, cz)
}

fn sample_trilinear(v: &Volume, x: f64, y: f64, z: f64) -> f32 {
    let clamp = |c: f64, n: usize| c.max(0.0).min((n - 1) as f64);
    let (x, y, z) = (
        clamp(x, v.shape[0]),
        clamp(y, v.shape[1]),
        clamp(z, v.shape[2]),
    );
    let (x0, y0, z0) = (x.floor() as usize, y.floor() as usize, z.floor() as usize);
    let (x1, y1, z1) = (
        (x0 + 1).min(v.shape[0] - 1),
        (y0 + 1).min(v.shape[1] - 1),
        (z0 + 1).min(v.shape[2] - 1),
    );
    let (fx, fy, fz) = (x - x0 as f64, y - y0 as f64, z - z0 as f64);

    let mut acc = 0.0f64;
    for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
        if wx == 0.0 {
            continue;
        }
        for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            if wy == 0.0 {
                continue;
            }
            for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                if wz == 0.0 {
                    continue;
                }
                acc += wx * wy * wz * v.at(xi, yi, zi) as f64;
            }
        }
    }
    acc as f32
}

/// HU window clip to [-1024, 1024], then linear map to [-1, 1] via x/1024.
pub fn normalize_ct(v: &Volume) -> Result<Volume, DataError> {
    debug_assert_eq!(v.modality, Modality::Ct);
    let data = v
        .data
        .iter()
        .map(|&x| x.clamp(-1024.0, 1024.0) / 1024.0)
        .collect();
    Volume::new(v.shape, v.spacing, data, v.modality)
}

/// Guard for zero-variance volumes in [`normalize_pet`].
pub const PET_STD_EPS: f64 = 1e-8;

/// Per-volume z-score: `(x - mean) / max(std, 1e-8)`, population std.
pub fn normalize_pet(v: &Volume) -> Result<Volume, DataError> {
    debug_assert_eq!(v.modality, Modality::Pet);
    let n = v.data.len() as f64;
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .data
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let denom = var.sqrt().max(PET_STD_EPS);
    let data = v
        .data
        .iter()
        .map(|&x| ((x as f64 - mean) / denom) as f32)
        .collect();
    Volume::new(v.shape, v.spacing, data, v.modality)
}

/// Centered crop to `target_shape`. Axes smaller than the target are first
/// zero-padded symmetrically (extra voxel to the trailing side when odd),
/// so the original content stays centered.
pub fn crop_center(v: &Volume, target_shape: [usize; 3]) -> Result<Volume, DataError> {
    let src = if v.shape.iter().zip(&target_shape).any(|(s, t)| s < t) {
        let padded_shape = [
            v.shape[0].max(target_shape[0]),
            v.shape[1].max(target_shape[1]),
            v.shape[2].max(target_shape[2]),
        ];
        let mut padded = vec![0.0f32; padded_shape[0] * padded_shape[1] * padded_shape[2]];
        let off = [
            (padded_shape[0] - v.shape[0]) / 2,
            (padded_shape[1] - v.shape[1]) / 2,
            (padded_shape[2] - v.shape[2]) / 2,
        ];
        for x in 0..v.shape[0] {
            for y in 0..v.shape[1] {
                let dst =
                    ((x + off[0]) * padded_shape[1] + y + off[1]) * padded_shape[2] + off[2];
                let src = (x * v.shape[1] + y) * v.shape[2];
                padded[dst..dst + v.shape[2]]
                    .copy_from_slice(&v.data[src..src + v.shape[2]]);
            }
        }
        Volume::new(padded_shape, v.spacing, padded, v.modality)?
    } else {
        v.clone()
    };

    let off = [
        (src.shape[0] - target_shape[0]) / 2,
        (src.shape[1] - target_shape[1]) / 2,
        (src.shape[2] - target_shape[2]) / 2,
    ];
    let mut data = Vec::with_capacity(target_shape[0] * target_shape[1] * target_shape[2]);
    for x in 0..target_shape[0] {
        for y in 0..target_shape[1] {
            let base = ((x + off[0]) * src.shape[1] + y + off[1]) * src.shape[2] + off[2];
            data.extend_from_slice(&src.data[base..base + target_shape[2]]);
        }
    }
    Volume::new(target_shape, src.spacing, data, src.modality)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(shape: [usize; 3], spacing: [f64; 3], data: Vec<f32>, m: Modality) -> Volume {
        Volume::new(shape, spacing, data, m).unwrap()
    }

    #[test]
    fn resample_doubles_shape_for_half_target() {
        let v = vol([4, 4, 4], [2.0, 2.0, 2.0], vec![1.0; 64], Modality::Ct);
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.shape, [8, 8, 8]);
        assert_eq!(r.spacing, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn resample_at_same_spacing_is_identity_on_grid_points() {
        let data: Vec<f32> = (0..27).map(|i| i as f32 * 0.25 - 3.0).collect();
        let v = vol([3, 3, 3], [1.0, 1.0, 1.0], data.clone(), Modality::Pet);
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.shape, v.shape);
        for (a, b) in r.data.iter().zip(&data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_constant_stays_constant() {
        let v = vol([5, 4, 3], [1.5, 2.0, 1.0], vec![7.5; 60], Modality::Ct);
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert!(r.data.iter().all(|&x| (x - 7.5).abs() < 1e-5));
    }

    #[test]
    fn resample_mask_stays_binary() {
        let mut data = vec![0.0f32; 4 * 4 * 4];
        for (i, d) in data.iter_mut().enumerate() {
            if i % 3 == 0 {
                *d = 1.0;
            }
        }
        let v = vol([4, 4, 4], [2.0, 2.0, 2.0], data, Modality::Mask);
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert!(r.data.iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn degenerate_resample_errors() {
        let v = vol([2, 2, 2], [0.1, 0.1, 0.1], vec![0.0; 8], Modality::Ct);
        assert!(matches!(
            resample_isotropic(&v, 10.0),
            Err(DataError::DegenerateResample { .. })
        ));
    }

    #[test]
    fn ct_normalization_boundaries() {
        let v = vol(
            [1, 1, 4],
            [1.0; 3],
            vec![2000.0, 0.0, -1024.0, -3000.0],
            Modality::Ct,
        );
        let n = normalize_ct(&v).unwrap();
        assert_eq!(n.data, vec![1.0, 0.0, -1.0, -1.0]);
    }

    #[test]
    fn pet_zscore_constant_is_zero() {
        let v = vol([2, 2, 2], [1.0; 3], vec![4.2; 8], Modality::Pet);
        let n = normalize_pet(&v).unwrap();
        assert!(n.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pet_zscore_two_values() {
        let v = vol(
            [1, 1, 4],
            [1.0; 3],
            vec![0.0, 2.0, 0.0, 2.0],
            Modality::Pet,
        );
        let n = normalize_pet(&v).unwrap();
        assert_eq!(n.data, vec![-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn crop_offsets_are_centered() {
        // 6x6x6 ramp cropped to 2x2x2 keeps the centered window at offset 2.
        let data: Vec<f32> = (0..216).map(|i| i as f32).collect();
        let v = vol([6, 6, 6], [1.0; 3], data, Modality::Ct);
        let c = crop_center(&v, [2, 2, 2]).unwrap();
        assert_eq!(c.shape, [2, 2, 2]);
        assert_eq!(c.at(0, 0, 0), v.at(2, 2, 2));
        assert_eq!(c.at(1, 1, 1), v.at(3, 3, 3));
    }

    #[test]
    fn crop_identity_when_target_equals_shape() {
        let data: Vec<f32> = (0..8).map(|i| i as f32).collect();
        let v = vol([2, 2, 2], [1.0; 3], data.clone(), Modality::Ct);
        let c = crop_center(&v, [2, 2, 2]).unwrap();
        assert_eq!(c.data, data);
    }

    #[test]
    fn crop_pads_small_volumes_with_zeros() {
        let v = vol([2, 2, 2], [1.0; 3], vec![5.0; 8], Modality::Ct);
        let c = crop_center(&v, [4, 4, 4]).unwrap();
        assert_eq!(c.shape, [4, 4, 4]);
        assert_eq!(c.at(0, 0, 0), 0.0);
        assert_eq!(c.at(1, 1, 1), 5.0);
        assert_eq!(c.at(2, 2, 2), 5.0);
        assert_eq!(c.at(3, 3, 3), 0.0);
        let total: f32 = c.data.iter().sum();
        assert_eq!(total, 40.0);
    }

    #[test]
    fn crop_is_idempotent() {
        let data: Vec<f32> = (0..125).map(|i| (i % 7) as f32).collect();
        let v = vol([5, 5, 5], [1.0; 3], data, Modality::Ct);
        let once = crop_center(&v, [3, 3, 3]).unwrap();
        let twice = crop_center(&once, [3, 3, 3]).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn mask_constructor_rejects_non_binary() {
        assert!(matches!(
            Volume::new([1, 1, 2], [1.0; 3], vec![0.0, 0.5], Modality::Mask),
            Err(DataError::NonBinaryMask { .. })
        ));
    }
}
