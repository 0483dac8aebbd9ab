//! Domain data model: volumes, health records, subjects, file formats,
//! preprocessing, and the synthetic cohort generator.

pub mod dataset;
pub mod ehr;
pub mod rvol;
pub mod synth;
pub mod volume;

pub use ehr::{EhrRecord, EhrSchema, EhrStats, SurvivalLabel};
pub use rvol::{read_volume, write_volume};
pub use synth::{generate_synthetic, SynthConfig};
pub use volume::{crop_center, normalize_ct, normalize_pet, resample_isotropic, Modality, Volume};

use crate::error::DataError;

/// One study subject: paired CT/PET/mask volumes, an encoded health record,
/// and the survival outcome.
#[derive(Clone, Debug)]
pub struct Subject {
    pub id: String,
    pub ct: Volume,
    pub pet: Volume,
    pub mask: Volume,
    pub ehr: EhrRecord,
    pub label: SurvivalLabel,
}

impl Subject {
    /// After preprocessing the three volumes must share shape and spacing.
    pub fn check_aligned(&self) -> Result<(), DataError> {
        for v in [&self.pet, &self.mask] {
            if v.shape != self.ct.shape {
                return Err(DataError::DataShapeMismatch {
                    len: v.numel(),
                    shape: self.ct.shape,
                });
            }
            if v.spacing != self.ct.spacing {
                return Err(DataError::NonPositiveSpacing { spacing: v.spacing });
            }
        }
        Ok(())
    }
}

/// Settings for [`preprocess_subject`].
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct PreprocConfig {
    /// Isotropic target spacing in mm.
    pub spacing: f64,
    /// Final centered crop, `(H, W, D)`.
    pub crop: [usize; 3],
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self {
            spacing: 1.0,
            crop: [80, 80, 48],
        }
    }
}

/// Full preprocessing chain: resample all three volumes to isotropic
/// spacing (masks nearest-neighbor), window/normalize CT, z-score PET,
/// and center-crop everything to the configured shape.
pub fn preprocess_subject(s: &Subject, cfg: &PreprocConfig) -> Result<Subject, DataError> {
    let ct = resample_isotropic(&s.ct, cfg.spacing)?;
    let pet = resample_isotropic(&s.pet, cfg.spacing)?;
    let mask = resample_isotropic(&s.mask, cfg.spacing)?;
    let ct = normalize_ct(&ct)?;
    let pet = normalize_pet(&pet)?;
    let out = Subject {
        id: s.id.clone(),
        ct: crop_center(&ct, cfg.crop)?,
        pet: crop_center(&pet, cfg.crop)?,
        mask: crop_center(&mask, cfg.crop)?,
        ehr: s.ehr.clone(),
        label: s.label,
    };
    out.check_aligned()?;
    Ok(out)
}
