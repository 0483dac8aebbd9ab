//! Synthetic cohort generator with a planted, recoverable risk signal.
//!
//! Each subject gets an ellipsoidal tumor in the mask, elevated PET uptake
//! inside it, and a Weibull survival time whose log-hazard is linear in the
//! (standardized) tumor volume fraction and in age. Uptake intensity also
//! tracks the image-borne part of the hazard, so risk is learnable from
//! images alone. Generation is deterministic given the seed: subject `i`
//! draws from an independent, seeded stream.

use super::ehr::{EhrRecord, EhrSchema, EhrStats, SurvivalLabel};
use super::volume::{Modality, Volume};
use super::Subject;
use crate::error::DataError;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use std::collections::BTreeMap;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    /// Volume shape (H, W, D) in voxels.
    pub shape: [usize; 3],
    /// Voxel spacing in mm.
    pub spacing: [f64; 3],
    /// Target fraction of censored subjects.
    pub censor_rate: f64,
    /// Log-hazard coefficient on standardized tumor volume fraction.
    pub tumor_effect: f64,
    /// Log-hazard coefficient on standardized age.
    pub age_effect: f64,
    /// How strongly tumor PET uptake tracks the volume-borne log-hazard.
    pub uptake_gain: f64,
    /// Weibull shape parameter of the baseline time distribution.
    pub weibull_shape: f64,
    /// Weibull scale in days.
    pub weibull_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            shape: [32, 32, 16],
            spacing: [1.0, 1.0, 1.0],
            censor_rate: 0.75,
            tumor_effect: 2.0,
            age_effect: 0.4,
            uptake_gain: 0.8,
            weibull_shape: 1.5,
            weibull_scale: 365.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.shape.iter().any(|&s| s < 4) {
            return Err(DataError::InvalidSynthConfig(format!(
                "shape {:?} must be at least 4 voxels per axis",
                self.shape
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(DataError::InvalidSynthConfig(format!(
                "spacing {:?} must be positive",
                self.spacing
            )));
        }
        if !(0.0..1.0).contains(&self.censor_rate) {
            return Err(DataError::InvalidSynthConfig(format!(
                "censor_rate {} must lie in [0, 1)",
                self.censor_rate
            )));
        }
        if !(self.weibull_shape > 0.0) || !(self.weibull_scale > 0.0) {
            return Err(DataError::InvalidSynthConfig(
                "weibull parameters must be positive".into(),
            ));
        }
        Ok(())
    }
}

// Approximate moments of the tumor volume fraction under the radius
// distribution below, used to standardize the planted covariate.
const VOL_FRAC_CENTER: f64 = 0.034;
const VOL_FRAC_SCALE: f64 = 0.022;
const AGE_CENTER: f64 = 62.5;
const AGE_SCALE: f64 = 13.0;

/// Raw (pre-encoding) cells for one generated subject, keyed by CSV column.
pub type RawRow = BTreeMap<String, String>;

/// A generated cohort plus the raw rows needed to write the CSV.
pub struct GeneratedCohort {
    pub subjects: Vec<Subject>,
    pub raw_rows: Vec<RawRow>,
}

/// Deterministic synthetic cohort; see module docs for the planted signal.
pub fn generate_synthetic(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<Subject>, DataError> {
    Ok(generate_cohort(n, seed, cfg)?.subjects)
}

pub fn generate_cohort(n: usize, seed: u64, cfg: &SynthConfig) -> Result<GeneratedCohort, DataError> {
    cfg.validate()?;
    let schema = EhrSchema::default_schema();
    let [h, w, d] = cfg.shape;
    let total = (h * w * d) as f64;

    let mut raw_rows = Vec::with_capacity(n);
    let mut volumes = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut encoded_rows = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);

    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);

        // Ellipsoid geometry.
        let radii = [
            rng.random_range(0.12..0.28) * h as f64,
            rng.random_range(0.12..0.28) * w as f64,
            rng.random_range(0.12..0.28) * d as f64,
        ];
        let center = [
            h as f64 / 2.0 + rng.random_range(-0.08..0.08) * h as f64,
            w as f64 / 2.0 + rng.random_range(-0.08..0.08) * w as f64,
            d as f64 / 2.0 + rng.random_range(-0.08..0.08) * d as f64,
        ];
        let mut mask = vec![0.0f32; h * w * d];
        let mut inside = 0usize;
        for x in 0..h {
            for y in 0..w {
                for z in 0..d {
                    let q = ((x as f64 - center[0]) / radii[0]).powi(2)
                        + ((y as f64 - center[1]) / radii[1]).powi(2)
                        + ((z as f64 - center[2]) / radii[2]).powi(2);
                    if q <= 1.0 {
                        mask[(x * w + y) * d + z] = 1.0;
                        inside += 1;
                    }
                }
            }
        }
        let vol_frac = inside as f64 / total;
        let z_vol = (vol_frac - VOL_FRAC_CENTER) / VOL_FRAC_SCALE;

        // Health record.
        let age = rng.random_range(40.0..85.0);
        let z_age = (age - AGE_CENTER) / AGE_SCALE;
        let weight = rng.random_range(50.0..110.0);
        let gender = rng.random_range(0..2u32);
        let t_stage = rng.random_range(1..5u32);
        let n_stage = rng.random_range(0..4u32);
        let m_stage = if rng.random_range(0.0..1.0) < 0.15 { 1 } else { 0 };
        let tnm_edition = rng.random_range(7..9u32);
        let tnm_group = rng.random_range(1..5u32);
        let chemotherapy = rng.random_range(0..2u32);

        // Planted hazard: Weibull with linear log-hazard.
        let lp_img = cfg.tumor_effect * z_vol;
        let lp = lp_img + cfg.age_effect * z_age;
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        let t_true = cfg.weibull_scale
            * (-u.ln()).powf(1.0 / cfg.weibull_shape)
            * (-lp / cfg.weibull_shape).exp();
        let censored = rng.random_range(0.0..1.0) < cfg.censor_rate;
        let (time, event) = if censored {
            (t_true * rng.random_range(0.05..0.95), 0u8)
        } else {
            (t_true, 1u8)
        };
        let time = time.max(0.01);

        // Imaging: CT soft-tissue bump, PET uptake tracking lp_img.
        let ct_bg = Normal::new(-10.0, 150.0).unwrap();
        let ct_fg = Normal::new(55.0, 25.0).unwrap();
        let pet_bg = Normal::new(0.8, 0.25).unwrap();
        let uptake_level = (2.5 + cfg.uptake_gain * lp_img).clamp(1.3, 8.0);
        let pet_fg = Normal::new(uptake_level, 0.25).unwrap();
        let mut ct = Vec::with_capacity(h * w * d);
        let mut pet = Vec::with_capacity(h * w * d);
        for &m in &mask {
            if m > 0.5 {
                ct.push(rng.sample(ct_fg) as f32);
                pet.push((rng.sample(pet_fg) as f32).max(0.0));
            } else {
                ct.push(rng.sample(ct_bg) as f32);
                pet.push((rng.sample(pet_bg) as f32).max(0.0));
            }
        }

        let id = format!("synth_{i:04}");
        let mut row = RawRow::new();
        row.insert("id".into(), id.clone());
        row.insert("age".into(), format!("{age}"));
        row.insert("weight".into(), format!("{weight}"));
        row.insert("gender".into(), gender.to_string());
        row.insert("t_stage".into(), t_stage.to_string());
        row.insert("n_stage".into(), n_stage.to_string());
        row.insert("m_stage".into(), m_stage.to_string());
        row.insert("tnm_edition".into(), tnm_edition.to_string());
        row.insert("tnm_group".into(), tnm_group.to_string());
        row.insert("chemotherapy".into(), chemotherapy.to_string());
        row.insert("time".into(), format!("{time}"));
        row.insert("event".into(), event.to_string());

        encoded_rows.push(schema.encode_row(&row, i)?);
        raw_rows.push(row);
        ids.push(id);
        labels.push(SurvivalLabel::new(time, event)?);
        volumes.push((
            Volume::new(cfg.shape, cfg.spacing, ct, Modality::Ct)?,
            Volume::new(cfg.shape, cfg.spacing, pet, Modality::Pet)?,
            Volume::new(cfg.shape, cfg.spacing, mask, Modality::Mask)?,
        ));
    }

    // Cohort-wide standardization of numeric slots, same as the CSV path.
    let stats = EhrStats::fit(&encoded_rows, &schema.numeric_slots());
    for row in encoded_rows.iter_mut() {
        stats.apply(row);
    }

    let subjects = ids
        .into_iter()
        .zip(volumes)
        .zip(encoded_rows)
        .zip(labels)
        .map(|(((id, (ct, pet, mask)), encoded), label)| Subject {
            ehr: EhrRecord {
                id: id.clone(),
                encoded,
            },
            id,
            ct,
            pet,
            mask,
            label,
        })
        .collect();

    Ok(GeneratedCohort { subjects, raw_rows })
}
