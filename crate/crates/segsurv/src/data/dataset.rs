//! On-disk dataset layout.
//!
//! ```text
//! <dir>/schema.json            column dispositions
//! <dir>/ehr.csv                id, clinical columns, time, event
//! <dir>/volumes/<id>_ct.rvol   RVOL v1 volumes, one triple per subject
//! <dir>/volumes/<id>_pet.rvol
//! <dir>/volumes/<id>_mask.rvol
//! ```

use super::ehr::{read_ehr_csv, EhrSchema};
use super::rvol::{read_volume, write_volume};
use super::synth::GeneratedCohort;
use super::Subject;
use crate::error::DataError;
use std::path::Path;

const CSV_COLUMNS: [&str; 12] = [
    "id",
    "age",
    "weight",
    "gender",
    "t_stage",
    "n_stage",
    "m_stage",
    "tnm_edition",
    "tnm_group",
    "chemotherapy",
    "time",
    "event",
];

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl GeneratedCohort {
    /// Writes the cohort as a dataset directory readable by [`load_dataset`].
    pub fn write(&self, dir: &Path, schema: &EhrSchema) -> Result<(), DataError> {
        let volumes = dir.join("volumes");
        std::fs::create_dir_all(&volumes).map_err(|e| io_err(&volumes, e))?;
        schema.save(&dir.join("schema.json"))?;

        let csv_path = dir.join("ehr.csv");
        let mut writer = csv::Writer::from_path(&csv_path)?;
        writer.write_record(CSV_COLUMNS)?;
        for row in &self.raw_rows {
            let record: Vec<&str> = CSV_COLUMNS
                .iter()
                .map(|c| row.get(*c).map(|s| s.as_str()).unwrap_or(""))
                .collect();
            writer.write_record(record)?;
        }
        writer.flush().map_err(|e| io_err(&csv_path, e))?;

        for s in &self.subjects {
            write_volume(&s.ct, &volumes.join(format!("{}_ct.rvol", s.id)))?;
            write_volume(&s.pet, &volumes.join(format!("{}_pet.rvol", s.id)))?;
            write_volume(&s.mask, &volumes.join(format!("{}_mask.rvol", s.id)))?;
        }
        Ok(())
    }
}

/// Loads a dataset directory. EHR numerics are standardized with statistics
/// of this file's rows (the training-split convention).
pub fn load_dataset(dir: &Path) -> Result<Vec<Subject>, DataError> {
    let schema = EhrSchema::load(&dir.join("schema.json"))?;
    let records = read_ehr_csv(&dir.join("ehr.csv"), &schema)?;
    let volumes = dir.join("volumes");
    let mut subjects = Vec::with_capacity(records.len());
    for (ehr, label) in records {
        let id = ehr.id.clone();
        subjects.push(Subject {
            ct: read_volume(&volumes.join(format!("{id}_ct.rvol")))?,
            pet: read_volume(&volumes.join(format!("{id}_pet.rvol")))?,
            mask: read_volume(&volumes.join(format!("{id}_mask.rvol")))?,
            id,
            ehr,
            label,
        });
    }
    Ok(subjects)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_cohort, SynthConfig};

    #[test]
    fn write_then_load_round_trips_subjects() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            shape: [8, 8, 4],
            ..Default::default()
        };
        let cohort = generate_cohort(4, 5, &cfg).unwrap();
        cohort
            .write(dir.path(), &EhrSchema::default_schema())
            .unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 4);
        for (a, b) in cohort.subjects.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.ct.data, b.ct.data);
            assert_eq!(a.mask.data, b.mask.data);
            assert_eq!(a.label.time, b.label.time);
            assert_eq!(a.label.event, b.label.event);
            // Encoded EHR must agree between the in-memory and CSV paths.
            for (x, y) in a.ehr.encoded.iter().zip(&b.ehr.encoded) {
                assert!((x - y).abs() < 1e-9, "{} vs {}", x, y);
            }
        }
    }
}
