//! Tabular health-record handling: schema, one-hot encoding, CSV ingestion.
//!
//! The encoded feature layout is deterministic: non-dropped columns are laid
//! out in lexicographic order of column name; a numeric column contributes
//! one slot, a categorical column contributes one slot per category with
//! categories also in lexicographic order. Numeric slots are z-scored with
//! statistics from the training split.

use crate::error::DataError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    #[serde(default)]
    pub drop: bool,
}

/// Column dispositions for one dataset. Serialized as the schema file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EhrSchema {
    pub columns: BTreeMap<String, ColumnSpec>,
}

impl EhrSchema {
    /// The canonical head-and-neck schema. Sparse multicentric columns
    /// (tobacco, alcohol, performance status, HPV status, SUV weight
    /// estimate) are listed but dropped.
    pub fn default_schema() -> Self {
        let mut columns = BTreeMap::new();
        let numeric = |drop| ColumnSpec {
            kind: ColumnKind::Numeric,
            categories: vec![],
            drop,
        };
        let cat = |cats: &[&str]| ColumnSpec {
            kind: ColumnKind::Categorical,
            categories: cats.iter().map(|s| s.to_string()).collect(),
            drop: false,
        };
        columns.insert("age".into(), numeric(false));
        columns.insert("weight".into(), numeric(false));
        columns.insert("gender".into(), cat(&["0", "1"]));
        columns.insert("t_stage".into(), cat(&["1", "2", "3", "4"]));
        columns.insert("n_stage".into(), cat(&["0", "1", "2", "3"]));
        columns.insert("m_stage".into(), cat(&["0", "1"]));
        columns.insert("tnm_edition".into(), cat(&["7", "8"]));
        columns.insert("tnm_group".into(), cat(&["1", "2", "3", "4"]));
        columns.insert("chemotherapy".into(), cat(&["0", "1"]));
        columns.insert("tobacco".into(), numeric(true));
        columns.insert("alcohol".into(), numeric(true));
        columns.insert("performance_status".into(), numeric(true));
        columns.insert("hpv_status".into(), numeric(true));
        columns.insert("estimated_weight_suv".into(), numeric(true));
        Self { columns }
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let bytes = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, bytes).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// Active (non-dropped) columns in layout order.
    pub fn active_columns(&self) -> impl Iterator<Item = (&String, &ColumnSpec)> {
        self.columns.iter().filter(|(_, spec)| !spec.drop)
    }

    /// Length F of the encoded feature vector.
    pub fn encoded_len(&self) -> usize {
        self.active_columns()
            .map(|(_, spec)| match spec.kind {
                ColumnKind::Numeric => 1,
                ColumnKind::Categorical => spec.categories.len(),
            })
            .sum()
    }

    /// Encoded-slot names, e.g. `age`, `gender=0`, `gender=1`.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (name, spec) in self.active_columns() {
            match spec.kind {
                ColumnKind::Numeric => names.push(name.clone()),
                ColumnKind::Categorical => {
                    let mut cats = spec.categories.clone();
                    cats.sort();
                    for c in cats {
                        names.push(format!("{name}={c}"));
                    }
                }
            }
        }
        names
    }

    /// Indices of numeric slots in the encoded vector (the z-scored ones).
    pub fn numeric_slots(&self) -> Vec<usize> {
        let mut slots = Vec::new();
        let mut at = 0usize;
        for (_, spec) in self.active_columns() {
            match spec.kind {
                ColumnKind::Numeric => {
                    slots.push(at);
                    at += 1;
                }
                ColumnKind::Categorical => at += spec.categories.len(),
            }
        }
        slots
    }

    /// Encodes one row of raw cell values into the fixed-length vector
    /// (numerics still raw; standardization happens separately).
    pub fn encode_row(
        &self,
        cells: &BTreeMap<String, String>,
        row: usize,
    ) -> Result<Vec<f64>, DataError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        for (name, spec) in self.active_columns() {
            let raw = cells
                .get(name)
                .ok_or_else(|| DataError::MissingColumn(name.clone()))?
                .trim();
            if raw.is_empty() {
                return Err(DataError::BadCell {
                    column: name.clone(),
                    row,
                    message: "missing value".into(),
                });
            }
            match spec.kind {
                ColumnKind::Numeric => {
                    let v: f64 = raw.parse().map_err(|_| DataError::BadCell {
                        column: name.clone(),
                        row,
                        message: format!("cannot parse {raw:?} as a number"),
                    })?;
                    out.push(v);
                }
                ColumnKind::Categorical => {
                    let mut cats = spec.categories.clone();
                    cats.sort();
                    let hit = cats.iter().position(|c| c == raw).ok_or_else(|| {
                        DataError::UnknownCategory {
                            column: name.clone(),
                            row,
                            value: raw.to_string(),
                        }
                    })?;
                    for (i, _) in cats.iter().enumerate() {
                        out.push(if i == hit { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One encoded health record.
#[derive(Clone, Debug, PartialEq)]
pub struct EhrRecord {
    pub id: String,
    /// Fixed-length feature vector of length `schema.encoded_len()`.
    pub encoded: Vec<f64>,
}

/// Standardization statistics for the numeric slots, fit on a train split.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EhrStats {
    pub slots: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl EhrStats {
    pub fn fit(rows: &[Vec<f64>], slots: &[usize]) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; slots.len()];
        let mut std = vec![1.0; slots.len()];
        for (k, &s) in slots.iter().enumerate() {
            let m = rows.iter().map(|r| r[s]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[s] - m).powi(2)).sum::<f64>() / n;
            mean[k] = m;
            std[k] = var.sqrt().max(1e-12);
        }
        Self {
            slots: slots.to_vec(),
            mean,
            std,
        }
    }

    pub fn apply(&self, row: &mut [f64]) {
        for (k, &s) in self.slots.iter().enumerate() {
            row[s] = (row[s] - self.mean[k]) / self.std[k];
        }
    }
}

/// Parsed survival outcome.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    /// Time in days; nonnegative.
    pub time: f64,
    /// 1 = event observed, 0 = censored.
    pub event: u8,
}

impl SurvivalLabel {
    pub fn new(time: f64, event: u8) -> Result<Self, DataError> {
        if !(time >= 0.0) || !time.is_finite() {
            return Err(DataError::BadCell {
                column: "time".into(),
                row: 0,
                message: format!("time must be a nonnegative real, got {time}"),
            });
        }
        if event > 1 {
            return Err(DataError::BadCell {
                column: "event".into(),
                row: 0,
                message: format!("event must be 0 or 1, got {event}"),
            });
        }
        Ok(Self { time, event })
    }
}

const LABEL_COLUMNS: [&str; 3] = ["id", "time", "event"];

/// Reads an EHR CSV, encoding per `schema` and standardizing numeric slots
/// with statistics of this file's rows. Use this for the training split; for
/// held-out files, fit stats on the train file and call
/// [`read_ehr_csv_with_stats`].
pub fn read_ehr_csv(
    path: &Path,
    schema: &EhrSchema,
) -> Result<Vec<(EhrRecord, SurvivalLabel)>, DataError> {
    let (mut rows, labels, ids) = read_raw(path, schema)?;
    let stats = EhrStats::fit(&rows, &schema.numeric_slots());
    for row in rows.iter_mut() {
        stats.apply(row);
    }
    Ok(assemble(rows, labels, ids))
}

/// Like [`read_ehr_csv`] but standardizes with pre-fit train statistics.
pub fn read_ehr_csv_with_stats(
    path: &Path,
    schema: &EhrSchema,
    stats: &EhrStats,
) -> Result<Vec<(EhrRecord, SurvivalLabel)>, DataError> {
    let (mut rows, labels, ids) = read_raw(path, schema)?;
    for row in rows.iter_mut() {
        stats.apply(row);
    }
    Ok(assemble(rows, labels, ids))
}

fn assemble(
    rows: Vec<Vec<f64>>,
    labels: Vec<SurvivalLabel>,
    ids: Vec<String>,
) -> Vec<(EhrRecord, SurvivalLabel)> {
    ids.into_iter()
        .zip(rows)
        .zip(labels)
        .map(|((id, encoded), label)| (EhrRecord { id, encoded }, label))
        .collect()
}

type RawRows = (Vec<Vec<f64>>, Vec<SurvivalLabel>, Vec<String>);

fn read_raw(path: &Path, schema: &EhrSchema) -> Result<RawRows, DataError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => DataError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        },
        _ => DataError::Csv(e),
    })?;
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    for required in LABEL_COLUMNS {
        if !headers.iter().any(|h| h == required) {
            return Err(DataError::MissingColumn(required.to_string()));
        }
    }
    for (name, _) in schema.active_columns() {
        if !headers.iter().any(|h| h == name) {
            return Err(DataError::MissingColumn(name.clone()));
        }
    }

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let cells: BTreeMap<String, String> = headers
            .iter()
            .cloned()
            .zip(record.iter().map(|c| c.to_string()))
            .collect();
        let encoded = schema.encode_row(&cells, idx)?;
        let parse_num = |col: &str| -> Result<f64, DataError> {
            cells
                .get(col)
                .ok_or_else(|| DataError::MissingColumn(col.to_string()))?
                .trim()
                .parse()
                .map_err(|_| DataError::BadCell {
                    column: col.to_string(),
                    row: idx,
                    message: "cannot parse as a number".into(),
                })
        };
        let time = parse_num("time")?;
        let event = parse_num("event")?;
        if event != 0.0 && event != 1.0 {
            return Err(DataError::BadCell {
                column: "event".into(),
                row: idx,
                message: format!("event must be 0 or 1, got {event}"),
            });
        }
        labels.push(SurvivalLabel::new(time, event as u8)?);
        ids.push(cells.get("id").cloned().unwrap_or_default());
        rows.push(encoded);
    }
    Ok((rows, labels, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    const HEADER: &str =
        "id,age,weight,gender,t_stage,n_stage,m_stage,tnm_edition,tnm_group,chemotherapy,time,event";

    #[test]
    fn encoded_length_matches_schema() {
        let schema = EhrSchema::default_schema();
        assert_eq!(schema.encoded_len(), 22);
        assert_eq!(schema.feature_names().len(), 22);
        let f = write_csv(&format!(
            "{HEADER}\ns1,63.5,80.2,1,2,0,0,8,3,1,612.0,1\n"
        ));
        let rows = read_ehr_csv(f.path(), &schema).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].0.encoded.len(), 22);
        assert_eq!(rows[0].1.time, 612.0);
        assert_eq!(rows[0].1.event, 1);
    }

    #[test]
    fn tobacco_column_is_silently_dropped() {
        let schema = EhrSchema::default_schema();
        let f = write_csv(
            "id,age,weight,gender,t_stage,n_stage,m_stage,tnm_edition,tnm_group,chemotherapy,tobacco,time,event\n\
             s1,60,70,0,1,0,0,7,1,0,1,100.0,0\n\
             s2,70,90,1,4,3,1,8,4,1,0,400.0,1\n",
        );
        let rows = read_ehr_csv(f.path(), &schema).unwrap();
        // tobacco contributes no slot: length is still F = 22.
        assert_eq!(rows[0].0.encoded.len(), 22);
    }

    #[test]
    fn missing_age_column_is_named() {
        let schema = EhrSchema::default_schema();
        let f = write_csv(
            "id,weight,gender,t_stage,n_stage,m_stage,tnm_edition,tnm_group,chemotherapy,time,event\n\
             s1,70,0,1,0,0,7,1,0,100.0,0\n",
        );
        let err = read_ehr_csv(f.path(), &schema).unwrap_err();
        assert_eq!(err.to_string(), "missing column: age");
    }

    #[test]
    fn one_hot_positions_follow_lexicographic_order() {
        let schema = EhrSchema::default_schema();
        let f = write_csv(&format!(
            "{HEADER}\na,60,70,0,1,0,0,7,1,0,100,0\nb,70,90,1,1,0,0,7,1,1,200,1\n"
        ));
        let rows = read_ehr_csv(f.path(), &schema).unwrap();
        let names = schema.feature_names();
        let g0 = names.iter().position(|n| n == "gender=0").unwrap();
        let g1 = names.iter().position(|n| n == "gender=1").unwrap();
        assert_eq!(rows[0].0.encoded[g0], 1.0);
        assert_eq!(rows[0].0.encoded[g1], 0.0);
        assert_eq!(rows[1].0.encoded[g0], 0.0);
        assert_eq!(rows[1].0.encoded[g1], 1.0);
        // Numeric slots are z-scored over the file.
        let age = names.iter().position(|n| n == "age").unwrap();
        assert!((rows[0].0.encoded[age] + 1.0).abs() < 1e-12);
        assert!((rows[1].0.encoded[age] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_category_is_reported() {
        let schema = EhrSchema::default_schema();
        let f = write_csv(&format!("{HEADER}\ns1,60,70,2,1,0,0,7,1,0,100,0\n"));
        let err = read_ehr_csv(f.path(), &schema).unwrap_err();
        assert!(matches!(err, DataError::UnknownCategory { .. }));
    }

    #[test]
    fn schema_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("schema.json");
        let schema = EhrSchema::default_schema();
        schema.save(&path).unwrap();
        let loaded = EhrSchema::load(&path).unwrap();
        assert_eq!(loaded.encoded_len(), schema.encoded_len());
        assert_eq!(loaded.feature_names(), schema.feature_names());
    }
}
