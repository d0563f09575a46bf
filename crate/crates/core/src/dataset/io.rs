//! On-disk formats: trace CSV, label CSV, and the dataset manifest.
//!
//! Traces are CSV files with header `timestamp,f0,...,f{M-1}` and strictly
//! increasing integer timestamps. Labels are CSV rows
//! `sequence_id,start,end,event_type` with inclusive record-index ranges. A
//! manifest is a JSON file listing every sequence with its file path (relative
//! to the manifest), domain id, role, and optional label file.

use super::{ranges_to_labels, DatasetError, LabeledRange, Role, Sequence};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub domain_id: u32,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_path: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub sequences: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, msg: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Writes a trace as `timestamp,f0,...,f{M-1}` rows.
pub fn write_trace_csv(
    path: &Path,
    timestamps: &[i64],
    values: &Array2<f64>,
) -> Result<(), DatasetError> {
    assert_eq!(timestamps.len(), values.nrows());
    let mut w = csv::Writer::from_path(path).map_err(|e| parse_err(path, e.to_string()))?;
    let mut header = vec!["timestamp".to_string()];
    header.extend((0..values.ncols()).map(|j| format!("f{j}")));
    w.write_record(&header)
        .map_err(|e| parse_err(path, e.to_string()))?;
    let mut record = Vec::with_capacity(values.ncols() + 1);
    for (ts, row) in timestamps.iter().zip(values.rows()) {
        record.clear();
        record.push(ts.to_string());
        record.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&record)
            .map_err(|e| parse_err(path, e.to_string()))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Reads a trace written by [`write_trace_csv`], validating the header shape
/// and timestamp monotonicity.
pub fn read_trace_csv(path: &Path) -> Result<(Vec<i64>, Array2<f64>), DatasetError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| parse_err(path, e.to_string()))?;
    let header = r
        .headers()
        .map_err(|e| parse_err(path, e.to_string()))?
        .clone();
    if header.get(0) != Some("timestamp") {
        return Err(parse_err(path, "first column must be `timestamp`"));
    }
    let m = header.len() - 1;
    if m == 0 {
        return Err(parse_err(path, "no feature columns"));
    }
    let mut timestamps = Vec::new();
    let mut data = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, e.to_string()))?;
        if rec.len() != m + 1 {
            return Err(parse_err(path, format!("row {i}: {} fields, expected {}", rec.len(), m + 1)));
        }
        let ts: i64 = rec[0]
            .parse()
            .map_err(|_| parse_err(path, format!("row {i}: bad timestamp `{}`", &rec[0])))?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(parse_err(path, format!("row {i}: timestamp {ts} not increasing")));
            }
        }
        timestamps.push(ts);
        for j in 0..m {
            let v: f64 = rec[j + 1]
                .parse()
                .map_err(|_| parse_err(path, format!("row {i}: bad value `{}`", &rec[j + 1])))?;
            data.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(parse_err(path, "no records"));
    }
    let values = Array2::from_shape_vec((timestamps.len(), m), data)
        .map_err(|e| parse_err(path, e.to_string()))?;
    Ok((timestamps, values))
}

pub fn write_labels_csv(path: &Path, ranges: &[LabeledRange]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| parse_err(path, e.to_string()))?;
    w.write_record(["sequence_id", "start", "end", "event_type"])
        .map_err(|e| parse_err(path, e.to_string()))?;
    for r in ranges {
        w.write_record([
            r.sequence_id.clone(),
            r.start.to_string(),
            r.end.to_string(),
            r.event_type.to_string(),
        ])
        .map_err(|e| parse_err(path, e.to_string()))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<LabeledRange>, DatasetError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| parse_err(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, e.to_string()))?;
        if rec.len() != 4 {
            return Err(parse_err(path, format!("row {i}: expected 4 fields")));
        }
        let field = |k: usize, name: &str| -> Result<usize, DatasetError> {
            rec[k]
                .parse()
                .map_err(|_| parse_err(path, format!("row {i}: bad {name} `{}`", &rec[k])))
        };
        let start = field(1, "start")?;
        let end = field(2, "end")?;
        let event_type: u32 = rec[3]
            .parse()
            .map_err(|_| parse_err(path, format!("row {i}: bad event_type `{}`", &rec[3])))?;
        if event_type == 0 {
            return Err(parse_err(path, format!("row {i}: event_type must be >= 1")));
        }
        out.push(LabeledRange {
            sequence_id: rec[0].to_string(),
            start,
            end,
            event_type,
        });
    }
    Ok(out)
}

/// Loads every sequence referenced by a manifest, resolving paths relative to
/// the manifest's directory and expanding label ranges into per-record
/// labels.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<Sequence>, DatasetError> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(manifest.sequences.len());
    let mut n_features: Option<usize> = None;
    for entry in &manifest.sequences {
        let trace_path = resolve(base, &entry.path);
        let (timestamps, values) = read_trace_csv(&trace_path)?;
        match n_features {
            None => n_features = Some(values.ncols()),
            Some(m) if m != values.ncols() => {
                return Err(DatasetError::InvalidSequence {
                    sequence: entry.id.clone(),
                    reason: format!("feature count {} differs from {m}", values.ncols()),
                });
            }
            _ => {}
        }
        let labels = match &entry.label_path {
            Some(lp) => {
                let ranges = read_labels_csv(&resolve(base, lp))?;
                Some(ranges_to_labels(&entry.id, values.nrows(), &ranges)?)
            }
            None => None,
        };
        out.push(Sequence::new(
            entry.id.clone(),
            entry.domain_id,
            timestamps,
            values,
            labels,
            entry.role,
        )?);
    }
    Ok(out)
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
