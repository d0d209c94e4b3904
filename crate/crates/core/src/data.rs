//! Speed series storage, min-max normalization and CSV ingest.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Result};
use crate::graph::parse_err;

/// Affine map of `[min, max]` onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: f64,
    pub max: f64,
}

impl Normalization {
    /// Bounds of the given values; a zero span is widened to one unit.
    pub fn fit(values: ArrayView2<'_, f64>) -> Result<Self> {
        if values.is_empty() {
            return input_err("cannot fit normalization to an empty series");
        }
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !min.is_finite() || !max.is_finite() {
            return input_err("series contains non-finite values");
        }
        Ok(if max > min { Self { min, max } } else { Self { min, max: min + 1.0 } })
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.min) / self.span()
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        y * self.span() + self.min
    }
}

/// `T x n` speeds at a fixed sampling interval. Row `k` is time id
/// `time_ids[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedTensor {
    pub values: Array2<f64>,
    pub interval_minutes: u32,
    pub node_ids: Vec<String>,
    pub time_ids: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SpeedMeta {
    interval_minutes: u32,
    normalization: Option<Normalization>,
}

impl SpeedTensor {
    pub fn new(values: Array2<f64>, node_ids: Vec<String>) -> Result<Self> {
        let time_ids = (0..values.nrows()).collect();
        Self::with_time_ids(values, node_ids, time_ids)
    }

    pub fn with_time_ids(values: Array2<f64>, node_ids: Vec<String>, time_ids: Vec<usize>) -> Result<Self> {
        if values.nrows() == 0 {
            return input_err("speed series needs at least one step");
        }
        if values.ncols() != node_ids.len() || values.nrows() != time_ids.len() {
            return shape_err(format!(
                "speed matrix is {:?}, with {} node ids and {} time ids",
                values.dim(),
                node_ids.len(),
                time_ids.len()
            ));
        }
        Ok(Self {
            values,
            interval_minutes: 15,
            node_ids,
            time_ids,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.values.ncols()
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.mapv(f),
            ..self.clone()
        }
    }

    /// Writes `time_id,<node ids...>` rows plus a JSON sidecar holding the
    /// interval and optional normalization bounds.
    pub fn write_csv(&self, path: &Path, meta_path: &Path, normalization: Option<Normalization>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let header: Vec<&str> = std::iter::once("time_id")
            .chain(self.node_ids.iter().map(String::as_str))
            .collect();
        w.write_record(&header)?;
        for (t, row) in self.time_ids.iter().zip(self.values.rows()) {
            let rec: Vec<String> = std::iter::once(t.to_string())
                .chain(row.iter().map(|v| v.to_string()))
                .collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        let meta = SpeedMeta {
            interval_minutes: self.interval_minutes,
            normalization,
        };
        fs::write(meta_path, serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Reads the CSV; the sidecar is optional and supplies the interval and
    /// stored normalization.
    pub fn read_csv(path: &Path, meta_path: &Path) -> Result<(Self, Option<Normalization>)> {
        let file = path.display().to_string();
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        if headers.get(0).map(str::trim) != Some("time_id") || headers.len() < 2 {
            return Err(parse_err(&file, 1, "expected header time_id,<node ids>"));
        }
        let node_ids: Vec<String> = headers.iter().skip(1).map(|s| s.trim().to_string()).collect();
        let n = node_ids.len();
        let mut flat = Vec::new();
        let mut time_ids = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            if rec.len() != n + 1 {
                return Err(parse_err(&file, line, &format!("expected {} fields", n + 1)));
            }
            time_ids.push(
                rec[0]
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(&file, line, "bad time id"))?,
            );
            for field in rec.iter().skip(1) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(&file, line, "bad speed"))?;
                flat.push(v);
            }
        }
        let values = Array2::from_shape_vec((time_ids.len(), n), flat).expect("row lengths checked");
        let mut out = Self::with_time_ids(values, node_ids, time_ids)?;
        let mut normalization = None;
        if meta_path.exists() {
            let meta: SpeedMeta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
            out.interval_minutes = meta.interval_minutes;
            normalization = meta.normalization;
        }
        Ok((out, normalization))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalization_round_trip() {
        let v = array![[10.0, 20.0], [30.0, 50.0]];
        let norm = Normalization::fit(v.view()).unwrap();
        assert_eq!(norm.normalize(10.0), 0.0);
        assert_eq!(norm.normalize(50.0), 1.0);
        assert_eq!(norm.denormalize(0.5), 30.0);
    }

    #[test]
    fn constant_series_gets_unit_span() {
        let norm = Normalization::fit(array![[4.0, 4.0]].view()).unwrap();
        assert_eq!(norm.span(), 1.0);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = SpeedTensor::new(array![[1.5, 2.0], [3.25, 4.0]], vec!["a".into(), "b".into()]).unwrap();
        let norm = Normalization::fit(s.values.view()).unwrap();
        let (p, m) = (dir.path().join("s.csv"), dir.path().join("s.json"));
        s.write_csv(&p, &m, Some(norm)).unwrap();
        let (back, n) = SpeedTensor::read_csv(&p, &m).unwrap();
        assert_eq!(back, s);
        assert_eq!(n, Some(norm));
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        fs::write(&p, "time_id,a\n0,1.0\n1,oops\n").unwrap();
        let err = SpeedTensor::read_csv(&p, &dir.path().join("none.json")).unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");
    }
}
