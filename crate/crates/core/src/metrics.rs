//! Forecast error metrics over denormalized speeds.

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// `r2` and `var` are `None` when the truth is constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    pub accuracy: f64,
    pub r2: Option<f64>,
    pub var: Option<f64>,
}

pub const METRIC_NAMES: [&str; 5] = ["rmse", "mae", "accuracy", "r2", "var"];

impl MetricReport {
    /// Values in `METRIC_NAMES` order.
    pub fn values(&self) -> [Option<f64>; 5] {
        [Some(self.rmse), Some(self.mae), Some(self.accuracy), self.r2, self.var]
    }

    /// CSV fields in `rmse,mae,accuracy,r2,var` order; undefined values are `*`.
    pub fn csv_fields(&self) -> Vec<String> {
        self.values()
            .iter()
            .map(|v| v.map_or_else(|| "*".to_string(), |x| x.to_string()))
            .collect()
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

pub fn evaluate(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<MetricReport> {
    if pred.dim() != truth.dim() {
        return shape_err(format!("prediction {:?} vs truth {:?}", pred.dim(), truth.dim()));
    }
    if pred.is_empty() {
        return shape_err("cannot evaluate an empty matrix");
    }
    let err: Vec<f64> = truth.iter().zip(pred.iter()).map(|(t, p)| t - p).collect();
    let sse: f64 = err.iter().map(|e| e * e).sum();
    let rmse = (sse / err.len() as f64).sqrt();
    let mae = mean(err.iter().map(|e| e.abs()));
    let truth_norm = truth.iter().map(|t| t * t).sum::<f64>().sqrt();
    let accuracy = 1.0 - sse.sqrt() / truth_norm;

    let t_mean = mean(truth.iter().copied());
    let ss_tot: f64 = truth.iter().map(|t| (t - t_mean).powi(2)).sum();
    let (r2, var) = if ss_tot > 0.0 {
        let e_mean = mean(err.iter().copied());
        let ss_err_centered: f64 = err.iter().map(|e| (e - e_mean).powi(2)).sum();
        (Some(1.0 - sse / ss_tot), Some(1.0 - ss_err_centered / ss_tot))
    } else {
        (None, None)
    };
    Ok(MetricReport {
        rmse,
        mae,
        accuracy,
        r2,
        var,
    })
}

/// One report per column (forecast step).
pub fn evaluate_per_step(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<Vec<MetricReport>> {
    if pred.dim() != truth.dim() {
        return shape_err(format!("prediction {:?} vs truth {:?}", pred.dim(), truth.dim()));
    }
    pred.axis_iter(Axis(1))
        .zip(truth.axis_iter(Axis(1)))
        .map(|(p, t)| evaluate(p.insert_axis(Axis(1)), t.insert_axis(Axis(1))))
        .collect()
}
