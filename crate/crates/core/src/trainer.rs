//! Loss, gradients, gradient checking and the training loop.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Normalization, SpeedTensor};
use crate::embed::KnowledgeVectors;
use crate::error::{input_err, shape_err, Error, Result};
use crate::graph::PropagationMatrix;
use crate::metrics::{evaluate, evaluate_per_step, MetricReport};
use crate::model::{ForecastModel, Series};
use crate::optim::{central_differences, relative_error, Adam, AdamConfig, ParamSet};

/// Time-of-day period of the 15-minute sampling grid.
pub const STEPS_PER_DAY: usize = 96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            epochs: 300,
            train_fraction: 0.8,
            seed: 0,
            weight_decay: 1.5e-3,
        }
    }
}

/// `mean((pred - truth)²) + weight_decay * ‖θ‖² / 2`.
pub fn loss(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>, model: &ForecastModel, weight_decay: f64) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return shape_err(format!("prediction {:?} vs truth {:?}", pred.dim(), truth.dim()));
    }
    let mse = (&pred - &truth).mapv(|v| v * v).mean().unwrap_or(0.0);
    Ok(mse + 0.5 * weight_decay * model.sum_squares())
}

/// Loss and its exact gradient over the windows starting at `starts`.
pub fn gradients(
    model: &ForecastModel,
    series: &Series<'_>,
    starts: &[usize],
    kv: &KnowledgeVectors,
    p: &PropagationMatrix,
    weight_decay: f64,
) -> Result<(f64, ForecastModel)> {
    let mut grad = model.zeros_like();
    let (mse, _) = model.mse_backward(series, starts, kv, p, &mut grad)?;
    if weight_decay != 0.0 {
        grad.add_scaled(model, weight_decay);
    }
    Ok((mse + 0.5 * weight_decay * model.sum_squares(), grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub n_checked: usize,
}

/// Central differences against the analytic gradient, on every coordinate or
/// on a seeded subset of `max_coords` when the model is larger.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_check(
    model: &ForecastModel,
    series: &Series<'_>,
    starts: &[usize],
    kv: &KnowledgeVectors,
    p: &PropagationMatrix,
    weight_decay: f64,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if eps.is_nan() || eps <= 0.0 {
        return input_err("finite-difference step must be positive");
    }
    let (_, grad) = gradients(model, series, starts, kv, p, weight_decay)?;
    let analytic = grad.to_flat();
    let x0 = model.to_flat();
    let coords: Vec<usize> = if x0.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = index::sample(&mut rng, x0.len(), max_coords).into_vec();
        c.sort_unstable();
        c
    } else {
        (0..x0.len()).collect()
    };
    let truth = model.targets(series, starts);
    let objective = |flat: &[f64]| {
        let mut m = model.clone();
        m.set_flat(flat);
        let pred = m.predict(series, starts, kv, p).expect("forward succeeded at x0");
        loss(pred.view(), truth.view(), &m, weight_decay).unwrap()
    };
    let numeric = central_differences(objective, &x0, &coords, eps);
    let (worst_coord, max_rel_error) = coords
        .iter()
        .zip(&numeric)
        .map(|(&i, &n)| (i, relative_error(analytic[i], n)))
        .fold((0, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
    Ok(GradCheckReport {
        max_rel_error,
        worst_coord,
        n_checked: coords.len(),
    })
}

/// Normalized series split chronologically into training and validation
/// window starts.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub normalization: Normalization,
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    pub time_ids: Vec<usize>,
    /// First step that belongs to the validation period.
    pub split: usize,
    pub train_starts: Vec<usize>,
    pub val_starts: Vec<usize>,
}

impl Prepared {
    /// Bounds are fitted on the training period of the clean targets. Every
    /// training window, targets included, ends before `split`; every
    /// validation window starts at or after it.
    pub fn new(
        targets: &SpeedTensor,
        inputs: Option<&SpeedTensor>,
        window: usize,
        horizon: usize,
        train_fraction: f64,
    ) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return input_err(format!("train_fraction {train_fraction} outside (0, 1)"));
        }
        let inputs = inputs.unwrap_or(targets);
        if inputs.values.dim() != targets.values.dim() {
            return shape_err("perturbed inputs differ in shape from targets");
        }
        let t = targets.n_steps();
        let split = (train_fraction * t as f64).floor() as usize;
        let span = window + horizon;
        if split < span || t - split < span {
            return input_err(format!(
                "{t} steps split at {split} leave no room for a {window}+{horizon} window on both sides"
            ));
        }
        let normalization = Normalization::fit(targets.values.slice(s![..split, ..]))?;
        Ok(Self {
            normalization,
            inputs: inputs.values.mapv(|v| normalization.normalize(v)),
            targets: targets.values.mapv(|v| normalization.normalize(v)),
            time_ids: targets.time_ids.clone(),
            split,
            train_starts: (0..=split - span).collect(),
            val_starts: (split..=t - span).collect(),
        })
    }

    pub fn series(&self) -> Series<'_> {
        Series::new(self.inputs.view(), self.targets.view(), &self.time_ids).expect("shapes fixed at construction")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub report: MetricReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ForecastModel,
    pub history: Vec<EpochRecord>,
}

const EVAL_CHUNK: usize = 256;

/// Denormalized `(pred, truth)` over the given window starts.
pub fn forecast(
    model: &ForecastModel,
    data: &Prepared,
    starts: &[usize],
    kv: &KnowledgeVectors,
    p: &PropagationMatrix,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let series = data.series();
    let n = series.n_nodes();
    let hz = model.config.horizon;
    let mut pred = Array2::zeros((starts.len() * n, hz));
    for (c, chunk) in starts.chunks(EVAL_CHUNK).enumerate() {
        let rows = s![c * EVAL_CHUNK * n..(c * EVAL_CHUNK + chunk.len()) * n, ..];
        pred.slice_mut(rows).assign(&model.predict(&series, chunk, kv, p)?);
    }
    let norm = data.normalization;
    let truth = model.targets(&series, starts).mapv(|v| norm.denormalize(v));
    Ok((pred.mapv(|v| norm.denormalize(v)), truth))
}

pub fn evaluate_model(
    model: &ForecastModel,
    data: &Prepared,
    kv: &KnowledgeVectors,
    p: &PropagationMatrix,
) -> Result<MetricReport> {
    let (pred, truth) = forecast(model, data, &data.val_starts, kv, p)?;
    evaluate(pred.view(), truth.view())
}

pub fn evaluate_model_per_step(
    model: &ForecastModel,
    data: &Prepared,
    kv: &KnowledgeVectors,
    p: &PropagationMatrix,
) -> Result<Vec<MetricReport>> {
    let (pred, truth) = forecast(model, data, &data.val_starts, kv, p)?;
    evaluate_per_step(pred.view(), truth.view())
}

/// Adam on shuffled mini-batches of training windows; validation metrics
/// after every epoch. Zero epochs returns the model unchanged.
pub fn train(
    model: ForecastModel,
    data: &Prepared,
    kv: &KnowledgeVectors,
    p: &PropagationMatrix,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(model, data, kv, p, config, |_| {})
}

pub fn train_with_progress(
    mut model: ForecastModel,
    data: &Prepared,
    kv: &KnowledgeVectors,
    p: &PropagationMatrix,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if config.batch_size == 0 {
        return input_err("batch_size must be positive");
    }
    let series = data.series();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        model.n_params(),
    );
    let mut starts = data.train_starts.clone();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        starts.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in starts.chunks(config.batch_size) {
            let (l, grad) = gradients(&model, &series, batch, kv, p, config.weight_decay).map_err(|e| match e {
                Error::Numeric { layer } => Error::Training {
                    epoch,
                    msg: format!("non-finite value in {layer}"),
                },
                other => other,
            })?;
            adam.step(&mut model, &grad);
            total += l;
            batches += 1;
        }
        let train_loss = total / batches as f64;
        if !train_loss.is_finite() || !model.all_finite() {
            return Err(Error::Training {
                epoch,
                msg: "loss became non-finite".into(),
            });
        }
        let report = evaluate_model(&model, data, kv, p)?;
        let rec = EpochRecord {
            epoch,
            train_loss,
            report,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome { model, history })
}

/// `epoch,train_loss,rmse,mae,accuracy,r2,var`.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "rmse", "mae", "accuracy", "r2", "var"])?;
    for rec in history {
        let mut row = vec![rec.epoch.to_string(), rec.train_loss.to_string()];
        row.extend(rec.report.csv_fields());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean training-period speed per node and time-of-day slot, used as the
/// forecast for every validation target with the same slot.
pub fn historical_average(
    data: &Prepared,
    window: usize,
    horizon: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = data.targets.ncols();
    let norm = data.normalization;
    let mut sums = Array2::<f64>::zeros((STEPS_PER_DAY, n));
    let mut counts = vec![0usize; STEPS_PER_DAY];
    for k in 0..data.split {
        let slot = data.time_ids[k] % STEPS_PER_DAY;
        sums.row_mut(slot).scaled_add(1.0, &data.targets.row(k));
        counts[slot] += 1;
    }
    let overall = data.targets.slice(s![..data.split, ..]).mean_axis(ndarray::Axis(0)).unwrap();
    let mut pred = Array2::zeros((data.val_starts.len() * n, horizon));
    let mut truth = Array2::zeros(pred.raw_dim());
    for (b, &s0) in data.val_starts.iter().enumerate() {
        for j in 0..horizon {
            let k = s0 + window + j;
            let slot = data.time_ids[k] % STEPS_PER_DAY;
            let mean = if counts[slot] > 0 {
                sums.row(slot).mapv(|v| v / counts[slot] as f64)
            } else {
                overall.clone()
            };
            pred.slice_mut(s![b * n..(b + 1) * n, j]).assign(&mean.mapv(|v| norm.denormalize(v)));
            truth
                .slice_mut(s![b * n..(b + 1) * n, j])
                .assign(&data.targets.row(k).mapv(|v| norm.denormalize(v)));
        }
    }
    Ok((pred, truth))
}

pub fn historical_average_report(data: &Prepared, window: usize, horizon: usize) -> Result<MetricReport> {
    let (pred, truth) = historical_average(data, window, horizon)?;
    evaluate(pred.view(), truth.view())
}
