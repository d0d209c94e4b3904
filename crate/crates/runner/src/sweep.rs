//! Grid sweeps over seeds, writing `results.csv` and `summary.csv`.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use kstgcn::metrics::{MetricReport, METRIC_NAMES};
use kstgcn::synth::NoiseSpec;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode};
use crate::pipeline::{run_stage, upstream, Knowledge, Predictor, RunSpec, Workspace};

/// One grid point. `family` groups cells that share an x axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub family: String,
    pub x: f64,
    pub spec: RunSpec,
}

fn network(knowledge: Knowledge, graph: bool) -> Predictor {
    Predictor::Network { knowledge, graph }
}

/// Cells of a mode in their fixed reporting order.
pub fn cells(cfg: &ExperimentConfig, mode: Mode) -> Vec<Cell> {
    let base = RunSpec::full(cfg);
    let cell = |name: String, family: &str, x: f64, spec: RunSpec| Cell {
        name,
        family: family.to_string(),
        x,
        spec,
    };
    let with = |predictor| RunSpec {
        predictor,
        ..base.clone()
    };
    let g = &cfg.grids;
    match mode {
        Mode::Ablate => [
            ("none", Knowledge::None),
            ("static-only", Knowledge::StaticOnly),
            ("dynamic-only", Knowledge::DynamicOnly),
            ("both", Knowledge::Both),
        ]
        .into_iter()
        .enumerate()
        .map(|(i, (name, k))| cell(name.into(), "ablate", i as f64, with(network(k, true))))
        .collect(),
        Mode::Horizon => g
            .horizons
            .iter()
            .map(|&h| {
                let spec = RunSpec {
                    horizon: h,
                    ..base.clone()
                };
                cell(format!("h{h}"), "horizon", (h * 15) as f64, spec)
            })
            .collect(),
        Mode::Noise => {
            let mut out = vec![cell("clean".into(), "clean", 0.0, base.clone())];
            for &sigma in &g.gaussian_sigmas {
                let spec = RunSpec {
                    noise: Some(NoiseSpec::Gaussian { sigma }),
                    ..base.clone()
                };
                out.push(cell(format!("gaussian-{sigma}"), "gaussian", sigma, spec));
            }
            for &lambda in &g.poisson_lambdas {
                let spec = RunSpec {
                    noise: Some(NoiseSpec::Poisson { lambda }),
                    ..base.clone()
                };
                out.push(cell(format!("poisson-{lambda}"), "poisson", lambda, spec));
            }
            out
        }
        Mode::Hparam => {
            let mut out = Vec::new();
            for &d in &g.hidden_units {
                let spec = RunSpec {
                    hidden: d,
                    ..base.clone()
                };
                out.push(cell(format!("hidden-{d}"), "hidden", d as f64, spec));
            }
            for &d in &g.embed_dims {
                let spec = RunSpec {
                    embed_dim: d,
                    ..base.clone()
                };
                out.push(cell(format!("embed-{d}"), "embed", d as f64, spec));
            }
            out
        }
        Mode::Baseline => [
            ("ha", Predictor::HistoricalAverage),
            ("gru-only", network(Knowledge::None, false)),
            ("gcn-gru", network(Knowledge::None, true)),
            ("full", network(Knowledge::Both, true)),
        ]
        .into_iter()
        .enumerate()
        .map(|(i, (name, p))| cell(name.into(), "baseline", i as f64, with(p)))
        .collect(),
    }
}

/// One line of `results.csv`; `step` is 0 for pooled metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub mode: String,
    pub cell: String,
    pub family: String,
    pub x: f64,
    pub step: usize,
    pub seed: u64,
    pub report: MetricReport,
}

const HEADER: [&str; 11] = [
    "mode", "cell", "family", "x", "step", "seed", "rmse", "mae", "accuracy", "r2", "var",
];

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(HEADER)?;
    for r in rows {
        let mut rec = vec![
            r.mode.clone(),
            r.cell.clone(),
            r.family.clone(),
            r.x.to_string(),
            r.step.to_string(),
            r.seed.to_string(),
        ];
        rec.extend(r.report.csv_fields());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_metric(s: &str) -> Result<Option<f64>> {
    if s == "*" {
        Ok(None)
    } else {
        Ok(Some(s.parse().with_context(|| format!("bad metric {s:?}"))?))
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).context("short results row");
        let num = |i: usize| -> Result<f64> { parse_metric(f(i)?)?.context("required metric is undefined") };
        rows.push(ResultRow {
            mode: f(0)?.to_string(),
            cell: f(1)?.to_string(),
            family: f(2)?.to_string(),
            x: f(3)?.parse()?,
            step: f(4)?.parse()?,
            seed: f(5)?.parse()?,
            report: MetricReport {
                rmse: num(6)?,
                mae: num(7)?,
                accuracy: num(8)?,
                r2: parse_metric(f(9)?)?,
                var: parse_metric(f(10)?)?,
            },
        });
    }
    Ok(rows)
}

/// Median of the defined values; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Per-seed medians per `(cell, step)` in first-appearance order.
pub fn write_summary(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut keys: Vec<(&ResultRow, Vec<&ResultRow>)> = Vec::new();
    for r in rows {
        match keys.iter_mut().find(|(k, _)| k.cell == r.cell && k.step == r.step && k.mode == r.mode) {
            Some((_, group)) => group.push(r),
            None => keys.push((r, vec![r])),
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["mode", "cell", "family", "x", "step", "n_seeds"];
    header.extend(METRIC_NAMES);
    w.write_record(&header)?;
    for (k, group) in keys {
        let mut rec = vec![
            k.mode.clone(),
            k.cell.clone(),
            k.family.clone(),
            k.x.to_string(),
            k.step.to_string(),
            group.len().to_string(),
        ];
        for m in 0..METRIC_NAMES.len() {
            let vals: Vec<f64> = group.iter().filter_map(|r| r.report.values()[m]).collect();
            rec.push(median(&vals).map_or_else(|| "*".to_string(), |v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every `(cell, seed)` of the configured mode. On failure the error
/// chain goes to `error.log` and completed cache entries are kept.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ResultRow>> {
    let ws = Workspace::new(out)?;
    let result = sweep_inner(cfg, &ws);
    match &result {
        Ok(rows) => {
            write_results(&out.join("results.csv"), rows)?;
            write_summary(&out.join("summary.csv"), rows)?;
            fs::remove_file(out.join("error.log")).ok();
        }
        Err(e) => {
            fs::write(out.join("error.log"), format!("{e:?}\n")).ok();
        }
    }
    result
}

fn sweep_inner(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let cells = cells(cfg, cfg.mode);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .context("building worker pool")?;

    // shared upstream stages first so workers never race on them
    let mut upstream_keys: Vec<(u64, usize)> = Vec::new();
    for &seed in &cfg.seeds {
        for c in &cells {
            if !upstream_keys.contains(&(seed, c.spec.embed_dim)) {
                upstream_keys.push((seed, c.spec.embed_dim));
            }
        }
    }
    pool.install(|| {
        upstream_keys
            .par_iter()
            .map(|&(seed, dim)| upstream(ws, cfg, seed, dim).map(|_| ()))
            .collect::<Result<Vec<_>>>()
    })?;

    let jobs: Vec<(&Cell, u64)> = cells.iter().flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s))).collect();
    let metrics = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, seed)| {
                run_stage(ws, cfg, &c.spec, seed).with_context(|| format!("cell {} seed {seed}", c.name))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mode = cfg.mode.name().to_string();
    let mut rows = Vec::new();
    for (&(c, seed), m) in jobs.iter().zip(metrics) {
        let row = |step: usize, report: MetricReport| ResultRow {
            mode: mode.clone(),
            cell: c.name.clone(),
            family: c.family.clone(),
            x: c.x,
            step,
            seed,
            report,
        };
        if cfg.per_step {
            rows.extend(m.per_step.iter().enumerate().map(|(j, r)| row(j + 1, *r)));
        } else {
            rows.push(row(0, m.pooled));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even_empty() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn cell_counts_follow_grids() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cells(&cfg, Mode::Ablate).len(), 4);
        assert_eq!(cells(&cfg, Mode::Horizon).len(), 4);
        assert_eq!(cells(&cfg, Mode::Noise).len(), 1 + 6 + 5);
        assert_eq!(cells(&cfg, Mode::Hparam).len(), 10);
        assert_eq!(cells(&cfg, Mode::Baseline).len(), 4);
    }

    #[test]
    fn results_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let row = ResultRow {
            mode: "noise".into(),
            cell: "gaussian-0.2".into(),
            family: "gaussian".into(),
            x: 0.2,
            step: 0,
            seed: 3,
            report: MetricReport {
                rmse: 1.5,
                mae: 1.25,
                accuracy: 0.9,
                r2: None,
                var: Some(0.1),
            },
        };
        write_results(&path, std::slice::from_ref(&row)).unwrap();
        assert_eq!(read_results(&path).unwrap(), vec![row]);
    }
}
