use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kstgcn::embed::EmbedConfig;
use kstgcn::kg::CkgOptions;
use kstgcn::model::ModelConfig;
use kstgcn::synth::ScenarioConfig;
use kstgcn::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// none / static-only / dynamic-only / both knowledge pathways.
    Ablate,
    /// One model per forecast horizon.
    Horizon,
    /// Clean inputs plus the Gaussian and Poisson perturbation grids.
    Noise,
    /// Hidden-unit and embedding-dimension grids.
    Hparam,
    /// Historical average, GRU-only, knowledge-free GCN+GRU and the full model.
    Baseline,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Ablate => "ablate",
            Mode::Horizon => "horizon",
            Mode::Noise => "noise",
            Mode::Hparam => "hparam",
            Mode::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grids {
    pub horizons: Vec<usize>,
    pub hidden_units: Vec<usize>,
    pub embed_dims: Vec<usize>,
    pub gaussian_sigmas: Vec<f64>,
    pub poisson_lambdas: Vec<f64>,
}

impl Default for Grids {
    fn default() -> Self {
        Self {
            horizons: vec![1, 2, 3, 4],
            hidden_units: vec![18, 32, 64, 128, 256],
            embed_dims: vec![5, 10, 15, 20, 30],
            gaussian_sigmas: vec![0.2, 0.4, 0.6, 0.8, 1.0, 2.0],
            poisson_lambdas: vec![1.0, 2.0, 4.0, 8.0, 16.0],
        }
    }
}

/// One JSON document describing a whole experiment. Per-run seeds override
/// the `seed` fields of the scenario, embedding and training sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Existing scenario directory; when absent the scenario is generated.
    pub scenario_path: Option<PathBuf>,
    pub scenario: ScenarioConfig,
    pub ckg: CkgOptions,
    pub embed: EmbedConfig,
    /// `d_s` and `d_d` are derived from the embedding width and the cell.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mode: Mode,
    pub grids: Grids,
    /// Perturb labels as well as inputs.
    pub perturb_labels: bool,
    /// Report metrics per forecast step instead of pooled.
    pub per_step: bool,
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario_path: None,
            scenario: ScenarioConfig::default(),
            ckg: CkgOptions::default(),
            embed: EmbedConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            mode: Mode::Ablate,
            grids: Grids::default(),
            perturb_labels: false,
            per_step: false,
            seeds: vec![0, 1, 2, 3, 4],
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grids;
        if self.seeds.is_empty() {
            bail!("seed list is empty");
        }
        if g.horizons.is_empty() || g.hidden_units.is_empty() || g.embed_dims.is_empty() {
            bail!("horizon, hidden-unit and embedding-dimension grids must be nonempty");
        }
        if g.gaussian_sigmas.is_empty() || g.poisson_lambdas.is_empty() {
            bail!("noise grids must be nonempty");
        }
        if let Some(p) = &self.scenario_path {
            if !p.is_dir() {
                bail!("scenario path {} does not exist", p.display());
            }
        }
        Ok(())
    }
}

/// Parses `1,2,3`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|t| t.trim().parse::<u64>().with_context(|| format!("bad seed {t:?}")))
        .collect()
}
