//! Content-addressed pipeline stages: scenario, knowledge graph, embedding
//! and training. Every stage writes into `cache/<stage>/<key>/` and results
//! are always read back from disk, so a cache hit and a fresh run yield the
//! same values.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use anyhow::{Context, Result};
use kstgcn::data::SpeedTensor;
use kstgcn::embed::{extract_knowledge_vectors, train_krear, EmbedConfig, EmbeddingTable, KnowledgeVectors};
use kstgcn::graph::PropagationMatrix;
use kstgcn::kg::{build_ckg, CkgOptions, TripleStore};
use kstgcn::metrics::MetricReport;
use kstgcn::model::{ForecastModel, ModelConfig};
use kstgcn::synth::{perturb, CityScenario, NoiseSpec};
use kstgcn::trainer::{
    evaluate_model, evaluate_model_per_step, historical_average, train, write_history_csv, Prepared,
    TrainConfig,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

/// Hex SHA-256 over length-prefixed parts.
pub fn fingerprint(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())[..20].to_string()
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("config types serialize")
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Output root holding the stage cache.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root })
    }

    pub fn stage_dir(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join("cache").join(stage).join(key)
    }

    /// Runs `produce` into a scratch directory that is renamed into place,
    /// unless the stage directory already exists.
    fn ensure(&self, stage: &str, key: &str, produce: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
        let dir = self.stage_dir(stage, key);
        if dir.is_dir() {
            return Ok(dir);
        }
        let parent = dir.parent().unwrap();
        fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(
            ".tmp-{key}-{}-{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::create_dir_all(&tmp)?;
        produce(&tmp).with_context(|| format!("stage {stage} ({key})"))?;
        if fs::rename(&tmp, &dir).is_err() {
            // another worker finished the same stage first
            fs::remove_dir_all(&tmp).ok();
            if !dir.is_dir() {
                anyhow::bail!("could not publish stage {stage} ({key})");
            }
        }
        Ok(dir)
    }
}

fn hash_dir(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut parts = Vec::new();
    for p in &names {
        parts.push(p.file_name().unwrap().to_string_lossy().as_bytes().to_vec());
        parts.push(fs::read(p)?);
    }
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    Ok(fingerprint(&refs))
}

pub struct ScenarioArtifact {
    pub key: String,
    pub scenario: CityScenario,
}

pub fn scenario_stage(ws: &Workspace, cfg: &ExperimentConfig, seed: u64) -> Result<ScenarioArtifact> {
    if let Some(path) = &cfg.scenario_path {
        let key = hash_dir(path)?;
        let scenario = CityScenario::load(path).with_context(|| format!("loading scenario {}", path.display()))?;
        return Ok(ScenarioArtifact { key, scenario });
    }
    let mut sc = cfg.scenario.clone();
    sc.seed = seed;
    let key = fingerprint(&[b"scenario", &json_bytes(&sc)]);
    let dir = ws.ensure("scenario", &key, |tmp| Ok(CityScenario::generate(&sc)?.save(tmp)?))?;
    Ok(ScenarioArtifact {
        key,
        scenario: CityScenario::load(&dir)?,
    })
}

pub struct CkgArtifact {
    pub key: String,
    pub store: TripleStore,
    pub time_index: Vec<usize>,
}

pub fn ckg_stage(ws: &Workspace, scenario: &ScenarioArtifact, opts: &CkgOptions) -> Result<CkgArtifact> {
    let key = fingerprint(&[b"ckg", scenario.key.as_bytes(), &json_bytes(opts)]);
    let sc = &scenario.scenario;
    let time_index = sc.speeds.time_ids.clone();
    let dir = ws.ensure("ckg", &key, |tmp| {
        let store = build_ckg(&sc.graph, &sc.poi, &sc.weather, &time_index, *opts)?;
        Ok(store.save(tmp)?)
    })?;
    Ok(CkgArtifact {
        key,
        store: TripleStore::load(&dir)?,
        time_index,
    })
}

pub struct EmbedArtifact {
    pub key: String,
    pub table: EmbeddingTable,
}

pub fn embed_stage(ws: &Workspace, ckg: &CkgArtifact, config: &EmbedConfig) -> Result<EmbedArtifact> {
    let key = fingerprint(&[b"embed", ckg.key.as_bytes(), &json_bytes(config)]);
    let dir = ws.ensure("embed", &key, |tmp| {
        let out = train_krear(&ckg.store, config)?;
        out.table.save(tmp, &ckg.store)?;
        let mut w = csv::Writer::from_path(tmp.join("loss.csv"))?;
        w.write_record(["epoch", "loss"])?;
        for (e, l) in out.loss_history.iter().enumerate() {
            w.write_record([e.to_string(), l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    Ok(EmbedArtifact {
        key,
        table: EmbeddingTable::load(&dir, &ckg.store)?,
    })
}

/// Which knowledge pathways feed the fusion layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Knowledge {
    None,
    StaticOnly,
    DynamicOnly,
    Both,
}

impl Knowledge {
    pub fn keeps(self) -> (bool, bool) {
        match self {
            Knowledge::None => (false, false),
            Knowledge::StaticOnly => (true, false),
            Knowledge::DynamicOnly => (false, true),
            Knowledge::Both => (true, true),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Predictor {
    /// Training-period mean for the same node and time-of-day slot.
    HistoricalAverage,
    /// KS-Cell plus GRU; `graph = false` replaces propagation by identity.
    Network { knowledge: Knowledge, graph: bool },
}

/// Everything that distinguishes one grid cell from the experiment defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub predictor: Predictor,
    pub horizon: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub noise: Option<NoiseSpec>,
}

impl RunSpec {
    pub fn full(cfg: &ExperimentConfig) -> Self {
        Self {
            predictor: Predictor::Network {
                knowledge: Knowledge::Both,
                graph: true,
            },
            horizon: cfg.model.horizon,
            hidden: cfg.model.d_h,
            embed_dim: cfg.embed.dim,
            noise: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub pooled: MetricReport,
    pub per_step: Vec<MetricReport>,
}

pub struct Upstream {
    pub scenario: ScenarioArtifact,
    pub ckg: CkgArtifact,
    pub embed: EmbedArtifact,
}

pub fn upstream(ws: &Workspace, cfg: &ExperimentConfig, seed: u64, embed_dim: usize) -> Result<Upstream> {
    let scenario = scenario_stage(ws, cfg, seed)?;
    let ckg = ckg_stage(ws, &scenario, &cfg.ckg)?;
    let embed_cfg = EmbedConfig {
        dim: embed_dim,
        seed,
        ..cfg.embed.clone()
    };
    let embed = embed_stage(ws, &ckg, &embed_cfg)?;
    Ok(Upstream { scenario, ckg, embed })
}

pub fn knowledge_vectors(up: &Upstream) -> Result<KnowledgeVectors> {
    let sc = &up.scenario.scenario;
    Ok(extract_knowledge_vectors(
        &up.embed.table,
        &up.ckg.store,
        sc.graph.node_ids(),
        &up.ckg.time_index,
    )?)
}

/// Model and training configuration actually used for a run.
pub fn resolved_configs(cfg: &ExperimentConfig, spec: &RunSpec, seed: u64) -> (ModelConfig, TrainConfig) {
    let (ks, kd) = match spec.predictor {
        Predictor::Network { knowledge, .. } => knowledge.keeps(),
        Predictor::HistoricalAverage => (false, false),
    };
    let model = ModelConfig {
        d_s: if ks { spec.embed_dim } else { 0 },
        d_d: if kd { spec.embed_dim } else { 0 },
        d_h: spec.hidden,
        horizon: spec.horizon,
        ..cfg.model.clone()
    };
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    (model, train)
}

fn prepared(cfg: &ExperimentConfig, sc: &CityScenario, spec: &RunSpec, window: usize, seed: u64) -> Result<Prepared> {
    let clean = Prepared::new(&sc.speeds, None, window, spec.horizon, cfg.train.train_fraction)?;
    let Some(noise) = spec.noise else {
        return Ok(clean);
    };
    let noisy: SpeedTensor = perturb(&sc.speeds, noise, clean.normalization.span(), seed)?;
    // bounds stay fitted on the clean targets so metrics share one scale
    let mut data = Prepared::new(&sc.speeds, Some(&noisy), window, spec.horizon, cfg.train.train_fraction)?;
    if cfg.perturb_labels {
        data.targets = data.inputs.clone();
    }
    Ok(data)
}

/// Trains (or reloads) one `(spec, seed)` run and returns its validation
/// metrics.
pub fn run_stage(ws: &Workspace, cfg: &ExperimentConfig, spec: &RunSpec, seed: u64) -> Result<RunMetrics> {
    let up = upstream(ws, cfg, seed, spec.embed_dim)?;
    let (model_cfg, train_cfg) = resolved_configs(cfg, spec, seed);
    let key = fingerprint(&[
        b"train",
        up.embed.key.as_bytes(),
        &json_bytes(spec),
        &json_bytes(&model_cfg),
        &json_bytes(&train_cfg),
        &[cfg.perturb_labels as u8],
    ]);
    let dir = ws.ensure("train", &key, |tmp| {
        let sc = &up.scenario.scenario;
        let data = prepared(cfg, sc, spec, model_cfg.window, seed)?;
        let metrics = match spec.predictor {
            Predictor::HistoricalAverage => {
                let (pred, truth) = historical_average(&data, model_cfg.window, spec.horizon)?;
                RunMetrics {
                    pooled: kstgcn::metrics::evaluate(pred.view(), truth.view())?,
                    per_step: kstgcn::metrics::evaluate_per_step(pred.view(), truth.view())?,
                }
            }
            Predictor::Network { knowledge, graph } => {
                let (ks, kd) = knowledge.keeps();
                let kv = knowledge_vectors(&up)?.ablate(ks, kd);
                let p = if graph {
                    PropagationMatrix::from_graph(&sc.graph)
                } else {
                    PropagationMatrix::identity(sc.graph.n_nodes())
                };
                let model = ForecastModel::init(model_cfg.clone(), seed)?;
                let out = train(model, &data, &kv, &p, &train_cfg)?;
                write_history_csv(&tmp.join("history.csv"), &out.history)?;
                out.model.save(&tmp.join("model"))?;
                RunMetrics {
                    pooled: evaluate_model(&out.model, &data, &kv, &p)?,
                    per_step: evaluate_model_per_step(&out.model, &data, &kv, &p)?,
                }
            }
        };
        fs::write(tmp.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
        fs::write(tmp.join("run.json"), serde_json::to_string_pretty(&(spec, &model_cfg, &train_cfg))?)?;
        Ok(())
    })?;
    let text = fs::read_to_string(dir.join("metrics.json"))?;
    Ok(serde_json::from_str(&text)?)
}
