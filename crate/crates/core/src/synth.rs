//! Synthetic city: road network, POI counts, a sticky weather chain and a
//! traffic simulator whose speeds depend on all three.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::SpeedTensor;
use crate::error::{input_err, Result};
use crate::graph::RoadGraph;
use crate::kg::{read_weather_csv, write_weather_csv, PoiTable, WeatherClass, POI_CATEGORIES};
use crate::trainer::STEPS_PER_DAY;

pub const MIN_SPEED: f64 = 5.0;
pub const MAX_SPEED: f64 = 80.0;

/// Speed penalty per weather class in km/h, in `WeatherClass::ALL` order.
pub const WEATHER_PENALTY: [f64; 5] = [0.0, 1.0, 4.0, 6.0, 12.0];

/// Class frequencies that shape the off-diagonal transition mass.
pub const WEATHER_PRIOR: [f64; 5] = [0.4, 0.3, 0.1, 0.15, 0.05];

pub const WEATHER_STAY: f64 = 0.9;

/// Log-scale location of each POI category's count distribution.
const POI_LOG_MEAN: [f64; 9] = [1.8, 1.4, 1.5, 0.9, 0.7, 1.3, 0.5, 0.8, 1.1];
const POI_LOG_SD: f64 = 1.1;
/// Contribution of each category to a section's traffic load.
const POI_LOAD_WEIGHT: [f64; 9] = [1.0, 0.8, 1.0, 0.6, 0.7, 0.5, 0.4, 0.5, 0.3];
/// Cap on load relative to the city mean.
const MAX_RELATIVE_LOAD: f64 = 3.0;

const BASE_SPEED: f64 = 52.0;
const DIURNAL_AMPLITUDE: f64 = 10.0;
/// Peak rush-hour slowdown of a section with mean load, km/h.
const RUSH_SLOWDOWN: f64 = 10.0;
const RUSH_SLOTS: [f64; 2] = [32.0, 72.0];
const RUSH_WIDTH: f64 = 4.0;
const NEIGHBOR_COUPLING: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EffectConfig {
    pub poi: f64,
    pub weather: f64,
    pub coupling: f64,
}

impl Default for EffectConfig {
    fn default() -> Self {
        Self {
            poi: 1.0,
            weather: 1.0,
            coupling: 1.0,
        }
    }
}

impl EffectConfig {
    pub fn off() -> Self {
        Self {
            poi: 0.0,
            weather: 0.0,
            coupling: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_nodes: usize,
    pub avg_degree: f64,
    pub t_steps: usize,
    pub sigma_obs: f64,
    pub effects: EffectConfig,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_nodes: 156,
            avg_degree: 3.0,
            t_steps: 31 * STEPS_PER_DAY,
            sigma_obs: 2.0,
            effects: EffectConfig::default(),
            seed: 0,
        }
    }
}

fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut a: usize) -> usize {
        while self.0[a] != a {
            self.0[a] = self.0[self.0[a]];
            a = self.0[a];
        }
        a
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Random geometric graph in the unit square: the `round(n * deg / 2)`
/// shortest pairs, then shortest bridges until connected. Returns node
/// positions alongside the graph.
pub fn generate_network_with_positions(n: usize, avg_degree: f64, seed: u64) -> Result<(RoadGraph, Vec<[f64; 2]>)> {
    if n < 2 {
        return input_err("network needs at least two nodes");
    }
    if avg_degree.is_nan() || avg_degree < 1.0 || avg_degree > (n - 1) as f64 {
        return input_err(format!("average degree {avg_degree} infeasible for {n} nodes"));
    }
    let mut rng = stream(seed, 1);
    let pos: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            let d = (pos[a][0] - pos[b][0]).powi(2) + (pos[a][1] - pos[b][1]).powi(2);
            pairs.push((d, a, b));
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let target = ((n as f64 * avg_degree) / 2.0).round() as usize;
    let mut edges: Vec<(usize, usize)> = pairs[..target].iter().map(|&(_, a, b)| (a, b)).collect();
    let mut uf = UnionFind((0..n).collect());
    for &(a, b) in &edges {
        uf.union(a, b);
    }
    for &(_, a, b) in &pairs[target..] {
        if uf.union(a, b) {
            edges.push((a, b));
        }
    }
    Ok((RoadGraph::new(n, &edges)?, pos))
}

pub fn generate_network(n: usize, avg_degree: f64, seed: u64) -> Result<RoadGraph> {
    Ok(generate_network_with_positions(n, avg_degree, seed)?.0)
}

/// Row-stochastic weather transitions: stay with probability 0.9, otherwise
/// move in proportion to the prior.
pub fn weather_transition_matrix() -> [[f64; 5]; 5] {
    let mut m = [[0.0; 5]; 5];
    for i in 0..5 {
        for j in 0..5 {
            m[i][j] = if i == j {
                WEATHER_STAY
            } else {
                (1.0 - WEATHER_STAY) * WEATHER_PRIOR[j] / (1.0 - WEATHER_PRIOR[i])
            };
        }
    }
    m
}

/// Reversible chain: `π_i ∝ prior_i (1 - prior_i)`.
pub fn weather_stationary() -> [f64; 5] {
    let raw: Vec<f64> = WEATHER_PRIOR.iter().map(|p| p * (1.0 - p)).collect();
    let z: f64 = raw.iter().sum();
    std::array::from_fn(|i| raw[i] / z)
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn generate_weather(t_steps: usize, seed: u64) -> Vec<WeatherClass> {
    let mut rng = stream(seed, 3);
    let m = weather_transition_matrix();
    let mut state = sample_index(&weather_stationary(), &mut rng);
    (0..t_steps)
        .map(|_| {
            let c = WeatherClass::ALL[state];
            state = sample_index(&m[state], &mut rng);
            c
        })
        .collect()
}

/// Heavy-tailed counts per node and category, scaled up near the centre of
/// the unit square.
pub fn generate_poi(positions: &[[f64; 2]], seed: u64) -> PoiTable {
    let mut rng = stream(seed, 2);
    let mut table = PoiTable::new(POI_CATEGORIES.iter().map(|s| s.to_string()).collect(), positions.len());
    for (v, p) in positions.iter().enumerate() {
        let r2 = (p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2);
        let downtown = (1.0 + 3.0 * (-r2 / (2.0 * 0.15f64.powi(2))).exp()).ln();
        for (c, name) in POI_CATEGORIES.iter().enumerate() {
            let dist = LogNormal::new(POI_LOG_MEAN[c] + downtown, POI_LOG_SD).unwrap();
            let draw: f64 = dist.sample(&mut rng);
            let count = (draw - 1.0).round().max(0.0) as u32;
            table.set(v, name, count).unwrap();
        }
    }
    table
}

/// POI counts and a weather series of `t_steps`.
pub fn generate_attributes(positions: &[[f64; 2]], t_steps: usize, seed: u64) -> (PoiTable, Vec<WeatherClass>) {
    (generate_poi(positions, seed), generate_weather(t_steps, seed))
}

/// Weighted POI count per node divided by its city-wide mean, capped.
pub fn relative_load(poi: &PoiTable) -> Vec<f64> {
    let load: Vec<f64> = (0..poi.n_nodes())
        .map(|v| {
            POI_LOAD_WEIGHT
                .iter()
                .enumerate()
                .map(|(c, w)| w * poi.count(v, c) as f64)
                .sum()
        })
        .collect();
    let mean = load.iter().sum::<f64>() / load.len() as f64;
    load.iter()
        .map(|l| if mean > 0.0 { (l / mean).min(MAX_RELATIVE_LOAD) } else { 0.0 })
        .collect()
}

/// Weather sensitivity: busier sections slow down more.
pub fn popularity(relative_load: f64) -> f64 {
    0.5 + 0.5 * relative_load
}

fn circular_gap(slot: f64, center: f64) -> f64 {
    let d = (slot - center).abs();
    d.min(STEPS_PER_DAY as f64 - d)
}

/// Two Gaussian bumps over the day, peak value 1.
pub fn rush_factor(t: usize) -> f64 {
    let slot = (t % STEPS_PER_DAY) as f64;
    RUSH_SLOTS
        .iter()
        .map(|&c| (-circular_gap(slot, c).powi(2) / (2.0 * RUSH_WIDTH * RUSH_WIDTH)).exp())
        .sum()
}

/// Diurnal free-flow speed, fastest in the early morning.
pub fn base_speed(t: usize) -> f64 {
    let phase = std::f64::consts::TAU * ((t % STEPS_PER_DAY) as f64 - 12.0) / STEPS_PER_DAY as f64;
    BASE_SPEED + DIURNAL_AMPLITUDE * phase.cos()
}

/// Noise-free expected speed of node `v` at `t`.
pub fn expected_speed(t: usize, rel_load: f64, weather: WeatherClass, effects: &EffectConfig) -> f64 {
    base_speed(t)
        - effects.poi * RUSH_SLOWDOWN * rel_load * rush_factor(t)
        - effects.weather * WEATHER_PENALTY[weather.index()] * popularity(rel_load)
}

/// Speeds with deviations that propagate from neighbours:
/// `d_t(v) = coupling * 0.3 * mean_{u ~ v} d_{t-1}(u) + N(0, σ_obs)`.
pub fn simulate_traffic(
    graph: &RoadGraph,
    poi: &PoiTable,
    weather: &[WeatherClass],
    sigma_obs: f64,
    effects: &EffectConfig,
    seed: u64,
) -> Result<SpeedTensor> {
    let n = graph.n_nodes();
    let t_steps = weather.len();
    if t_steps == 0 {
        return input_err("traffic simulation needs at least one step");
    }
    if poi.n_nodes() != n {
        return input_err(format!("POI table covers {} nodes, graph has {n}", poi.n_nodes()));
    }
    let rel = relative_load(poi);
    let neighbors: Vec<Vec<usize>> = (0..n).map(|v| graph.neighbors(v)).collect();
    let noise = Normal::new(0.0, sigma_obs.max(0.0)).map_err(|e| crate::Error::Input(e.to_string()))?;
    let mut rng = stream(seed, 4);
    let mut dev = vec![0.0; n];
    let mut values = Array2::zeros((t_steps, n));
    for t in 0..t_steps {
        let prev = dev.clone();
        for v in 0..n {
            let carry = if neighbors[v].is_empty() {
                0.0
            } else {
                neighbors[v].iter().map(|&u| prev[u]).sum::<f64>() / neighbors[v].len() as f64
            };
            dev[v] = effects.coupling * NEIGHBOR_COUPLING * carry + noise.sample(&mut rng);
            let s = expected_speed(t, rel[v], weather[t], effects) + dev[v];
            values[[t, v]] = s.clamp(MIN_SPEED, MAX_SPEED);
        }
    }
    SpeedTensor::new(values, graph.node_ids().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseSpec {
    Gaussian { sigma: f64 },
    Poisson { lambda: f64 },
}

/// Raw draws on the normalized scale: Gaussian `N(0, σ²)` or uncentered
/// Poisson `P(λ)`.
pub fn noise_draws(spec: NoiseSpec, count: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = stream(seed, 5);
    match spec {
        NoiseSpec::Gaussian { sigma } if sigma > 0.0 => {
            let d = Normal::new(0.0, sigma).unwrap();
            Ok((0..count).map(|_| d.sample(&mut rng)).collect())
        }
        NoiseSpec::Poisson { lambda } if lambda > 0.0 => {
            let d = Poisson::new(lambda).unwrap();
            Ok((0..count).map(|_| d.sample(&mut rng)).collect())
        }
        other => input_err(format!("invalid noise spec {other:?}")),
    }
}

/// Adds zero-mean noise scaled by the normalization span; Poisson draws are
/// centered by subtracting λ.
pub fn perturb(speeds: &SpeedTensor, spec: NoiseSpec, span: f64, seed: u64) -> Result<SpeedTensor> {
    let draws = noise_draws(spec, speeds.values.len(), seed)?;
    let center = match spec {
        NoiseSpec::Gaussian { .. } => 0.0,
        NoiseSpec::Poisson { lambda } => lambda,
    };
    let mut out = speeds.clone();
    for (v, d) in out.values.iter_mut().zip(draws) {
        *v += (d - center) * span;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CityScenario {
    pub graph: RoadGraph,
    pub positions: Vec<[f64; 2]>,
    pub poi: PoiTable,
    pub weather: Vec<WeatherClass>,
    pub speeds: SpeedTensor,
    pub config: ScenarioConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScenarioRecord {
    config: ScenarioConfig,
    positions: Vec<[f64; 2]>,
}

impl CityScenario {
    pub fn generate(config: &ScenarioConfig) -> Result<Self> {
        let (graph, positions) = generate_network_with_positions(config.n_nodes, config.avg_degree, config.seed)?;
        let (poi, weather) = generate_attributes(&positions, config.t_steps, config.seed);
        let speeds = simulate_traffic(&graph, &poi, &weather, config.sigma_obs, &config.effects, config.seed)?;
        Ok(Self {
            graph,
            positions,
            poi,
            weather,
            speeds,
            config: config.clone(),
        })
    }

    /// Writes `edges.csv`, `nodes.csv`, `poi.csv`, `weather.csv`,
    /// `speeds.csv`, `speeds.json` and `scenario.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.graph.write_csv(&dir.join("edges.csv"), &dir.join("nodes.csv"))?;
        self.poi.write_csv(&dir.join("poi.csv"))?;
        write_weather_csv(&dir.join("weather.csv"), &self.weather)?;
        self.speeds
            .write_csv(&dir.join("speeds.csv"), &dir.join("speeds.json"), None)?;
        let record = ScenarioRecord {
            config: self.config.clone(),
            positions: self.positions.clone(),
        };
        fs::write(dir.join("scenario.json"), serde_json::to_string_pretty(&record)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let record: ScenarioRecord = serde_json::from_str(&fs::read_to_string(dir.join("scenario.json"))?)?;
        let graph = RoadGraph::read_csv(&dir.join("edges.csv"), &dir.join("nodes.csv"))?;
        let categories = POI_CATEGORIES.iter().map(|s| s.to_string()).collect();
        let poi = PoiTable::read_csv(&dir.join("poi.csv"), categories, graph.n_nodes())?;
        let weather = read_weather_csv(&dir.join("weather.csv"))?;
        let (speeds, _) = SpeedTensor::read_csv(&dir.join("speeds.csv"), &dir.join("speeds.json"))?;
        if speeds.n_steps() != weather.len() || speeds.n_nodes() != graph.n_nodes() {
            return input_err(format!("scenario files in {} disagree in shape", dir.display()));
        }
        Ok(Self {
            graph,
            positions: record.positions,
            poi,
            weather,
            speeds,
            config: record.config,
        })
    }
}
