//! Knowledge representation learning over the city knowledge graph.
//!
//! Relation triples are scored by translation (TransE, or TransR through a
//! per-relation transfer matrix); attribute triples by a classifier that maps
//! the entity vector through `tanh(e W + b)` and compares it to the embedding
//! of each candidate value. Training maximizes the joint log-likelihood of
//! both triple sets under softmax normalization.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Error, Result};
use crate::graph::parse_err;
use crate::kg::{
    negative_sample_relation, time_entity_name, AttributeTriple, EntityKind, RelationTriple,
    TripleStore, OBSERVED_AT, WEATHER,
};
use crate::optim::{Adam, AdamConfig, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    #[default]
    TransE,
    TransR,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L1,
    L2,
}

impl Norm {
    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            Norm::L1 => x.iter().map(|v| v.abs()).sum(),
            Norm::L2 => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }

    /// Gradient of the norm; zero at the origin.
    pub fn grad(self, x: &[f64]) -> Vec<f64> {
        match self {
            Norm::L1 => x.iter().map(|&v| sign(v)).collect(),
            Norm::L2 => {
                let n = self.eval(x);
                if n == 0.0 {
                    vec![0.0; x.len()]
                } else {
                    x.iter().map(|v| v / n).collect()
                }
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_dims(parts: &[(&str, usize)]) -> Result<usize> {
    let d = parts[0].1;
    for (name, len) in parts {
        if *len != d {
            return shape_err(format!(
                "{name} has dimension {len}, expected {d} ({})",
                parts
                    .iter()
                    .map(|(n, l)| format!("{n}={l}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ));
        }
    }
    Ok(d)
}

/// `-‖h + r - t‖ + b1`.
pub fn score_transe(h: &[f64], r: &[f64], t: &[f64], norm: Norm, b1: f64) -> Result<f64> {
    check_dims(&[("h", h.len()), ("r", r.len()), ("t", t.len())])?;
    let x: Vec<f64> = h.iter().zip(r).zip(t).map(|((h, r), t)| h + r - t).collect();
    Ok(-norm.eval(&x) + b1)
}

/// `-‖h M + r - t M‖ + b1`.
pub fn score_transr(
    h: &[f64],
    r: &[f64],
    t: &[f64],
    m: ArrayView2<'_, f64>,
    norm: Norm,
    b1: f64,
) -> Result<f64> {
    let d = check_dims(&[("h", h.len()), ("r", r.len()), ("t", t.len())])?;
    if m.dim() != (d, d) {
        return shape_err(format!("transfer matrix is {:?}, expected {d}x{d}", m.dim()));
    }
    Ok(-norm.eval(&transr_residual(h, r, t, m)) + b1)
}

fn transr_residual(h: &[f64], r: &[f64], t: &[f64], m: ArrayView2<'_, f64>) -> Vec<f64> {
    let hm = ArrayView1::from(h).dot(&m);
    let tm = ArrayView1::from(t).dot(&m);
    hm.iter().zip(r).zip(tm.iter()).map(|((h, r), t)| h + r - t).collect()
}

/// `-‖tanh(e W + b) - v‖ + b2`.
pub fn score_attribute(
    e: &[f64],
    w: ArrayView2<'_, f64>,
    b: &[f64],
    value_vec: &[f64],
    norm: Norm,
    b2: f64,
) -> Result<f64> {
    let d = check_dims(&[("e", e.len()), ("b", b.len()), ("value", value_vec.len())])?;
    if w.dim() != (d, d) {
        return shape_err(format!("attribute projection is {:?}, expected {d}x{d}", w.dim()));
    }
    let z = ArrayView1::from(e).dot(&w);
    let x: Vec<f64> = z
        .iter()
        .zip(b)
        .zip(value_vec)
        .map(|((z, b), v)| (z + b).tanh() - v)
        .collect();
    Ok(-norm.eval(&x) + b2)
}

/// Trainable tensors of the embedding model.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    pub entity_vecs: Array2<f64>,
    pub relation_vecs: Array2<f64>,
    pub attr_value_vecs: Vec<Array2<f64>>,
    /// One `d x d` matrix per relation under TransR; empty under TransE.
    pub transfer_mats: Vec<Array2<f64>>,
    pub attr_w: Vec<Array2<f64>>,
    pub attr_b: Vec<Array1<f64>>,
}

impl EmbeddingParams {
    fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.dim());
        Self {
            entity_vecs: z2(&self.entity_vecs),
            relation_vecs: z2(&self.relation_vecs),
            attr_value_vecs: self.attr_value_vecs.iter().map(z2).collect(),
            transfer_mats: self.transfer_mats.iter().map(z2).collect(),
            attr_w: self.attr_w.iter().map(z2).collect(),
            attr_b: self.attr_b.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }
}

impl ParamSet for EmbeddingParams {
    fn segments(&self) -> Vec<&[f64]> {
        let mut out = vec![
            self.entity_vecs.as_slice().unwrap(),
            self.relation_vecs.as_slice().unwrap(),
        ];
        out.extend(self.attr_value_vecs.iter().map(|a| a.as_slice().unwrap()));
        out.extend(self.transfer_mats.iter().map(|a| a.as_slice().unwrap()));
        out.extend(self.attr_w.iter().map(|a| a.as_slice().unwrap()));
        out.extend(self.attr_b.iter().map(|a| a.as_slice().unwrap()));
        out
    }

    fn segments_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.entity_vecs.as_slice_mut().unwrap(),
            self.relation_vecs.as_slice_mut().unwrap(),
        ];
        out.extend(self.attr_value_vecs.iter_mut().map(|a| a.as_slice_mut().unwrap()));
        out.extend(self.transfer_mats.iter_mut().map(|a| a.as_slice_mut().unwrap()));
        out.extend(self.attr_w.iter_mut().map(|a| a.as_slice_mut().unwrap()));
        out.extend(self.attr_b.iter_mut().map(|a| a.as_slice_mut().unwrap()));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub params: EmbeddingParams,
    pub dim: usize,
    pub scorer: Scorer,
    pub norm: Norm,
    pub b1: f64,
    pub b2: f64,
    pub seed: u64,
}

impl EmbeddingTable {
    pub fn entity(&self, e: usize) -> &[f64] {
        row(&self.params.entity_vecs, e)
    }

    pub fn relation(&self, r: usize) -> &[f64] {
        row(&self.params.relation_vecs, r)
    }

    pub fn attribute_value(&self, attribute: usize, value: usize) -> &[f64] {
        row(&self.params.attr_value_vecs[attribute], value)
    }

    pub fn relation_score(&self, t: &RelationTriple) -> f64 {
        let (h, r, tl) = (self.entity(t.head), self.relation(t.relation), self.entity(t.tail));
        let x = match self.scorer {
            Scorer::TransE => h.iter().zip(r).zip(tl).map(|((h, r), t)| h + r - t).collect(),
            Scorer::TransR => transr_residual(h, r, tl, self.params.transfer_mats[t.relation].view()),
        };
        -self.norm.eval(&x) + self.b1
    }

    fn relation_score_grad(&self, t: &RelationTriple, weight: f64, grad: &mut EmbeddingParams) {
        let (h, r, tl) = (self.entity(t.head), self.relation(t.relation), self.entity(t.tail));
        match self.scorer {
            Scorer::TransE => {
                let x: Vec<f64> = h.iter().zip(r).zip(tl).map(|((h, r), t)| h + r - t).collect();
                // d score / d x = -grad‖x‖
                let g = self.norm.grad(&x);
                for (k, gk) in g.iter().enumerate() {
                    grad.entity_vecs[[t.head, k]] -= weight * gk;
                    grad.relation_vecs[[t.relation, k]] -= weight * gk;
                    grad.entity_vecs[[t.tail, k]] += weight * gk;
                }
            }
            Scorer::TransR => {
                let m = &self.params.transfer_mats[t.relation];
                let x = transr_residual(h, r, tl, m.view());
                let g: Array1<f64> = self.norm.grad(&x).into_iter().map(|v| -v).collect();
                let mg = m.dot(&g);
                for k in 0..self.dim {
                    grad.entity_vecs[[t.head, k]] += weight * mg[k];
                    grad.entity_vecs[[t.tail, k]] -= weight * mg[k];
                    grad.relation_vecs[[t.relation, k]] += weight * g[k];
                }
                let gm = &mut grad.transfer_mats[t.relation];
                for i in 0..self.dim {
                    let di = h[i] - tl[i];
                    for j in 0..self.dim {
                        gm[[i, j]] += weight * di * g[j];
                    }
                }
            }
        }
    }

    pub fn attribute_score(&self, entity: usize, attribute: usize, value: usize) -> f64 {
        let (a, x) = self.attribute_residual(entity, attribute, value);
        drop(a);
        -self.norm.eval(&x) + self.b2
    }

    /// Returns `(tanh(e W + b), tanh(e W + b) - v)`.
    fn attribute_residual(&self, entity: usize, attribute: usize, value: usize) -> (Array1<f64>, Vec<f64>) {
        let e = ArrayView1::from(self.entity(entity));
        let mut a = e.dot(&self.params.attr_w[attribute]) + &self.params.attr_b[attribute];
        a.mapv_inplace(f64::tanh);
        let v = self.attribute_value(attribute, value);
        let x = a.iter().zip(v).map(|(a, v)| a - v).collect();
        (a, x)
    }

    fn attribute_score_grad(
        &self,
        entity: usize,
        attribute: usize,
        value: usize,
        weight: f64,
        grad: &mut EmbeddingParams,
    ) {
        let (a, x) = self.attribute_residual(entity, attribute, value);
        let g: Vec<f64> = self.norm.grad(&x).into_iter().map(|v| -v).collect();
        let dz: Array1<f64> = g
            .iter()
            .zip(a.iter())
            .map(|(g, a)| g * (1.0 - a * a))
            .collect();
        let w = &self.params.attr_w[attribute];
        let de = w.dot(&dz);
        let e = self.entity(entity);
        for k in 0..self.dim {
            grad.attr_value_vecs[attribute][[value, k]] -= weight * g[k];
            grad.attr_b[attribute][k] += weight * dz[k];
            grad.entity_vecs[[entity, k]] += weight * de[k];
        }
        let gw = &mut grad.attr_w[attribute];
        for i in 0..self.dim {
            for j in 0..self.dim {
                gw[[i, j]] += weight * e[i] * dz[j];
            }
        }
    }

    /// Value with the highest attribute score.
    pub fn predict_attribute(&self, entity: usize, attribute: usize) -> usize {
        let k = self.params.attr_value_vecs[attribute].nrows();
        (0..k)
            .map(|v| (v, self.attribute_score(entity, attribute, v)))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0
    }

    /// Rank of the true tail among all entities of its kind, by descending
    /// score; ties split evenly.
    pub fn tail_rank(&self, store: &TripleStore, t: &RelationTriple) -> f64 {
        let kind = store.entities()[t.tail].kind;
        let truth = self.relation_score(t);
        let (mut greater, mut ties) = (0usize, 0usize);
        for cand in store.entities_of_kind(kind) {
            if cand == t.tail {
                continue;
            }
            let s = self.relation_score(&RelationTriple { tail: cand, ..*t });
            if s > truth {
                greater += 1;
            } else if s == truth {
                ties += 1;
            }
        }
        1.0 + greater as f64 + ties as f64 / 2.0
    }
}

fn row(a: &Array2<f64>, i: usize) -> &[f64] {
    let d = a.ncols();
    &a.as_slice().unwrap()[i * d..(i + 1) * d]
}

fn log_softmax_first(scores: &[f64]) -> (f64, Vec<f64>) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / z).collect();
    (scores[0] - max - z.ln(), probs)
}

fn check_negatives(t: &RelationTriple, negatives: &[RelationTriple]) -> Result<()> {
    if negatives.is_empty() {
        return input_err("relation log-probability needs at least one negative");
    }
    if negatives
        .iter()
        .any(|n| n.relation != t.relation || n.tail != t.tail)
    {
        return input_err("negatives must share the relation and tail of the true triple");
    }
    Ok(())
}

/// Softmax probabilities over `[t] ++ negatives`.
pub fn relation_probabilities(
    table: &EmbeddingTable,
    t: &RelationTriple,
    negatives: &[RelationTriple],
) -> Result<Vec<f64>> {
    check_negatives(t, negatives)?;
    let scores: Vec<f64> = std::iter::once(t)
        .chain(negatives)
        .map(|c| table.relation_score(c))
        .collect();
    Ok(log_softmax_first(&scores).1)
}

/// Log-probability of the true triple against head-corrupted negatives.
pub fn relation_log_prob(
    table: &EmbeddingTable,
    t: &RelationTriple,
    negatives: &[RelationTriple],
) -> Result<f64> {
    check_negatives(t, negatives)?;
    let scores: Vec<f64> = std::iter::once(t)
        .chain(negatives)
        .map(|c| table.relation_score(c))
        .collect();
    Ok(log_softmax_first(&scores).0)
}

/// Adds `weight * d logP / d params` into `grad`, returning `logP`.
pub fn relation_log_prob_grad(
    table: &EmbeddingTable,
    t: &RelationTriple,
    negatives: &[RelationTriple],
    weight: f64,
    grad: &mut EmbeddingParams,
) -> Result<f64> {
    check_negatives(t, negatives)?;
    let cands: Vec<&RelationTriple> = std::iter::once(t).chain(negatives).collect();
    let scores: Vec<f64> = cands.iter().map(|c| table.relation_score(c)).collect();
    let (lp, probs) = log_softmax_first(&scores);
    for (i, (c, p)) in cands.iter().zip(probs).enumerate() {
        let indicator = if i == 0 { 1.0 } else { 0.0 };
        table.relation_score_grad(c, weight * (indicator - p), grad);
    }
    Ok(lp)
}

/// Exact denominator over every entity of the head's kind.
pub fn relation_log_prob_exact(
    table: &EmbeddingTable,
    store: &TripleStore,
    t: &RelationTriple,
) -> Result<f64> {
    let kind = store.entities()[t.head].kind;
    let negatives: Vec<RelationTriple> = store
        .entities_of_kind(kind)
        .into_iter()
        .filter(|&h| h != t.head)
        .map(|h| RelationTriple { head: h, ..*t })
        .collect();
    if negatives.is_empty() {
        return Ok(0.0);
    }
    relation_log_prob(table, t, &negatives)
}

fn attribute_scores(table: &EmbeddingTable, t: &AttributeTriple) -> Vec<f64> {
    // true value first, then the rest in range order
    let k = table.params.attr_value_vecs[t.attribute].nrows();
    std::iter::once(t.value)
        .chain((0..k).filter(|&v| v != t.value))
        .map(|v| table.attribute_score(t.entity, t.attribute, v))
        .collect()
}

fn check_attribute(table: &EmbeddingTable, t: &AttributeTriple) -> Result<()> {
    let Some(vals) = table.params.attr_value_vecs.get(t.attribute) else {
        return input_err(format!("unknown attribute id {}", t.attribute));
    };
    if t.value >= vals.nrows() {
        return input_err(format!(
            "value id {} outside attribute range of size {}",
            t.value,
            vals.nrows()
        ));
    }
    if t.entity >= table.params.entity_vecs.nrows() {
        return input_err(format!("unknown entity id {}", t.entity));
    }
    Ok(())
}

/// Log-probability of the true value over the attribute's full value range.
pub fn attribute_log_prob(table: &EmbeddingTable, t: &AttributeTriple) -> Result<f64> {
    check_attribute(table, t)?;
    Ok(log_softmax_first(&attribute_scores(table, t)).0)
}

/// Softmax over the value range, indexed by value id.
pub fn attribute_probabilities(table: &EmbeddingTable, t: &AttributeTriple) -> Result<Vec<f64>> {
    check_attribute(table, t)?;
    let k = table.params.attr_value_vecs[t.attribute].nrows();
    let scores: Vec<f64> = (0..k)
        .map(|v| table.attribute_score(t.entity, t.attribute, v))
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

pub fn attribute_log_prob_grad(
    table: &EmbeddingTable,
    t: &AttributeTriple,
    weight: f64,
    grad: &mut EmbeddingParams,
) -> Result<f64> {
    check_attribute(table, t)?;
    let k = table.params.attr_value_vecs[t.attribute].nrows();
    let order: Vec<usize> = std::iter::once(t.value)
        .chain((0..k).filter(|&v| v != t.value))
        .collect();
    let scores = attribute_scores(table, t);
    let (lp, probs) = log_softmax_first(&scores);
    for (i, (&v, p)) in order.iter().zip(probs).enumerate() {
        let indicator = if i == 0 { 1.0 } else { 0.0 };
        table.attribute_score_grad(t.entity, t.attribute, v, weight * (indicator - p), grad);
    }
    Ok(lp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    pub dim: usize,
    pub scorer: Scorer,
    pub norm: Norm,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub cooc_reg_weight: f64,
    pub b1: f64,
    pub b2: f64,
    /// Attributes left out of the likelihood. Section-to-time linkage has a
    /// value range as large as the time index and carries no signal.
    pub excluded_attributes: Vec<String>,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            dim: 20,
            scorer: Scorer::TransE,
            norm: Norm::L1,
            negatives: 10,
            epochs: 100,
            lr: 0.01,
            batch_size: 128,
            seed: 0,
            cooc_reg_weight: 0.0,
            b1: 7.0,
            b2: 7.0,
            excluded_attributes: vec![OBSERVED_AT.to_string()],
        }
    }
}

/// Seeded initialization: vectors uniform in `[-6/√d, 6/√d]` with entity and
/// relation rows L2-normalized, identity transfer matrices, Xavier-uniform
/// attribute projections, zero projection biases.
pub fn init_table(store: &TripleStore, config: &EmbedConfig) -> Result<EmbeddingTable> {
    let d = config.dim;
    if d == 0 {
        return input_err("embedding dimension must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bound = 6.0 / (d as f64).sqrt();
    let mut uniform = |rows: usize, cols: usize, b: f64| {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-b..b))
    };
    let mut entity_vecs = uniform(store.entities().len(), d, bound);
    let mut relation_vecs = uniform(store.relations().len(), d, bound);
    normalize_rows(&mut entity_vecs);
    normalize_rows(&mut relation_vecs);
    let attr_value_vecs = store
        .attributes()
        .iter()
        .map(|a| uniform(a.values.len(), d, bound))
        .collect();
    let xavier = (3.0 / d as f64).sqrt();
    let attr_w = store
        .attributes()
        .iter()
        .map(|_| uniform(d, d, xavier))
        .collect();
    let attr_b = store.attributes().iter().map(|_| Array1::zeros(d)).collect();
    let transfer_mats = match config.scorer {
        Scorer::TransE => Vec::new(),
        Scorer::TransR => store.relations().iter().map(|_| Array2::eye(d)).collect(),
    };
    Ok(EmbeddingTable {
        params: EmbeddingParams {
            entity_vecs,
            relation_vecs,
            attr_value_vecs,
            transfer_mats,
            attr_w,
            attr_b,
        },
        dim: d,
        scorer: config.scorer,
        norm: config.norm,
        b1: config.b1,
        b2: config.b2,
        seed: config.seed,
    })
}

fn normalize_rows(a: &mut Array2<f64>) {
    for mut r in a.rows_mut() {
        let n = r.dot(&r).sqrt();
        if n > 0.0 {
            r /= n;
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Item {
    Relation(usize),
    Attribute(usize),
}

/// `Σ p(a,b) ‖mean(E_a) - mean(E_b)‖²` over co-occurrence triples.
pub fn cooccurrence_penalty(table: &EmbeddingTable, store: &TripleStore) -> f64 {
    let means: Vec<Array1<f64>> = table
        .params
        .attr_value_vecs
        .iter()
        .map(|v| v.mean_axis(Axis(0)).unwrap())
        .collect();
    store
        .cooccurrence()
        .iter()
        .map(|c| {
            let diff = &means[c.attr_a] - &means[c.attr_b];
            c.probability * diff.dot(&diff)
        })
        .sum()
}

fn cooccurrence_penalty_grad(
    table: &EmbeddingTable,
    store: &TripleStore,
    weight: f64,
    grad: &mut EmbeddingParams,
) {
    let vecs = &table.params.attr_value_vecs;
    let means: Vec<Array1<f64>> = vecs.iter().map(|v| v.mean_axis(Axis(0)).unwrap()).collect();
    for c in store.cooccurrence() {
        let diff = &means[c.attr_a] - &means[c.attr_b];
        let ka = vecs[c.attr_a].nrows() as f64;
        let kb = vecs[c.attr_b].nrows() as f64;
        for mut r in grad.attr_value_vecs[c.attr_a].rows_mut() {
            r.scaled_add(weight * 2.0 * c.probability / ka, &diff);
        }
        for mut r in grad.attr_value_vecs[c.attr_b].rows_mut() {
            r.scaled_add(-weight * 2.0 * c.probability / kb, &diff);
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbedOutcome {
    pub table: EmbeddingTable,
    /// Mean negative log-likelihood (plus regularizer) per epoch.
    pub loss_history: Vec<f64>,
}

/// Mini-batch Adam ascent on the joint relation/attribute log-likelihood.
pub fn train_krear(store: &TripleStore, config: &EmbedConfig) -> Result<EmbedOutcome> {
    if store.relation_triples().is_empty() || store.attribute_triples().is_empty() {
        return input_err("embedding needs both relation and attribute triples");
    }
    let mut table = init_table(store, config)?;
    let excluded: Vec<usize> = config
        .excluded_attributes
        .iter()
        .filter_map(|a| store.attribute_id(a))
        .collect();
    let mut items: Vec<Item> = (0..store.relation_triples().len())
        .map(Item::Relation)
        .collect();
    items.extend(
        store
            .attribute_triples()
            .iter()
            .enumerate()
            .filter(|(_, t)| !excluded.contains(&t.attribute))
            .map(|(i, _)| Item::Attribute(i)),
    );
    if !items.iter().any(|i| matches!(i, Item::Attribute(_))) {
        return input_err("every attribute triple is excluded from training");
    }

    // Separate streams so the shuffle order does not depend on how many
    // negatives were drawn.
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let mut neg_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0002);
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        table.params.n_params(),
    );
    let batch_size = config.batch_size.max(1);
    let n_batches = items.len().div_ceil(batch_size) as f64;
    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut grad = table.params.zeros_like();

    for epoch in 0..config.epochs {
        items.shuffle(&mut order_rng);
        let mut nll = 0.0;
        for batch in items.chunks(batch_size) {
            grad.fill(0.0);
            let w = 1.0 / batch.len() as f64;
            for item in batch {
                let lp = match *item {
                    Item::Relation(i) => {
                        let t = store.relation_triples()[i];
                        let negs = sample_negatives(&t, store, config.negatives, &mut neg_rng)?;
                        if negs.is_empty() {
                            0.0
                        } else {
                            relation_log_prob_grad(&table, &t, &negs, w, &mut grad)?
                        }
                    }
                    Item::Attribute(i) => {
                        let t = store.attribute_triples()[i];
                        attribute_log_prob_grad(&table, &t, w, &mut grad)?
                    }
                };
                nll -= lp;
            }
            // grad holds d(mean log-lik); flip to descent direction
            for seg in grad.segments_mut() {
                for g in seg.iter_mut() {
                    *g = -*g;
                }
            }
            if config.cooc_reg_weight != 0.0 {
                cooccurrence_penalty_grad(&table, store, config.cooc_reg_weight / n_batches, &mut grad);
            }
            adam.step(&mut table.params, &grad);
        }
        normalize_rows(&mut table.params.entity_vecs);
        normalize_rows(&mut table.params.relation_vecs);
        let mut loss = nll / items.len() as f64;
        if config.cooc_reg_weight != 0.0 {
            loss += config.cooc_reg_weight * cooccurrence_penalty(&table, store);
        }
        if !loss.is_finite() || !table.params.all_finite() {
            return Err(Error::Training {
                epoch,
                msg: "embedding loss became non-finite".into(),
            });
        }
        loss_history.push(loss);
    }
    Ok(EmbedOutcome {
        table,
        loss_history,
    })
}

fn sample_negatives<R: Rng>(
    t: &RelationTriple,
    store: &TripleStore,
    k: usize,
    rng: &mut R,
) -> Result<Vec<RelationTriple>> {
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        match negative_sample_relation(t, store, rng) {
            Ok(n) => out.push(n),
            Err(Error::Sampling(_)) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Static per-section vectors and dynamic per-time vectors consumed by the
/// forecaster.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeVectors {
    e_s: Array2<f64>,
    dynamic: Array2<f64>,
    time_pos: HashMap<usize, usize>,
}

impl KnowledgeVectors {
    /// `dynamic` holds one row per entry of `time_ids`, shared by all sections.
    pub fn new(e_s: Array2<f64>, time_ids: &[usize], dynamic: Array2<f64>) -> Result<Self> {
        if dynamic.nrows() != time_ids.len() {
            return shape_err(format!(
                "{} dynamic rows for {} time steps",
                dynamic.nrows(),
                time_ids.len()
            ));
        }
        let values = e_s.iter().chain(dynamic.iter());
        if values.into_iter().any(|x| !x.is_finite()) {
            return input_err("knowledge vectors must be finite");
        }
        let time_pos = time_ids.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        Ok(Self {
            e_s,
            dynamic,
            time_pos,
        })
    }

    /// Knowledge-free vectors of width zero.
    pub fn empty(n_nodes: usize, time_ids: &[usize]) -> Self {
        Self::new(
            Array2::zeros((n_nodes, 0)),
            time_ids,
            Array2::zeros((time_ids.len(), 0)),
        )
        .unwrap()
    }

    pub fn n_nodes(&self) -> usize {
        self.e_s.nrows()
    }

    pub fn static_dim(&self) -> usize {
        self.e_s.ncols()
    }

    pub fn dynamic_dim(&self) -> usize {
        self.dynamic.ncols()
    }

    pub fn static_vectors(&self) -> ArrayView2<'_, f64> {
        self.e_s.view()
    }

    pub fn covers(&self, t: usize) -> bool {
        self.time_pos.contains_key(&t)
    }

    pub fn dynamic_at(&self, t: usize) -> Result<ArrayView1<'_, f64>> {
        self.time_pos
            .get(&t)
            .map(|&i| self.dynamic.row(i))
            .ok_or_else(|| Error::Input(format!("no knowledge vectors for time step {t}")))
    }

    /// `n x d_d` dynamic matrix at time `t`.
    pub fn dynamic_matrix_at(&self, t: usize) -> Result<Array2<f64>> {
        let row = self.dynamic_at(t)?;
        Ok(row
            .broadcast((self.n_nodes(), row.len()))
            .unwrap()
            .to_owned())
    }

    /// Drops the static and/or dynamic part, shrinking it to width zero.
    pub fn ablate(&self, keep_static: bool, keep_dynamic: bool) -> Self {
        let mut out = self.clone();
        if !keep_static {
            out.e_s = Array2::zeros((self.n_nodes(), 0));
        }
        if !keep_dynamic {
            out.dynamic = Array2::zeros((self.dynamic.nrows(), 0));
        }
        out
    }
}

/// `e_s[node]` is the section's entity vector; `e_d[t]` is the embedding of
/// the weather class attached to time entity `t`.
pub fn extract_knowledge_vectors(
    table: &EmbeddingTable,
    store: &TripleStore,
    node_ids: &[String],
    time_index: &[usize],
) -> Result<KnowledgeVectors> {
    let d = table.dim;
    let mut e_s = Array2::zeros((node_ids.len(), d));
    for (i, id) in node_ids.iter().enumerate() {
        let e = store
            .entity_id(id)
            .filter(|&e| store.entities()[e].kind == EntityKind::Section)
            .ok_or_else(|| Error::Input(format!("section {id:?} missing from the knowledge graph")))?;
        e_s.row_mut(i).assign(&ArrayView1::from(table.entity(e)));
    }
    let weather = store.attribute_id(WEATHER);
    let mut dynamic = Array2::zeros((time_index.len(), d));
    for (k, &t) in time_index.iter().enumerate() {
        let name = time_entity_name(t);
        let class = weather.and_then(|w| {
            let e = store.entity_id(&name)?;
            store.attributes_of(e).find(|a| a.attribute == w).map(|a| (w, a.value))
        });
        let Some((w, v)) = class else {
            return input_err(format!("no weather recorded for time step {t}"));
        };
        dynamic
            .row_mut(k)
            .assign(&ArrayView1::from(table.attribute_value(w, v)));
    }
    KnowledgeVectors::new(e_s, time_index, dynamic)
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingMeta {
    dim: usize,
    scorer: Scorer,
    norm: Norm,
    b1: f64,
    b2: f64,
    seed: u64,
}

fn write_rows<'a>(
    path: &Path,
    key_headers: &[&str],
    dim: usize,
    rows: impl Iterator<Item = (Vec<String>, &'a [f64])>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = key_headers
        .iter()
        .map(|s| s.to_string())
        .chain((0..dim).map(|k| format!("v{k}")))
        .collect();
    w.write_record(&header)?;
    for (keys, vals) in rows {
        let rec: Vec<String> = keys
            .into_iter()
            .chain(vals.iter().map(|v| v.to_string()))
            .collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows(path: &Path, n_keys: usize, dim: usize) -> Result<Vec<(Vec<String>, Vec<f64>)>> {
    let file = path.display().to_string();
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != n_keys + dim {
            return Err(parse_err(&file, line, &format!("expected {} fields", n_keys + dim)));
        }
        let keys = rec.iter().take(n_keys).map(str::to_string).collect();
        let vals = rec
            .iter()
            .skip(n_keys)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| parse_err(&file, line, "bad float"))?;
        out.push((keys, vals));
    }
    Ok(out)
}

impl EmbeddingTable {
    /// Writes `entities.csv`, `relations.csv`, `attr_values.csv`,
    /// `attr_proj.csv`, `transfer.csv` and `meta.json`, keyed by the store's
    /// names.
    pub fn save(&self, dir: &Path, store: &TripleStore) -> Result<()> {
        fs::create_dir_all(dir)?;
        let d = self.dim;
        let p = &self.params;
        write_rows(
            &dir.join("entities.csv"),
            &["id"],
            d,
            store
                .entities()
                .iter()
                .enumerate()
                .map(|(i, e)| (vec![e.name.clone()], row(&p.entity_vecs, i))),
        )?;
        write_rows(
            &dir.join("relations.csv"),
            &["id"],
            d,
            store
                .relations()
                .iter()
                .enumerate()
                .map(|(i, r)| (vec![r.clone()], row(&p.relation_vecs, i))),
        )?;
        let attrs = store.attributes();
        write_rows(
            &dir.join("attr_values.csv"),
            &["attribute", "value"],
            d,
            attrs.iter().enumerate().flat_map(|(a, def)| {
                def.values
                    .iter()
                    .enumerate()
                    .map(move |(v, name)| (vec![def.name.clone(), name.clone()], row(&p.attr_value_vecs[a], v)))
            }),
        )?;
        write_rows(
            &dir.join("attr_proj.csv"),
            &["attribute", "row"],
            d,
            attrs.iter().enumerate().flat_map(|(a, def)| {
                (0..d)
                    .map(move |k| (vec![def.name.clone(), format!("w{k}")], row(&p.attr_w[a], k)))
                    .chain(std::iter::once((
                        vec![def.name.clone(), "b".to_string()],
                        p.attr_b[a].as_slice().unwrap(),
                    )))
            }),
        )?;
        write_rows(
            &dir.join("transfer.csv"),
            &["relation", "row"],
            d,
            p.transfer_mats.iter().enumerate().flat_map(|(r, m)| {
                let name = store.relations()[r].clone();
                (0..d).map(move |k| (vec![name.clone(), format!("m{k}")], row(m, k)))
            }),
        )?;
        let meta = EmbeddingMeta {
            dim: d,
            scorer: self.scorer,
            norm: self.norm,
            b1: self.b1,
            b2: self.b2,
            seed: self.seed,
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, store: &TripleStore) -> Result<Self> {
        let meta: EmbeddingMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let d = meta.dim;
        let mismatch = |what: &str| Error::Input(format!("{what} in {} does not match the store", dir.display()));

        let fill = |path: &Path, n_keys: usize, target: &mut Array2<f64>, index: &dyn Fn(&[String]) -> Option<usize>| -> Result<()> {
            for (keys, vals) in read_rows(path, n_keys, d)? {
                let i = index(&keys).ok_or_else(|| mismatch(&keys.join(",")))?;
                target.row_mut(i).assign(&Array1::from(vals));
            }
            Ok(())
        };

        let mut entity_vecs = Array2::zeros((store.entities().len(), d));
        fill(&dir.join("entities.csv"), 1, &mut entity_vecs, &|k| store.entity_id(&k[0]))?;
        let mut relation_vecs = Array2::zeros((store.relations().len(), d));
        fill(&dir.join("relations.csv"), 1, &mut relation_vecs, &|k| store.relation_id(&k[0]))?;

        let attrs = store.attributes();
        let mut attr_value_vecs: Vec<Array2<f64>> =
            attrs.iter().map(|a| Array2::zeros((a.values.len(), d))).collect();
        for (keys, vals) in read_rows(&dir.join("attr_values.csv"), 2, d)? {
            let a = store.attribute_id(&keys[0]).ok_or_else(|| mismatch(&keys[0]))?;
            let v = store.value_id(a, &keys[1]).ok_or_else(|| mismatch(&keys[1]))?;
            attr_value_vecs[a].row_mut(v).assign(&Array1::from(vals));
        }
        let mut attr_w: Vec<Array2<f64>> = attrs.iter().map(|_| Array2::zeros((d, d))).collect();
        let mut attr_b: Vec<Array1<f64>> = attrs.iter().map(|_| Array1::zeros(d)).collect();
        for (keys, vals) in read_rows(&dir.join("attr_proj.csv"), 2, d)? {
            let a = store.attribute_id(&keys[0]).ok_or_else(|| mismatch(&keys[0]))?;
            if keys[1] == "b" {
                attr_b[a] = Array1::from(vals);
            } else {
                let k: usize = keys[1][1..].parse().map_err(|_| mismatch(&keys[1]))?;
                attr_w[a].row_mut(k).assign(&Array1::from(vals));
            }
        }
        let mut transfer_mats: Vec<Array2<f64>> = match meta.scorer {
            Scorer::TransE => Vec::new(),
            Scorer::TransR => store.relations().iter().map(|_| Array2::zeros((d, d))).collect(),
        };
        for (keys, vals) in read_rows(&dir.join("transfer.csv"), 2, d)? {
            let r = store.relation_id(&keys[0]).ok_or_else(|| mismatch(&keys[0]))?;
            let k: usize = keys[1][1..].parse().map_err(|_| mismatch(&keys[1]))?;
            let m = transfer_mats.get_mut(r).ok_or_else(|| mismatch("transfer matrix"))?;
            m.row_mut(k).assign(&Array1::from(vals));
        }
        Ok(Self {
            params: EmbeddingParams {
                entity_vecs,
                relation_vecs,
                attr_value_vecs,
                transfer_mats,
                attr_w,
                attr_b,
            },
            dim: d,
            scorer: meta.scorer,
            norm: meta.norm,
            b1: meta.b1,
            b2: meta.b2,
            seed: meta.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{AttributeDef, Entity};
    use crate::optim::{central_differences, relative_error};
    use ndarray::array;

    #[test]
    fn transe_examples() {
        assert_eq!(score_transe(&[1., 0.], &[0., 1.], &[1., 1.], Norm::L1, 0.0).unwrap(), 0.0);
        assert_eq!(score_transe(&[0., 0.], &[0., 0.], &[0., 0.], Norm::L2, 0.0).unwrap(), 0.0);
        assert_eq!(score_transe(&[1., 0.], &[0., 0.], &[0., 0.], Norm::L2, 0.0).unwrap(), -1.0);
        assert!(matches!(
            score_transe(&[1., 0.], &[0.], &[0., 0.], Norm::L2, 0.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn transr_examples() {
        let (h, r, t) = ([0.3, -1.2], [0.5, 0.1], [2.0, 0.7]);
        for norm in [Norm::L1, Norm::L2] {
            let e = score_transe(&h, &r, &t, norm, 7.0).unwrap();
            let rr = score_transr(&h, &r, &t, Array2::eye(2).view(), norm, 7.0).unwrap();
            assert_eq!(e, rr);
        }
        let zero = Array2::zeros((2, 2));
        assert_eq!(score_transr(&h, &[0., 0.], &t, zero.view(), Norm::L1, 0.0).unwrap(), 0.0);
        let swap = array![[0., 1.], [1., 0.]];
        assert_eq!(
            score_transr(&[1., 0.], &[0., 0.], &[0., 1.], swap.view(), Norm::L1, 0.0).unwrap(),
            -2.0
        );
        assert!(score_transr(&h, &r, &t, Array2::eye(3).view(), Norm::L1, 0.0).is_err());
    }

    #[test]
    fn attribute_score_examples() {
        let z = Array2::zeros((2, 2));
        assert_eq!(
            score_attribute(&[0.4, -0.2], z.view(), &[0., 0.], &[0., 0.], Norm::L1, 0.0).unwrap(),
            0.0
        );
        let w = array![[0.5, -0.3], [0.2, 0.9]];
        let e = [0.7, -0.4];
        let b: [f64; 2] = [0.1, 0.05];
        let target: Vec<f64> = ArrayView1::from(&e[..])
            .dot(&w)
            .iter()
            .zip(&b)
            .map(|(z, b)| (z + b).tanh())
            .collect();
        assert_eq!(score_attribute(&e, w.view(), &b, &target, Norm::L2, 7.0).unwrap(), 7.0);
        let s = score_attribute(&[1.], array![[1.]].view(), &[0.], &[0.], Norm::L1, 0.0).unwrap();
        assert!((s + 0.761_594_155_955_764_9).abs() < 1e-12);
    }

    fn toy_store(n: usize) -> TripleStore {
        let entities = (0..n)
            .map(|i| Entity {
                name: format!("e{i}"),
                kind: EntityKind::Section,
            })
            .collect();
        let attrs = vec![
            AttributeDef {
                name: "parity".into(),
                values: vec!["even".into(), "odd".into()],
            },
            AttributeDef {
                name: "tri".into(),
                values: vec!["a".into(), "b".into(), "c".into()],
            },
        ];
        let mut s = TripleStore::new(entities, vec!["adj".into()], attrs).unwrap();
        for i in 0..n {
            s.add_relation(RelationTriple {
                head: i,
                relation: 0,
                tail: (i + 1) % n,
            })
            .unwrap();
            s.add_attribute(AttributeTriple {
                entity: i,
                attribute: 0,
                value: i % 2,
            })
            .unwrap();
            s.add_attribute(AttributeTriple {
                entity: i,
                attribute: 1,
                value: i % 3,
            })
            .unwrap();
        }
        s
    }

    fn random_table(store: &TripleStore, scorer: Scorer, norm: Norm, seed: u64) -> EmbeddingTable {
        let mut t = init_table(
            store,
            &EmbedConfig {
                dim: 3,
                scorer,
                norm,
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for seg in t.params.segments_mut() {
            for x in seg.iter_mut() {
                *x += rng.random_range(-0.5..0.5);
            }
        }
        t
    }

    #[test]
    fn uniform_scores_give_uniform_softmax() {
        let store = toy_store(6);
        let mut table = init_table(&store, &EmbedConfig { dim: 2, ..Default::default() }).unwrap();
        table.params.entity_vecs.fill(0.0);
        table.params.relation_vecs.fill(0.0);
        let t = store.relation_triples()[0];
        let negs: Vec<_> = [2, 3, 4].iter().map(|&h| RelationTriple { head: h, ..t }).collect();
        let lp = relation_log_prob(&table, &t, &negs).unwrap();
        assert!((lp - (0.25f64).ln()).abs() < 1e-12);

        table.params.attr_value_vecs[1].fill(0.0);
        let at = AttributeTriple {
            entity: 0,
            attribute: 1,
            value: 2,
        };
        assert!((attribute_log_prob(&table, &at).unwrap() - (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_hand_values() {
        let (lp, _) = log_softmax_first(&[0.0, -1.0]);
        assert!((lp + 0.313_261_687_518_222_8).abs() < 1e-12);
        let (lp, _) = log_softmax_first(&[0.0, -1.0, -2.0]);
        assert!((lp + 0.407_605_964_444_380_4).abs() < 1e-12);
    }

    #[test]
    fn log_prob_monotone_in_true_score() {
        let store = toy_store(5);
        let mut table = random_table(&store, Scorer::TransE, Norm::L2, 1);
        let t = store.relation_triples()[0];
        let negs: Vec<_> = [2, 3].iter().map(|&h| RelationTriple { head: h, ..t }).collect();
        let before = relation_log_prob(&table, &t, &negs).unwrap();
        // move the tail onto head + relation, maximizing the true score
        let target: Vec<f64> = table.entity(t.head).iter().zip(table.relation(0)).map(|(h, r)| h + r).collect();
        table.params.entity_vecs.row_mut(t.tail).assign(&Array1::from(target));
        let after = relation_log_prob(&table, &t, &negs).unwrap();
        assert!(after > before);
        assert!(after <= 0.0);
    }

    #[test]
    fn singleton_range_has_zero_log_prob() {
        let entities = vec![Entity {
            name: "a".into(),
            kind: EntityKind::Section,
        }];
        let attrs = vec![AttributeDef {
            name: "x".into(),
            values: vec!["only".into()],
        }];
        let store = TripleStore::new(entities, vec![], attrs).unwrap();
        let table = init_table(&store, &EmbedConfig { dim: 3, ..Default::default() }).unwrap();
        let t = AttributeTriple {
            entity: 0,
            attribute: 0,
            value: 0,
        };
        assert_eq!(attribute_log_prob(&table, &t).unwrap(), 0.0);
    }

    #[test]
    fn bad_negatives_rejected() {
        let store = toy_store(4);
        let table = init_table(&store, &EmbedConfig { dim: 2, ..Default::default() }).unwrap();
        let t = store.relation_triples()[0];
        assert!(relation_log_prob(&table, &t, &[]).is_err());
        let wrong_tail = RelationTriple { head: 2, tail: 3, ..t };
        assert!(relation_log_prob(&table, &t, &[wrong_tail]).is_err());
    }

    fn check_gradients(scorer: Scorer, norm: Norm, seed: u64) {
        let store = toy_store(5);
        let table = random_table(&store, scorer, norm, seed);
        let rt = store.relation_triples()[1];
        let negs: Vec<_> = [3, 4, 0].iter().map(|&h| RelationTriple { head: h, ..rt }).collect();
        let at = store.attribute_triples()[3];

        let objective = |flat: &[f64]| {
            let mut t = table.clone();
            t.params.set_flat(flat);
            relation_log_prob(&t, &rt, &negs).unwrap() + attribute_log_prob(&t, &at).unwrap()
        };
        let mut grad = table.params.zeros_like();
        relation_log_prob_grad(&table, &rt, &negs, 1.0, &mut grad).unwrap();
        attribute_log_prob_grad(&table, &at, 1.0, &mut grad).unwrap();
        let analytic = grad.to_flat();
        let x0 = table.params.to_flat();
        let coords: Vec<usize> = (0..x0.len()).collect();
        let numeric = central_differences(objective, &x0, &coords, 1e-5);
        let worst = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| relative_error(*a, *n))
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "{scorer:?}/{norm:?}: worst relative error {worst}");
    }

    #[test]
    fn log_prob_gradients_match_finite_differences() {
        for seed in 0..3 {
            check_gradients(Scorer::TransE, Norm::L1, seed);
            check_gradients(Scorer::TransE, Norm::L2, seed);
            check_gradients(Scorer::TransR, Norm::L1, seed);
            check_gradients(Scorer::TransR, Norm::L2, seed);
        }
    }

    #[test]
    fn cooccurrence_gradient_matches_finite_differences() {
        let mut store = toy_store(4);
        store
            .add_cooccurrence(crate::kg::CooccurrenceTriple {
                attr_a: 0,
                attr_b: 1,
                probability: 0.4,
            })
            .unwrap();
        let table = random_table(&store, Scorer::TransE, Norm::L1, 9);
        let mut grad = table.params.zeros_like();
        cooccurrence_penalty_grad(&table, &store, 1.0, &mut grad);
        let x0 = table.params.to_flat();
        let coords: Vec<usize> = (0..x0.len()).collect();
        let numeric = central_differences(
            |flat| {
                let mut t = table.clone();
                t.params.set_flat(flat);
                cooccurrence_penalty(&t, &store)
            },
            &x0,
            &coords,
            1e-5,
        );
        for (a, n) in grad.to_flat().iter().zip(&numeric) {
            assert!(relative_error(*a, *n) < 1e-6);
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let store = toy_store(6);
        let config = EmbedConfig {
            dim: 4,
            epochs: 0,
            seed: 5,
            ..Default::default()
        };
        let out = train_krear(&store, &config).unwrap();
        assert_eq!(out.table, init_table(&store, &config).unwrap());
        assert!(out.loss_history.is_empty());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let store = toy_store(6);
        let config = EmbedConfig {
            dim: 4,
            epochs: 5,
            seed: 3,
            negatives: 3,
            ..Default::default()
        };
        let a = train_krear(&store, &config).unwrap();
        let b = train_krear(&store, &config).unwrap();
        assert_eq!(a.table, b.table);
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn empty_store_rejected() {
        let store = TripleStore::new(Vec::new(), vec!["adj".into()], Vec::new()).unwrap();
        assert!(matches!(
            train_krear(&store, &EmbedConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn knowledge_vector_lookup() {
        use crate::graph::RoadGraph;
        use crate::kg::{build_ckg, CkgOptions, PoiTable, WeatherClass};
        let g = RoadGraph::new(3, &[(0, 1), (1, 2)]).unwrap();
        let weather = [
            WeatherClass::Sunny,
            WeatherClass::Sunny,
            WeatherClass::HeavyRain,
            WeatherClass::HeavyRain,
        ];
        let times = [0, 1, 2, 3];
        let store = build_ckg(&g, &PoiTable::empty(3), &weather, &times, CkgOptions::default()).unwrap();
        let table = init_table(&store, &EmbedConfig { dim: 4, ..Default::default() }).unwrap();
        let kv = extract_knowledge_vectors(&table, &store, g.node_ids(), &times).unwrap();
        assert_eq!(kv.static_vectors().row(1).as_slice().unwrap(), table.entity(1));
        assert_eq!(kv.dynamic_at(0).unwrap(), kv.dynamic_at(1).unwrap());
        assert_ne!(kv.dynamic_at(1).unwrap(), kv.dynamic_at(2).unwrap());
        assert_eq!(kv.dynamic_at(2).unwrap(), kv.dynamic_at(3).unwrap());
        assert!(kv.dynamic_at(4).is_err());
        assert!(extract_knowledge_vectors(&table, &store, g.node_ids(), &[0, 9]).is_err());
        let m = kv.dynamic_matrix_at(2).unwrap();
        assert_eq!(m.dim(), (3, 4));
        let none = kv.ablate(false, false);
        assert_eq!((none.static_dim(), none.dynamic_dim()), (0, 0));
    }

    #[test]
    fn table_save_load_round_trip() {
        use crate::graph::RoadGraph;
        use crate::kg::{build_ckg, CkgOptions, PoiTable, WeatherClass, POI_CATEGORIES};
        let g = RoadGraph::new(3, &[(0, 1), (1, 2)]).unwrap();
        let mut poi = PoiTable::new(POI_CATEGORIES.iter().map(|s| s.to_string()).collect(), 3);
        poi.set(0, "others", 12).unwrap();
        let weather = [WeatherClass::Cloudy, WeatherClass::Foggy];
        let store = build_ckg(&g, &poi, &weather, &[0, 1], CkgOptions::default()).unwrap();
        for scorer in [Scorer::TransE, Scorer::TransR] {
            let table = random_table(&store, scorer, Norm::L2, 4);
            let dir = tempfile::tempdir().unwrap();
            table.save(dir.path(), &store).unwrap();
            assert_eq!(EmbeddingTable::load(dir.path(), &store).unwrap(), table);
        }
    }
}
