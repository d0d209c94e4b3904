//! City knowledge graph of road relations and POI or weather attribute
//! triples. POI co-occurrence probabilities are kept alongside.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::graph::{expect_headers, parse_err, RoadGraph};

pub const ADJ: &str = "adj";
pub const ADJ2: &str = "adj2";
pub const WEATHER: &str = "weather";
pub const OBSERVED_AT: &str = "observed-at";

/// Ordinal classes for POI counts. Upper bounds are inclusive.
pub const POI_BUCKETS: [&str; 5] = ["0", "1-5", "6-15", "16-50", ">50"];

pub fn poi_bucket(count: u32) -> usize {
    match count {
        0 => 0,
        1..=5 => 1,
        6..=15 => 2,
        16..=50 => 3,
        _ => 4,
    }
}

pub const POI_CATEGORIES: [&str; 9] = [
    "food services",
    "enterprises",
    "shopping services",
    "transportation services",
    "education services",
    "living services",
    "medical services",
    "accommodation services",
    "others",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeatherClass {
    Sunny,
    Cloudy,
    Foggy,
    LightRain,
    HeavyRain,
}

impl WeatherClass {
    pub const ALL: [WeatherClass; 5] = [
        WeatherClass::Sunny,
        WeatherClass::Cloudy,
        WeatherClass::Foggy,
        WeatherClass::LightRain,
        WeatherClass::HeavyRain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeatherClass::Sunny => "sunny",
            WeatherClass::Cloudy => "cloudy",
            WeatherClass::Foggy => "foggy",
            WeatherClass::LightRain => "light rain",
            WeatherClass::HeavyRain => "heavy rain",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for WeatherClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeatherClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeatherClass::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| Error::Input(format!("unknown weather class {s:?}")))
    }
}

/// Per-section POI counts over a declared category list.
#[derive(Debug, Clone, PartialEq)]
pub struct PoiTable {
    categories: Vec<String>,
    counts: Vec<Vec<Option<u32>>>,
}

impl PoiTable {
    pub fn new(categories: Vec<String>, n_nodes: usize) -> Self {
        let k = categories.len();
        Self {
            categories,
            counts: vec![vec![None; k]; n_nodes],
        }
    }

    pub fn empty(n_nodes: usize) -> Self {
        Self::new(Vec::new(), n_nodes)
    }

    pub fn set(&mut self, node: usize, category: &str, count: u32) -> Result<()> {
        let c = self.category_index(category)?;
        let n = self.counts.len();
        let row = self
            .counts
            .get_mut(node)
            .ok_or_else(|| Error::Input(format!("node {node} out of range for {n} nodes")))?;
        row[c] = Some(count);
        Ok(())
    }

    pub fn category_index(&self, category: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c == category)
            .ok_or_else(|| Error::Input(format!("unknown POI category {category:?}")))
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn n_nodes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, node: usize, category: usize) -> Option<u32> {
        self.counts[node][category]
    }

    /// Missing entries count as zero.
    pub fn count(&self, node: usize, category: usize) -> u32 {
        self.counts[node][category].unwrap_or(0)
    }

    /// Long-format rows `node,category,count` for every recorded entry.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["node", "category", "count"])?;
        for (node, row) in self.counts.iter().enumerate() {
            for (c, count) in row.iter().enumerate() {
                if let Some(count) = count {
                    w.write_record([node.to_string(), self.categories[c].clone(), count.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, categories: Vec<String>, n_nodes: usize) -> Result<Self> {
        let file = path.display().to_string();
        let mut table = Self::new(categories, n_nodes);
        let mut r = csv::Reader::from_path(path)?;
        expect_headers(&mut r, &["node", "category", "count"], &file)?;
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            if rec.len() != 3 {
                return Err(parse_err(&file, line, "expected 3 fields"));
            }
            let node = rec[0]
                .trim()
                .parse()
                .map_err(|_| parse_err(&file, line, "bad node index"))?;
            let count = rec[2]
                .trim()
                .parse()
                .map_err(|_| parse_err(&file, line, "bad count"))?;
            table
                .set(node, rec[1].trim(), count)
                .map_err(|e| parse_err(&file, line, &e.to_string()))?;
        }
        Ok(table)
    }
}

pub fn write_weather_csv(path: &Path, weather: &[WeatherClass]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time_id", "class"])?;
    for (t, c) in weather.iter().enumerate() {
        w.write_record([t.to_string(), c.name().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_weather_csv(path: &Path) -> Result<Vec<WeatherClass>> {
    let file = path.display().to_string();
    let mut r = csv::Reader::from_path(path)?;
    expect_headers(&mut r, &["time_id", "class"], &file)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let t: usize = rec
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| parse_err(&file, line, "bad time_id"))?;
        if t != out.len() {
            return Err(parse_err(&file, line, "time ids must be consecutive from 0"));
        }
        let class = rec
            .get(1)
            .ok_or_else(|| parse_err(&file, line, "missing class"))?
            .parse()
            .map_err(|e: Error| parse_err(&file, line, &e.to_string()))?;
        out.push(class);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Section,
    Time,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub kind: EntityKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RelationTriple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttributeTriple {
    pub entity: usize,
    pub attribute: usize,
    pub value: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CooccurrenceTriple {
    pub attr_a: usize,
    pub attr_b: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Vocabulary {
    entities: Vec<Entity>,
    relations: Vec<String>,
    attributes: Vec<AttributeDef>,
}

/// Indexed triple collections over entity, relation and attribute vocabularies.
#[derive(Debug, Clone)]
pub struct TripleStore {
    vocab: Vocabulary,
    entity_index: HashMap<String, usize>,
    relation_triples: Vec<RelationTriple>,
    attribute_triples: Vec<AttributeTriple>,
    cooccurrence: Vec<CooccurrenceTriple>,
    by_head: Vec<Vec<usize>>,
    by_tail: Vec<Vec<usize>>,
    by_entity: Vec<Vec<usize>>,
    positives: HashSet<RelationTriple>,
    cooc_pairs: HashSet<(usize, usize)>,
}

impl PartialEq for TripleStore {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab
            && self.relation_triples == other.relation_triples
            && self.attribute_triples == other.attribute_triples
            && self.cooccurrence == other.cooccurrence
    }
}

impl TripleStore {
    pub fn new(entities: Vec<Entity>, relations: Vec<String>, attributes: Vec<AttributeDef>) -> Result<Self> {
        let mut entity_index = HashMap::with_capacity(entities.len());
        for (i, e) in entities.iter().enumerate() {
            if entity_index.insert(e.name.clone(), i).is_some() {
                return input_err(format!("duplicate entity {:?}", e.name));
            }
        }
        let n = entities.len();
        Ok(Self {
            vocab: Vocabulary {
                entities,
                relations,
                attributes,
            },
            entity_index,
            relation_triples: Vec::new(),
            attribute_triples: Vec::new(),
            cooccurrence: Vec::new(),
            by_head: vec![Vec::new(); n],
            by_tail: vec![Vec::new(); n],
            by_entity: vec![Vec::new(); n],
            positives: HashSet::new(),
            cooc_pairs: HashSet::new(),
        })
    }

    pub fn entities(&self) -> &[Entity] {
        &self.vocab.entities
    }

    pub fn relations(&self) -> &[String] {
        &self.vocab.relations
    }

    pub fn attributes(&self) -> &[AttributeDef] {
        &self.vocab.attributes
    }

    pub fn relation_triples(&self) -> &[RelationTriple] {
        &self.relation_triples
    }

    pub fn attribute_triples(&self) -> &[AttributeTriple] {
        &self.attribute_triples
    }

    pub fn cooccurrence(&self) -> &[CooccurrenceTriple] {
        &self.cooccurrence
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_index.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.vocab.relations.iter().position(|r| r == name)
    }

    pub fn attribute_id(&self, name: &str) -> Option<usize> {
        self.vocab.attributes.iter().position(|a| a.name == name)
    }

    pub fn value_id(&self, attribute: usize, value: &str) -> Option<usize> {
        self.vocab.attributes[attribute]
            .values
            .iter()
            .position(|v| v == value)
    }

    pub fn entities_of_kind(&self, kind: EntityKind) -> Vec<usize> {
        (0..self.vocab.entities.len())
            .filter(|&i| self.vocab.entities[i].kind == kind)
            .collect()
    }

    pub fn triples_with_head(&self, entity: usize) -> impl Iterator<Item = &RelationTriple> {
        self.by_head[entity].iter().map(|&i| &self.relation_triples[i])
    }

    pub fn triples_with_tail(&self, entity: usize) -> impl Iterator<Item = &RelationTriple> {
        self.by_tail[entity].iter().map(|&i| &self.relation_triples[i])
    }

    pub fn attributes_of(&self, entity: usize) -> impl Iterator<Item = &AttributeTriple> {
        self.by_entity[entity]
            .iter()
            .map(|&i| &self.attribute_triples[i])
    }

    pub fn contains_relation(&self, t: &RelationTriple) -> bool {
        self.positives.contains(t)
    }

    fn check_entity(&self, e: usize) -> Result<()> {
        if e >= self.vocab.entities.len() {
            return input_err(format!("entity id {e} out of range"));
        }
        Ok(())
    }

    /// Adds a relation triple; exact duplicates are ignored.
    pub fn add_relation(&mut self, t: RelationTriple) -> Result<()> {
        self.check_entity(t.head)?;
        self.check_entity(t.tail)?;
        if t.relation >= self.vocab.relations.len() {
            return input_err(format!("relation id {} out of range", t.relation));
        }
        if t.head == t.tail {
            return input_err(format!(
                "relation {} cannot link entity {:?} to itself",
                self.vocab.relations[t.relation], self.vocab.entities[t.head].name
            ));
        }
        if !self.positives.insert(t) {
            return Ok(());
        }
        let idx = self.relation_triples.len();
        self.relation_triples.push(t);
        self.by_head[t.head].push(idx);
        self.by_tail[t.tail].push(idx);
        Ok(())
    }

    pub fn add_attribute(&mut self, t: AttributeTriple) -> Result<()> {
        self.check_entity(t.entity)?;
        let Some(attr) = self.vocab.attributes.get(t.attribute) else {
            return input_err(format!("attribute id {} out of range", t.attribute));
        };
        if t.value >= attr.values.len() {
            return input_err(format!(
                "value id {} outside the range of attribute {:?}",
                t.value, attr.name
            ));
        }
        let idx = self.attribute_triples.len();
        self.attribute_triples.push(t);
        self.by_entity[t.entity].push(idx);
        Ok(())
    }

    pub fn add_cooccurrence(&mut self, t: CooccurrenceTriple) -> Result<()> {
        let n = self.vocab.attributes.len();
        if t.attr_a >= n || t.attr_b >= n {
            return input_err("co-occurrence attribute out of range");
        }
        if !(0.0..=1.0).contains(&t.probability) {
            return input_err(format!("co-occurrence probability {} outside [0,1]", t.probability));
        }
        let key = (t.attr_a.min(t.attr_b), t.attr_a.max(t.attr_b));
        if !self.cooc_pairs.insert(key) {
            return input_err(format!(
                "duplicate co-occurrence pair ({:?}, {:?})",
                self.vocab.attributes[key.0].name, self.vocab.attributes[key.1].name
            ));
        }
        self.cooccurrence.push(t);
        Ok(())
    }
}

pub fn time_entity_name(time_id: usize) -> String {
    format!("t{time_id}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CkgOptions {
    /// Emit `adj2` triples for section pairs at hop distance exactly 2.
    pub include_adj2: bool,
    /// Emit `(section, observed-at, time)` linkage triples.
    pub link_sections_to_times: bool,
}

impl Default for CkgOptions {
    fn default() -> Self {
        Self {
            include_adj2: false,
            link_sections_to_times: true,
        }
    }
}

/// Assembles the city knowledge graph from the road network, POI counts and
/// the weather series restricted to `time_index`.
pub fn build_ckg(
    graph: &RoadGraph,
    poi: &PoiTable,
    weather: &[WeatherClass],
    time_index: &[usize],
    opts: CkgOptions,
) -> Result<TripleStore> {
    let n = graph.n_nodes();
    if poi.n_nodes() != n {
        return input_err(format!(
            "POI table covers {} sections, graph has {n}",
            poi.n_nodes()
        ));
    }
    if let Some(&t) = time_index.iter().find(|&&t| t >= weather.len()) {
        return input_err(format!("weather series has no entry for time {t}"));
    }

    let mut entities: Vec<Entity> = graph
        .node_ids()
        .iter()
        .map(|id| Entity {
            name: id.clone(),
            kind: EntityKind::Section,
        })
        .collect();
    entities.extend(time_index.iter().map(|&t| Entity {
        name: time_entity_name(t),
        kind: EntityKind::Time,
    }));

    let bucket_values: Vec<String> = POI_BUCKETS.iter().map(|s| s.to_string()).collect();
    let mut attributes: Vec<AttributeDef> = poi
        .categories()
        .iter()
        .map(|c| AttributeDef {
            name: c.clone(),
            values: bucket_values.clone(),
        })
        .collect();
    let n_poi = attributes.len();
    let weather_attr = attributes.len();
    if !time_index.is_empty() {
        attributes.push(AttributeDef {
            name: WEATHER.to_string(),
            values: WeatherClass::ALL.iter().map(|c| c.name().to_string()).collect(),
        });
    }
    let link_attr = attributes.len();
    let linking = opts.link_sections_to_times && !time_index.is_empty();
    if linking {
        attributes.push(AttributeDef {
            name: OBSERVED_AT.to_string(),
            values: time_index.iter().map(|&t| time_entity_name(t)).collect(),
        });
    }

    let relations = vec![ADJ.to_string(), ADJ2.to_string()];
    let mut store = TripleStore::new(entities, relations, attributes)?;

    for (a, b) in graph.edges() {
        store.add_relation(RelationTriple {
            head: a,
            relation: 0,
            tail: b,
        })?;
    }
    if opts.include_adj2 {
        for a in 0..n {
            for (b, d) in graph.hop_distances(a).into_iter().enumerate() {
                if b > a && d == Some(2) {
                    store.add_relation(RelationTriple {
                        head: a,
                        relation: 1,
                        tail: b,
                    })?;
                }
            }
        }
    }

    for node in 0..n {
        for c in 0..n_poi {
            if let Some(count) = poi.get(node, c) {
                store.add_attribute(AttributeTriple {
                    entity: node,
                    attribute: c,
                    value: poi_bucket(count),
                })?;
            }
        }
    }

    for (k, &t) in time_index.iter().enumerate() {
        store.add_attribute(AttributeTriple {
            entity: n + k,
            attribute: weather_attr,
            value: weather[t].index(),
        })?;
    }
    if linking {
        for node in 0..n {
            for k in 0..time_index.len() {
                store.add_attribute(AttributeTriple {
                    entity: node,
                    attribute: link_attr,
                    value: k,
                })?;
            }
        }
    }

    for a in 0..n_poi {
        for b in a + 1..n_poi {
            let both = (0..n)
                .filter(|&v| poi.count(v, a) > 0 && poi.count(v, b) > 0)
                .count();
            store.add_cooccurrence(CooccurrenceTriple {
                attr_a: a,
                attr_b: b,
                probability: both as f64 / n as f64,
            })?;
        }
    }
    Ok(store)
}

const RANDOM_ATTEMPTS: usize = 32;

/// Replaces the head with a uniformly drawn entity of the same kind such that
/// the corrupted triple is neither a positive nor a self-link.
pub fn negative_sample_relation<R: Rng + ?Sized>(
    t: &RelationTriple,
    store: &TripleStore,
    rng: &mut R,
) -> Result<RelationTriple> {
    let kind = store.entities()[t.head].kind;
    let pool = store.entities_of_kind(kind);
    let valid = |h: usize| {
        let c = RelationTriple { head: h, ..*t };
        h != t.head && h != t.tail && !store.contains_relation(&c)
    };
    if pool.len() >= 2 {
        for _ in 0..RANDOM_ATTEMPTS {
            let h = pool[rng.random_range(0..pool.len())];
            if valid(h) {
                return Ok(RelationTriple { head: h, ..*t });
            }
        }
    }
    // Rejection sampling stalled; drawing from the explicit candidate list
    // keeps the distribution uniform over valid corruptions.
    let candidates: Vec<usize> = pool.into_iter().filter(|&h| valid(h)).collect();
    if candidates.is_empty() {
        return Err(Error::Sampling(format!(
            "no valid head corruption for ({:?}, {:?}, {:?})",
            store.entities()[t.head].name,
            store.relations()[t.relation],
            store.entities()[t.tail].name
        )));
    }
    let h = candidates[rng.random_range(0..candidates.len())];
    Ok(RelationTriple { head: h, ..*t })
}

/// Same entity and attribute, uniformly drawn different value.
pub fn negative_sample_attribute<R: Rng + ?Sized>(
    t: &AttributeTriple,
    store: &TripleStore,
    rng: &mut R,
) -> Result<AttributeTriple> {
    let attr = &store.attributes()[t.attribute];
    let k = attr.values.len();
    if k < 2 {
        return Err(Error::Sampling(format!(
            "attribute {:?} has a single value",
            attr.name
        )));
    }
    let mut v = rng.random_range(0..k - 1);
    if v >= t.value {
        v += 1;
    }
    Ok(AttributeTriple { value: v, ..*t })
}

pub const RELATIONS_FILE: &str = "relations.csv";
pub const ATTRIBUTES_FILE: &str = "attributes.csv";
pub const COOCCURRENCE_FILE: &str = "cooccurrence.csv";
pub const VOCAB_FILE: &str = "vocab.json";

impl TripleStore {
    /// Writes the three triple files plus a `vocab.json` sidecar recording
    /// entity kinds and full attribute value ranges.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let ents = &self.vocab.entities;

        let mut w = csv::Writer::from_path(dir.join(RELATIONS_FILE))?;
        w.write_record(["head", "relation", "tail"])?;
        for t in &self.relation_triples {
            w.write_record([
                ents[t.head].name.as_str(),
                self.vocab.relations[t.relation].as_str(),
                ents[t.tail].name.as_str(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join(ATTRIBUTES_FILE))?;
        w.write_record(["entity", "attribute", "value"])?;
        for t in &self.attribute_triples {
            let a = &self.vocab.attributes[t.attribute];
            w.write_record([
                ents[t.entity].name.as_str(),
                a.name.as_str(),
                a.values[t.value].as_str(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join(COOCCURRENCE_FILE))?;
        w.write_record(["attr_a", "attr_b", "probability"])?;
        for t in &self.cooccurrence {
            let attrs = &self.vocab.attributes;
            w.write_record([
                attrs[t.attr_a].name.clone(),
                attrs[t.attr_b].name.clone(),
                t.probability.to_string(),
            ])?;
        }
        w.flush()?;

        fs::write(dir.join(VOCAB_FILE), serde_json::to_string_pretty(&self.vocab)?)?;
        Ok(())
    }

    /// Loads a store written by [`TripleStore::save`]. Without `vocab.json`
    /// the vocabularies are inferred from the rows. Relations must be `adj`
    /// or `adj2`; integer POI values are bucketed and weather heads become
    /// time entities.
    pub fn load(dir: &Path) -> Result<Self> {
        let rel_rows = read_rows(&dir.join(RELATIONS_FILE), ["head", "relation", "tail"])?;
        let att_rows = read_rows(&dir.join(ATTRIBUTES_FILE), ["entity", "attribute", "value"])?;
        let cooc_rows = read_rows(
            &dir.join(COOCCURRENCE_FILE),
            ["attr_a", "attr_b", "probability"],
        )?;
        let vocab_path = dir.join(VOCAB_FILE);
        let vocab = if vocab_path.exists() {
            serde_json::from_str(&fs::read_to_string(&vocab_path)?)?
        } else {
            infer_vocabulary(&rel_rows, &att_rows, &cooc_rows)?
        };
        let mut store = TripleStore::new(vocab.entities, vocab.relations, vocab.attributes)?;

        for row in &rel_rows {
            let lookup = |name: &str| {
                store
                    .entity_id(name)
                    .ok_or_else(|| row.err(&format!("unknown entity {name:?}")))
            };
            let head = lookup(&row.fields[0])?;
            let tail = lookup(&row.fields[2])?;
            let relation = store
                .relation_id(&row.fields[1])
                .ok_or_else(|| row.err(&format!("unknown relation {:?}", row.fields[1])))?;
            store
                .add_relation(RelationTriple {
                    head,
                    relation,
                    tail,
                })
                .map_err(|e| row.err(&e.to_string()))?;
        }
        for row in &att_rows {
            let entity = store
                .entity_id(&row.fields[0])
                .ok_or_else(|| row.err(&format!("unknown entity {:?}", row.fields[0])))?;
            let attribute = store
                .attribute_id(&row.fields[1])
                .ok_or_else(|| row.err(&format!("unknown attribute {:?}", row.fields[1])))?;
            let value = resolve_value(&store.vocab.attributes[attribute], &row.fields[2])
                .ok_or_else(|| row.err(&format!("value {:?} outside attribute range", row.fields[2])))?;
            store
                .add_attribute(AttributeTriple {
                    entity,
                    attribute,
                    value,
                })
                .map_err(|e| row.err(&e.to_string()))?;
        }
        for row in &cooc_rows {
            let attr = |name: &str| {
                store
                    .attribute_id(name)
                    .ok_or_else(|| row.err(&format!("unknown attribute {name:?}")))
            };
            let attr_a = attr(&row.fields[0])?;
            let attr_b = attr(&row.fields[1])?;
            let probability = row.fields[2]
                .parse()
                .map_err(|_| row.err("bad probability"))?;
            store
                .add_cooccurrence(CooccurrenceTriple {
                    attr_a,
                    attr_b,
                    probability,
                })
                .map_err(|e| row.err(&e.to_string()))?;
        }
        Ok(store)
    }
}

struct Row {
    file: String,
    line: usize,
    fields: Vec<String>,
}

impl Row {
    fn err(&self, msg: &str) -> Error {
        parse_err(
            &self.file,
            self.line,
            &format!("{msg} in row {:?}", self.fields.join(",")),
        )
    }
}

fn read_rows(path: &Path, header: [&str; 3]) -> Result<Vec<Row>> {
    let file = path.display().to_string();
    let mut r = csv::Reader::from_path(path)?;
    expect_headers(&mut r, &header, &file)?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(&file, line, &e.to_string()))?;
        if rec.len() != 3 {
            return Err(parse_err(&file, line, "expected 3 fields"));
        }
        rows.push(Row {
            file: file.clone(),
            line,
            fields: rec.iter().map(|s| s.trim().to_string()).collect(),
        });
    }
    Ok(rows)
}

fn is_bucket_range(values: &[String]) -> bool {
    values.iter().map(String::as_str).eq(POI_BUCKETS)
}

fn resolve_value(attr: &AttributeDef, raw: &str) -> Option<usize> {
    if let Some(v) = attr.values.iter().position(|v| v == raw) {
        return Some(v);
    }
    if is_bucket_range(&attr.values) {
        return raw.parse::<u32>().ok().map(poi_bucket);
    }
    None
}

fn infer_vocabulary(rel_rows: &[Row], att_rows: &[Row], cooc_rows: &[Row]) -> Result<Vocabulary> {
    let relations = vec![ADJ.to_string(), ADJ2.to_string()];
    let mut names: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    let mut time_like = HashSet::new();
    let mut push = |name: &str, names: &mut Vec<String>| {
        if seen.insert(name.to_string()) {
            names.push(name.to_string());
        }
    };

    for row in rel_rows {
        if !relations.contains(&row.fields[1]) {
            return Err(row.err(&format!("unknown relation {:?}", row.fields[1])));
        }
        push(&row.fields[0], &mut names);
        push(&row.fields[2], &mut names);
    }

    let mut attributes: Vec<AttributeDef> = Vec::new();
    for row in att_rows {
        let (entity, attr, value) = (&row.fields[0], &row.fields[1], &row.fields[2]);
        push(entity, &mut names);
        if attr == WEATHER {
            time_like.insert(entity.clone());
        }
        if attr == OBSERVED_AT {
            push(value, &mut names);
            time_like.insert(value.clone());
        }
        let idx = match attributes.iter().position(|a| &a.name == attr) {
            Some(i) => i,
            None => {
                let values = if attr == WEATHER {
                    WeatherClass::ALL.iter().map(|c| c.name().to_string()).collect()
                } else if value.parse::<u32>().is_ok() || POI_BUCKETS.contains(&value.as_str()) {
                    POI_BUCKETS.iter().map(|s| s.to_string()).collect()
                } else {
                    Vec::new()
                };
                attributes.push(AttributeDef {
                    name: attr.clone(),
                    values,
                });
                attributes.len() - 1
            }
        };
        let def = &mut attributes[idx];
        if resolve_value(def, value).is_none() {
            if attr == WEATHER || is_bucket_range(&def.values) {
                return Err(row.err(&format!("value {value:?} outside attribute range")));
            }
            def.values.push(value.clone());
        }
    }
    for row in cooc_rows {
        for name in &row.fields[..2] {
            if !attributes.iter().any(|a| &a.name == name) {
                attributes.push(AttributeDef {
                    name: name.clone(),
                    values: POI_BUCKETS.iter().map(|s| s.to_string()).collect(),
                });
            }
        }
    }

    let entities = names
        .into_iter()
        .map(|name| {
            let kind = if time_like.contains(&name) {
                EntityKind::Time
            } else {
                EntityKind::Section
            };
            Entity { name, kind }
        })
        .collect();
    Ok(Vocabulary {
        entities,
        relations,
        attributes,
    })
}
