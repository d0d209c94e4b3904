//! Road network graph and the spectral graph-convolution primitive.
//!
//! Adjacency is undirected and binary. Self-loops are never stored in the
//! adjacency; they are added only when building the propagation operator
//! `D̃^{-1/2} (A + I) D̃^{-1/2}`.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RoadGraph {
    node_ids: Vec<String>,
    adjacency: Array2<f64>,
}

impl RoadGraph {
    /// Builds a graph over `n_nodes` nodes named `"0"..n`. Duplicate edges
    /// (in either orientation) are accepted idempotently.
    pub fn new(n_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let ids = (0..n_nodes).map(|i| i.to_string()).collect();
        Self::with_node_ids(ids, edges)
    }

    pub fn with_node_ids(node_ids: Vec<String>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = node_ids.len();
        if n == 0 {
            return input_err("graph needs at least one node");
        }
        let mut adjacency = Array2::zeros((n, n));
        for &(a, b) in edges {
            if a >= n || b >= n {
                return input_err(format!("edge ({a},{b}) out of range for {n} nodes"));
            }
            if a == b {
                return input_err(format!("self-loop ({a},{a}) not allowed"));
            }
            adjacency[[a, b]] = 1.0;
            adjacency[[b, a]] = 1.0;
        }
        Ok(Self {
            node_ids,
            adjacency,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn adjacency(&self) -> ArrayView2<'_, f64> {
        self.adjacency.view()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[[a, b]] != 0.0
    }

    /// Undirected edges with `a < b`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n_nodes();
        let mut out = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if self.has_edge(a, b) {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&j| self.has_edge(node, j))
            .collect()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency.row(node).iter().filter(|&&x| x != 0.0).count()
    }

    /// Breadth-first hop distances from `source`; `None` for unreachable nodes.
    pub fn hop_distances(&self, source: usize) -> Vec<Option<usize>> {
        let n = self.n_nodes();
        let mut dist = vec![None; n];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(v) = queue.pop_front() {
            let d = dist[v].unwrap();
            for u in self.neighbors(v) {
                if dist[u].is_none() {
                    dist[u] = Some(d + 1);
                    queue.push_back(u);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.hop_distances(0).iter().all(Option::is_some)
    }

    /// Writes `edges.csv` (`src,dst`) and the `node_id,index` sidecar.
    pub fn write_csv(&self, edges_path: &Path, node_map_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(edges_path)?;
        w.write_record(["src", "dst"])?;
        for (a, b) in self.edges() {
            w.write_record([a.to_string(), b.to_string()])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(node_map_path)?;
        w.write_record(["node_id", "index"])?;
        for (i, id) in self.node_ids.iter().enumerate() {
            w.write_record([id.clone(), i.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an edge list whose endpoints are node indices, with node names
    /// taken from the `node_id,index` sidecar.
    pub fn read_csv(edges_path: &Path, node_map_path: &Path) -> Result<Self> {
        let map_file = node_map_path.display().to_string();
        let mut by_index = BTreeMap::new();
        let mut r = csv::Reader::from_path(node_map_path)?;
        expect_headers(&mut r, &["node_id", "index"], &map_file)?;
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            if rec.len() != 2 {
                return Err(parse_err(&map_file, line, "expected 2 fields"));
            }
            let idx: usize = rec[1]
                .trim()
                .parse()
                .map_err(|_| parse_err(&map_file, line, "bad index"))?;
            if by_index.insert(idx, rec[0].trim().to_string()).is_some() {
                return Err(parse_err(&map_file, line, "duplicate index"));
            }
        }
        let n = by_index.len();
        if by_index.keys().copied().ne(0..n) {
            return input_err(format!("{map_file}: node indices must be 0..{n}"));
        }
        let node_ids = by_index.into_values().collect();

        let edge_file = edges_path.display().to_string();
        let mut edges = Vec::new();
        let mut r = csv::Reader::from_path(edges_path)?;
        expect_headers(&mut r, &["src", "dst"], &edge_file)?;
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| parse_err(&edge_file, line, "bad node index"))
            };
            if rec.len() != 2 {
                return Err(parse_err(&edge_file, line, "expected 2 fields"));
            }
            edges.push((parse(&rec[0])?, parse(&rec[1])?));
        }
        Self::with_node_ids(node_ids, &edges)
    }
}

pub(crate) fn parse_err(file: &str, line: usize, msg: &str) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        msg: msg.to_string(),
    }
}

pub(crate) fn expect_headers<R: std::io::Read>(
    r: &mut csv::Reader<R>,
    expected: &[&str],
    file: &str,
) -> Result<()> {
    let headers = r.headers()?;
    if headers.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(parse_err(
            file,
            1,
            &format!("expected header {}", expected.join(",")),
        ));
    }
    Ok(())
}

/// Symmetric-normalized propagation operator with self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationMatrix(Array2<f64>);

impl PropagationMatrix {
    pub fn from_graph(g: &RoadGraph) -> Self {
        let n = g.n_nodes();
        let mut a = g.adjacency.clone();
        for i in 0..n {
            a[[i, i]] += 1.0;
        }
        let inv_sqrt: Vec<f64> = a.rows().into_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
        for ((i, j), x) in a.indexed_iter_mut() {
            *x *= inv_sqrt[i] * inv_sqrt[j];
        }
        Self(a)
    }

    pub fn identity(n: usize) -> Self {
        Self(Array2::eye(n))
    }

    pub fn n_nodes(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    /// Wraps an arbitrary square matrix. Used for permutation tests and for
    /// graph-free baselines.
    pub fn from_matrix(m: Array2<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return shape_err(format!("propagation matrix must be square, got {:?}", m.dim()));
        }
        Ok(Self(m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `activation(p · h · w)`.
pub fn gcn_layer(
    p: &PropagationMatrix,
    h: ArrayView2<'_, f64>,
    w: ArrayView2<'_, f64>,
    activation: Activation,
) -> Result<Array2<f64>> {
    if h.nrows() != p.n_nodes() {
        return shape_err(format!(
            "features have {} rows, graph has {} nodes",
            h.nrows(),
            p.n_nodes()
        ));
    }
    if h.ncols() != w.nrows() {
        return shape_err(format!(
            "feature width {} does not match weight rows {}",
            h.ncols(),
            w.nrows()
        ));
    }
    let mut out = p.0.dot(&h).dot(&w);
    out.mapv_inplace(|x| activation.apply(x));
    Ok(out)
}
