//! Knowledge fusion followed by graph convolution.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::embed::KnowledgeVectors;
use crate::error::{shape_err, Result};
use crate::graph::{gcn_layer, Activation, PropagationMatrix};

/// Fusion weight rows are ordered `[speed, e_s..., e_d...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KsCellParams {
    pub fusion_w: Array2<f64>,
    pub fusion_b: Array1<f64>,
    pub gcn_w: Vec<Array2<f64>>,
    pub activation: Activation,
}

impl KsCellParams {
    pub fn zeros(d_s: usize, d_d: usize, d_f: usize, d_out: usize, layers: usize) -> Self {
        let gcn_w = (0..layers)
            .map(|l| Array2::zeros((if l == 0 { d_f } else { d_out }, d_out)))
            .collect();
        Self {
            fusion_w: Array2::zeros((1 + d_s + d_d, d_f)),
            fusion_b: Array1::zeros(d_f),
            gcn_w,
            activation: Activation::Relu,
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn init<R: Rng>(d_s: usize, d_d: usize, d_f: usize, d_out: usize, layers: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(d_s, d_d, d_f, d_out, layers);
        xavier(&mut p.fusion_w, rng);
        for w in &mut p.gcn_w {
            xavier(w, rng);
        }
        p
    }

    /// `d_s + d_d`.
    pub fn knowledge_dim(&self) -> usize {
        self.fusion_w.nrows() - 1
    }

    pub fn fused_dim(&self) -> usize {
        self.fusion_w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.gcn_w.last().map_or(self.fused_dim(), |w| w.ncols())
    }
}

pub(crate) fn xavier<R: Rng>(w: &mut Array2<f64>, rng: &mut R) {
    let (a, b) = w.dim();
    if a + b == 0 {
        return;
    }
    let bound = (6.0 / (a + b) as f64).sqrt();
    w.mapv_inplace(|_| rng.random_range(-bound..bound));
}

/// `tanh([x ∥ e_s ∥ e_d] W + b)`, one row per node.
pub fn fuse(
    x: ArrayView1<'_, f64>,
    e_s: ArrayView2<'_, f64>,
    e_d: ArrayView2<'_, f64>,
    params: &KsCellParams,
) -> Result<Array2<f64>> {
    let n = x.len();
    if e_s.nrows() != n || e_d.nrows() != n {
        return shape_err(format!(
            "fusion inputs have {n}, {}, {} rows",
            e_s.nrows(),
            e_d.nrows()
        ));
    }
    let width = 1 + e_s.ncols() + e_d.ncols();
    if params.fusion_w.nrows() != width {
        return shape_err(format!(
            "fusion weight has {} rows, inputs have width {width}",
            params.fusion_w.nrows()
        ));
    }
    let x_col = x.insert_axis(Axis(1));
    let z = concatenate(Axis(1), &[x_col, e_s, e_d]).expect("row counts checked");
    let mut out = z.dot(&params.fusion_w) + &params.fusion_b;
    out.mapv_inplace(f64::tanh);
    Ok(out)
}

/// Stacked graph convolutions over the fused features at time `t`.
pub fn ks_cell_forward(
    x: ArrayView1<'_, f64>,
    kv: &KnowledgeVectors,
    t: usize,
    p: &PropagationMatrix,
    params: &KsCellParams,
) -> Result<Array2<f64>> {
    let e_d = kv.dynamic_matrix_at(t)?;
    let mut h = fuse(x, kv.static_vectors(), e_d.view(), params)?;
    for w in &params.gcn_w {
        h = gcn_layer(p, h.view(), w.view(), params.activation)?;
    }
    Ok(h)
}

/// Splits the fusion weight into its speed row and static/dynamic blocks.
pub(crate) fn fusion_blocks(
    w: &Array2<f64>,
    d_s: usize,
) -> (ArrayView1<'_, f64>, ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
    (
        w.row(0),
        w.slice(s![1..1 + d_s, ..]),
        w.slice(s![1 + d_s.., ..]),
    )
}
