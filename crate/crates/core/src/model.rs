//! The composed forecaster: KS-Cell and GRU unrolled over an input window,
//! with a batched forward pass and hand-written reverse-mode gradients.
//!
//! A batch of `B` windows is processed as one stacked matrix of `B * n` rows;
//! rows `b*n .. (b+1)*n` belong to window `b`. Graph propagation is applied
//! block by block, everything else row-wise.

use std::fs;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::KnowledgeVectors;
use crate::error::{input_err, shape_err, Error, Result};
use crate::graph::{sigmoid, PropagationMatrix};
use crate::gru::{affine_split, GruParams};
use crate::kscell::{fusion_blocks, KsCellParams};
use crate::optim::ParamSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Static knowledge width; 0 disables the static pathway.
    pub d_s: usize,
    /// Dynamic knowledge width; 0 disables the dynamic pathway.
    pub d_d: usize,
    pub d_f: usize,
    pub d_out: usize,
    pub d_h: usize,
    pub gcn_layers: usize,
    pub horizon: usize,
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_s: 20,
            d_d: 20,
            d_f: 32,
            d_out: 32,
            d_h: 128,
            gcn_layers: 1,
            horizon: 1,
            window: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_f == 0 || self.d_out == 0 || self.d_h == 0 {
            return input_err("layer widths must be positive");
        }
        if self.gcn_layers == 0 || self.horizon == 0 || self.window == 0 {
            return input_err("gcn_layers, horizon and window must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    pub config: ModelConfig,
    pub cell: KsCellParams,
    pub gru: GruParams,
}

/// Aligned input and target series. Inputs may be perturbed copies of the
/// targets; both are `T x n` and row `k` is time id `time_ids[k]`.
#[derive(Debug, Clone, Copy)]
pub struct Series<'a> {
    pub inputs: ArrayView2<'a, f64>,
    pub targets: ArrayView2<'a, f64>,
    pub time_ids: &'a [usize],
}

impl<'a> Series<'a> {
    pub fn new(inputs: ArrayView2<'a, f64>, targets: ArrayView2<'a, f64>, time_ids: &'a [usize]) -> Result<Self> {
        if inputs.dim() != targets.dim() || inputs.nrows() != time_ids.len() {
            return shape_err(format!(
                "inputs {:?}, targets {:?}, {} time ids",
                inputs.dim(),
                targets.dim(),
                time_ids.len()
            ));
        }
        Ok(Self {
            inputs,
            targets,
            time_ids,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.inputs.ncols()
    }
}

struct StepCache {
    x: Array1<f64>,
    /// `[fused, gcn_1, ..., gcn_L]`
    g: Vec<Array2<f64>>,
    /// GCN pre-activations per layer.
    a: Vec<Array2<f64>>,
    h_prev: Array2<f64>,
    u: Array2<f64>,
    r: Array2<f64>,
    c: Array2<f64>,
    rh: Array2<f64>,
}

struct ForwardCache {
    steps: Vec<StepCache>,
    dyn_rows: Vec<Vec<usize>>,
    h: Array2<f64>,
    pred: Array2<f64>,
}

fn check_finite(a: &Array2<f64>, layer: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { layer: layer.to_string() })
    }
}

/// Block-wise `out_b = P · y_b` (or `Pᵀ · y_b`).
fn propagate(p: ArrayView2<'_, f64>, y: &Array2<f64>, n: usize) -> Array2<f64> {
    let mut out = Array2::zeros(y.raw_dim());
    for b in 0..y.nrows() / n {
        let rows = s![b * n..(b + 1) * n, ..];
        general_mat_mul(1.0, &p, &y.slice(rows), 0.0, &mut out.slice_mut(rows));
    }
    out
}

impl ForecastModel {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let cell = KsCellParams::zeros(config.d_s, config.d_d, config.d_f, config.d_out, config.gcn_layers);
        let gru = GruParams::zeros(config.d_out, config.d_h, config.horizon);
        Ok(Self { config, cell, gru })
    }

    /// Seeded Xavier initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let cell = KsCellParams::init(c.d_s, c.d_d, c.d_f, c.d_out, c.gcn_layers, &mut rng);
        let gru = GruParams::init(c.d_out, c.d_h, c.horizon, &mut rng);
        Ok(Self { config, cell, gru })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone()).expect("config already validated")
    }

    fn check_context(&self, series: &Series<'_>, kv: &KnowledgeVectors, p: &PropagationMatrix) -> Result<()> {
        let n = series.n_nodes();
        if p.n_nodes() != n || kv.n_nodes() != n {
            return shape_err(format!(
                "series has {n} nodes, propagation {} and knowledge {}",
                p.n_nodes(),
                kv.n_nodes()
            ));
        }
        if kv.static_dim() != self.config.d_s || kv.dynamic_dim() != self.config.d_d {
            return shape_err(format!(
                "knowledge widths ({}, {}) do not match model ({}, {})",
                kv.static_dim(),
                kv.dynamic_dim(),
                self.config.d_s,
                self.config.d_d
            ));
        }
        Ok(())
    }

    /// Largest valid window start plus one.
    pub fn n_windows(&self, n_steps: usize) -> usize {
        (n_steps + 1).saturating_sub(self.config.window + self.config.horizon)
    }

    /// Stacked targets: row `b*n + i`, column `j` holds node `i` at
    /// `start_b + window + j`.
    pub fn targets(&self, series: &Series<'_>, starts: &[usize]) -> Array2<f64> {
        let (n, w, hz) = (series.n_nodes(), self.config.window, self.config.horizon);
        let mut out = Array2::zeros((starts.len() * n, hz));
        for (b, &s0) in starts.iter().enumerate() {
            for j in 0..hz {
                out.slice_mut(s![b * n..(b + 1) * n, j])
                    .assign(&series.targets.row(s0 + w + j));
            }
        }
        out
    }

    fn forward(
        &self,
        series: &Series<'_>,
        starts: &[usize],
        kv: &KnowledgeVectors,
        p: &PropagationMatrix,
    ) -> Result<ForwardCache> {
        self.check_context(series, kv, p)?;
        if starts.is_empty() {
            return input_err("batch needs at least one window");
        }
        let (n, w) = (series.n_nodes(), self.config.window);
        if let Some(&bad) = starts.iter().find(|&&s0| s0 + w + self.config.horizon > series.n_steps()) {
            return input_err(format!("window starting at {bad} runs past the series end"));
        }
        let rows = starts.len() * n;
        let (w_x, w_s, w_d) = fusion_blocks(&self.cell.fusion_w, self.config.d_s);
        let static_part = kv.static_vectors().dot(&w_s);
        let pm = p.matrix();

        let mut h = Array2::zeros((rows, self.config.d_h));
        let mut steps = Vec::with_capacity(w);
        let mut dyn_rows = Vec::with_capacity(w);
        for k in 0..w {
            let idx: Vec<usize> = starts.iter().map(|&s0| s0 + k).collect();
            let mut x = Array1::zeros(rows);
            let mut f = Array2::zeros((rows, self.config.d_f));
            for (b, &t) in idx.iter().enumerate() {
                let xb = series.inputs.row(t);
                x.slice_mut(s![b * n..(b + 1) * n]).assign(&xb);
                let dyn_bias = kv.dynamic_at(series.time_ids[t])?.dot(&w_d) + &self.cell.fusion_b;
                let mut block = f.slice_mut(s![b * n..(b + 1) * n, ..]);
                for (i, mut row) in block.rows_mut().into_iter().enumerate() {
                    let xi = xb[i];
                    ndarray::Zip::from(&mut row)
                        .and(&w_x)
                        .and(static_part.row(i))
                        .and(&dyn_bias)
                        .for_each(|o, &wx, &sp, &db| *o = (xi * wx + sp + db).tanh());
                }
            }
            check_finite(&f, "fusion")?;
            let mut g = vec![f];
            let mut a = Vec::with_capacity(self.cell.gcn_w.len());
            for (l, wl) in self.cell.gcn_w.iter().enumerate() {
                let y = g[l].dot(wl);
                let al = propagate(pm, &y, n);
                let gl = al.mapv(|v| self.cell.activation.apply(v));
                check_finite(&gl, &format!("gcn layer {}", l + 1))?;
                a.push(al);
                g.push(gl);
            }
            let xp = g.last().unwrap().view();
            let u = affine_split(xp, h.view(), &self.gru.w_u, &self.gru.b_u).mapv(sigmoid);
            let r = affine_split(xp, h.view(), &self.gru.w_r, &self.gru.b_r).mapv(sigmoid);
            let rh = &r * &h;
            let c = affine_split(xp, rh.view(), &self.gru.w_c, &self.gru.b_c).mapv(f64::tanh);
            let h_new = &u * &h + &(1.0 - &u) * &c;
            check_finite(&h_new, "gru")?;
            let h_prev = std::mem::replace(&mut h, h_new);
            steps.push(StepCache { x, g, a, h_prev, u, r, c, rh });
            dyn_rows.push(idx);
        }
        let pred = h.dot(&self.gru.head_w) + &self.gru.head_b;
        check_finite(&pred, "output head")?;
        Ok(ForwardCache { steps, dyn_rows, h, pred })
    }

    /// Stacked `(B*n) x horizon` forecasts for the windows starting at `starts`.
    pub fn predict(
        &self,
        series: &Series<'_>,
        starts: &[usize],
        kv: &KnowledgeVectors,
        p: &PropagationMatrix,
    ) -> Result<Array2<f64>> {
        Ok(self.forward(series, starts, kv, p)?.pred)
    }

    /// `n x horizon` forecast for a single `window x n` slice.
    pub fn predict_window(
        &self,
        window: ArrayView2<'_, f64>,
        times: &[usize],
        kv: &KnowledgeVectors,
        p: &PropagationMatrix,
    ) -> Result<Array2<f64>> {
        if window.nrows() != self.config.window {
            return shape_err(format!("window has {} steps, model expects {}", window.nrows(), self.config.window));
        }
        // pad with dummy target rows so the single window is in range
        let pad = Array2::zeros((self.config.horizon, window.ncols()));
        let full = ndarray::concatenate(Axis(0), &[window, pad.view()]).unwrap();
        let mut ids = times.to_vec();
        ids.extend(std::iter::repeat_n(times[0], self.config.horizon));
        let series = Series::new(full.view(), full.view(), &ids)?;
        self.predict(&series, &[0], kv, p)
    }

    /// Mean squared error over the batch; adds `d MSE / d θ` into `grad` and
    /// returns the gradient with respect to every input speed, indexed
    /// `[step][b*n + i]`.
    pub fn mse_backward(
        &self,
        series: &Series<'_>,
        starts: &[usize],
        kv: &KnowledgeVectors,
        p: &PropagationMatrix,
        grad: &mut ForecastModel,
    ) -> Result<(f64, Vec<Array1<f64>>)> {
        let cache = self.forward(series, starts, kv, p)?;
        let truth = self.targets(series, starts);
        let diff = &cache.pred - &truth;
        let count = diff.len() as f64;
        let mse = diff.mapv(|v| v * v).sum() / count;
        let dy = diff * (2.0 / count);
        let dx = self.backward(&cache, dy, series, kv, p, grad);
        Ok((mse, dx))
    }

    fn backward(
        &self,
        cache: &ForwardCache,
        dy: Array2<f64>,
        series: &Series<'_>,
        kv: &KnowledgeVectors,
        p: &PropagationMatrix,
        grad: &mut ForecastModel,
    ) -> Vec<Array1<f64>> {
        let n = series.n_nodes();
        let d_in = self.config.d_out;
        let d_s = self.config.d_s;
        let gru = &self.gru;
        let gg = &mut grad.gru;

        gg.head_w += &cache.h.t().dot(&dy);
        gg.head_b += &dy.sum_axis(Axis(0));
        let mut dh = dy.dot(&gru.head_w.t());

        let (w_x, _, _) = fusion_blocks(&self.cell.fusion_w, d_s);
        let w_x = w_x.to_owned();
        let mut d_static = Array2::<f64>::zeros((n, self.config.d_f));
        let mut dx_all = vec![Array1::zeros(0); cache.steps.len()];
        let pt = p.matrix().t().to_owned();

        let split = |w: &Array2<f64>| (w.slice(s![..d_in, ..]).to_owned(), w.slice(s![d_in.., ..]).to_owned());
        let (wu_x, wu_h) = split(&gru.w_u);
        let (wr_x, wr_h) = split(&gru.w_r);
        let (wc_x, wc_h) = split(&gru.w_c);

        for (k, st) in cache.steps.iter().enumerate().rev() {
            let xp = st.g.last().unwrap();
            // h = u h_prev + (1 - u) c
            let du = &dh * &(&st.h_prev - &st.c);
            let dc = &dh * &(1.0 - &st.u);
            let mut dh_prev = &dh * &st.u;

            let dc_pre = dc * &st.c.mapv(|c| 1.0 - c * c);
            gg.w_c.slice_mut(s![..d_in, ..]).scaled_add(1.0, &xp.t().dot(&dc_pre));
            gg.w_c.slice_mut(s![d_in.., ..]).scaled_add(1.0, &st.rh.t().dot(&dc_pre));
            gg.b_c += &dc_pre.sum_axis(Axis(0));
            let mut dxp = dc_pre.dot(&wc_x.t());
            let drh = dc_pre.dot(&wc_h.t());
            let dr = &drh * &st.h_prev;
            dh_prev += &(&drh * &st.r);

            let du_pre = du * &st.u.mapv(|u| u * (1.0 - u));
            let dr_pre = dr * &st.r.mapv(|r| r * (1.0 - r));
            gg.w_u.slice_mut(s![..d_in, ..]).scaled_add(1.0, &xp.t().dot(&du_pre));
            gg.w_u.slice_mut(s![d_in.., ..]).scaled_add(1.0, &st.h_prev.t().dot(&du_pre));
            gg.b_u += &du_pre.sum_axis(Axis(0));
            gg.w_r.slice_mut(s![..d_in, ..]).scaled_add(1.0, &xp.t().dot(&dr_pre));
            gg.w_r.slice_mut(s![d_in.., ..]).scaled_add(1.0, &st.h_prev.t().dot(&dr_pre));
            gg.b_r += &dr_pre.sum_axis(Axis(0));
            dxp += &du_pre.dot(&wu_x.t());
            dxp += &dr_pre.dot(&wr_x.t());
            dh_prev += &du_pre.dot(&wu_h.t());
            dh_prev += &dr_pre.dot(&wr_h.t());

            // graph convolutions, last layer first
            let mut dg = dxp;
            for l in (0..self.cell.gcn_w.len()).rev() {
                let act = self.cell.activation;
                let mut da = st.a[l].clone();
                ndarray::Zip::from(&mut da)
                    .and(&st.g[l + 1])
                    .and(&dg)
                    .for_each(|a, &y, &d| *a = d * act.derivative(*a, y));
                let dyl = propagate(pt.view(), &da, n);
                grad.cell.gcn_w[l] += &st.g[l].t().dot(&dyl);
                dg = dyl.dot(&self.cell.gcn_w[l].t());
            }

            // fusion: F = tanh(x w_x + e_s W_s + e_d W_d + b)
            let df_pre = dg * &st.g[0].mapv(|f| 1.0 - f * f);
            grad.cell
                .fusion_w
                .row_mut(0)
                .scaled_add(1.0, &st.x.view().insert_axis(Axis(0)).dot(&df_pre).row(0));
            grad.cell.fusion_b += &df_pre.sum_axis(Axis(0));
            for (b, &t) in cache.dyn_rows[k].iter().enumerate() {
                let block = df_pre.slice(s![b * n..(b + 1) * n, ..]);
                d_static += &block;
                if self.config.d_d > 0 {
                    let e_d = kv.dynamic_at(series.time_ids[t]).expect("checked in forward");
                    let col = block.sum_axis(Axis(0));
                    let outer = e_d
                        .insert_axis(Axis(1))
                        .dot(&col.view().insert_axis(Axis(0)));
                    grad.cell.fusion_w.slice_mut(s![1 + d_s.., ..]).scaled_add(1.0, &outer);
                }
            }
            dx_all[k] = df_pre.dot(&w_x);
            dh = dh_prev;
        }
        if d_s > 0 {
            let dws = kv.static_vectors().t().dot(&d_static);
            grad.cell.fusion_w.slice_mut(s![1..1 + d_s, ..]).scaled_add(1.0, &dws);
        }
        dx_all
    }

    /// Writes `params.bin` (little-endian f64, `to_flat` order) and
    /// `manifest.json` (config and tensor shapes).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let bytes: Vec<u8> = self.to_flat().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join("params.bin"), bytes)?;
        let manifest = Manifest {
            config: self.config.clone(),
            n_params: self.n_params(),
            shapes: self.segment_shapes(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut model = Self::zeros(manifest.config)?;
        if model.segment_shapes() != manifest.shapes {
            return input_err("checkpoint shapes do not match its config");
        }
        let bytes = fs::read(dir.join("params.bin"))?;
        if bytes.len() != 8 * model.n_params() {
            return input_err(format!(
                "params.bin holds {} bytes, expected {}",
                bytes.len(),
                8 * model.n_params()
            ));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.set_flat(&flat);
        Ok(model)
    }

    fn segment_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            ("fusion_w".to_string(), self.cell.fusion_w.shape().to_vec()),
            ("fusion_b".to_string(), self.cell.fusion_b.shape().to_vec()),
        ];
        for (l, w) in self.cell.gcn_w.iter().enumerate() {
            out.push((format!("gcn_w{l}"), w.shape().to_vec()));
        }
        let g = &self.gru;
        for (name, shape) in [
            ("w_u", g.w_u.shape()),
            ("w_r", g.w_r.shape()),
            ("w_c", g.w_c.shape()),
            ("b_u", g.b_u.shape()),
            ("b_r", g.b_r.shape()),
            ("b_c", g.b_c.shape()),
            ("head_w", g.head_w.shape()),
            ("head_b", g.head_b.shape()),
        ] {
            out.push((name.to_string(), shape.to_vec()));
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    n_params: usize,
    shapes: Vec<(String, Vec<usize>)>,
}

impl ParamSet for ForecastModel {
    fn segments(&self) -> Vec<&[f64]> {
        let mut out = vec![
            self.cell.fusion_w.as_slice().unwrap(),
            self.cell.fusion_b.as_slice().unwrap(),
        ];
        out.extend(self.cell.gcn_w.iter().map(|w| w.as_slice().unwrap()));
        let g = &self.gru;
        out.extend([
            g.w_u.as_slice().unwrap(),
            g.w_r.as_slice().unwrap(),
            g.w_c.as_slice().unwrap(),
            g.b_u.as_slice().unwrap(),
            g.b_r.as_slice().unwrap(),
            g.b_c.as_slice().unwrap(),
            g.head_w.as_slice().unwrap(),
            g.head_b.as_slice().unwrap(),
        ]);
        out
    }

    fn segments_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.cell.fusion_w.as_slice_mut().unwrap(),
            self.cell.fusion_b.as_slice_mut().unwrap(),
        ];
        out.extend(self.cell.gcn_w.iter_mut().map(|w| w.as_slice_mut().unwrap()));
        let g = &mut self.gru;
        out.extend([
            g.w_u.as_slice_mut().unwrap(),
            g.w_r.as_slice_mut().unwrap(),
            g.w_c.as_slice_mut().unwrap(),
            g.b_u.as_slice_mut().unwrap(),
            g.b_r.as_slice_mut().unwrap(),
            g.b_c.as_slice_mut().unwrap(),
            g.head_w.as_slice_mut().unwrap(),
            g.head_b.as_slice_mut().unwrap(),
        ]);
        out
    }
}

/// Row view helper for callers holding stacked forecasts.
pub fn window_block(stacked: &Array2<f64>, n: usize, b: usize) -> ArrayView2<'_, f64> {
    stacked.slice(s![b * n..(b + 1) * n, ..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::RoadGraph;
    use crate::gru::forward_sequence;
    use crate::optim::{central_differences, relative_error};
    use rand::Rng;

    fn fixture(n: usize, t: usize, d_s: usize, d_d: usize, seed: u64) -> (Array2<f64>, Vec<usize>, KnowledgeVectors, PropagationMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let speeds = Array2::from_shape_simple_fn((t, n), || rng.random_range(0.0..1.0));
        let ids: Vec<usize> = (100..100 + t).collect();
        let e_s = Array2::from_shape_simple_fn((n, d_s), || rng.random_range(-1.0..1.0));
        let dynamic = Array2::from_shape_simple_fn((t, d_d), || rng.random_range(-1.0..1.0));
        let kv = KnowledgeVectors::new(e_s, &ids, dynamic).unwrap();
        let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).chain([(0, n - 1)]).collect();
        let p = PropagationMatrix::from_graph(&RoadGraph::new(n, &edges).unwrap());
        (speeds, ids, kv, p)
    }

    fn small_config(layers: usize) -> ModelConfig {
        ModelConfig {
            d_s: 3,
            d_d: 2,
            d_f: 4,
            d_out: 3,
            d_h: 5,
            gcn_layers: layers,
            horizon: 2,
            window: 3,
        }
    }

    #[test]
    fn batched_forward_matches_reference_path() {
        let (speeds, ids, kv, p) = fixture(5, 12, 3, 2, 1);
        let model = ForecastModel::init(small_config(2), 4).unwrap();
        let series = Series::new(speeds.view(), speeds.view(), &ids).unwrap();
        let starts = [0, 3, 7];
        let stacked = model.predict(&series, &starts, &kv, &p).unwrap();
        for (b, &s0) in starts.iter().enumerate() {
            let win = speeds.slice(s![s0..s0 + 3, ..]);
            let reference = forward_sequence(win, &ids[s0..s0 + 3], &kv, &p, &model.cell, &model.gru).unwrap();
            let got = window_block(&stacked, 5, b);
            for (a, r) in got.iter().zip(reference.iter()) {
                assert!((a - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for layers in [1, 2] {
            let (speeds, ids, kv, p) = fixture(4, 10, 3, 2, 7);
            let model = ForecastModel::init(small_config(layers), 11).unwrap();
            let series = Series::new(speeds.view(), speeds.view(), &ids).unwrap();
            let starts = [0, 2, 5];
            let mut grad = model.zeros_like();
            model.mse_backward(&series, &starts, &kv, &p, &mut grad).unwrap();
            let x0 = model.to_flat();
            let coords: Vec<usize> = (0..x0.len()).collect();
            let numeric = central_differences(
                |flat| {
                    let mut m = model.clone();
                    m.set_flat(flat);
                    let pred = m.predict(&series, &starts, &kv, &p).unwrap();
                    let d = pred - m.targets(&series, &starts);
                    d.mapv(|v| v * v).mean().unwrap()
                },
                &x0,
                &coords,
                1e-5,
            );
            let worst = grad
                .to_flat()
                .iter()
                .zip(&numeric)
                .map(|(a, b)| relative_error(*a, *b))
                .fold(0.0, f64::max);
            assert!(worst < 1e-4, "layers {layers}: {worst}");
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let (speeds, ids, kv, p) = fixture(4, 6, 2, 2, 3);
        let mut cfg = small_config(1);
        cfg.d_s = 2;
        let model = ForecastModel::init(cfg, 2).unwrap();
        let targets = speeds.clone();
        let series = Series::new(speeds.view(), targets.view(), &ids).unwrap();
        let mut grad = model.zeros_like();
        let (_, dx) = model.mse_backward(&series, &[1], &kv, &p, &mut grad).unwrap();
        for k in 0..3 {
            for i in 0..4 {
                let f = |v: &[f64]| {
                    let mut inp = speeds.clone();
                    inp[[1 + k, i]] = v[0];
                    let s = Series::new(inp.view(), targets.view(), &ids).unwrap();
                    let d = model.predict(&s, &[1], &kv, &p).unwrap() - model.targets(&s, &[1]);
                    d.mapv(|v| v * v).mean().unwrap()
                };
                let num = central_differences(f, &[speeds[[1 + k, i]]], &[0], 1e-5)[0];
                assert!(relative_error(dx[k][i], num) < 1e-4);
            }
        }
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let (speeds, ids, kv, p) = fixture(4, 10, 3, 2, 5);
        let model = ForecastModel::init(small_config(1), 1).unwrap();
        let series = Series::new(speeds.view(), speeds.view(), &ids).unwrap();
        let mut g1 = model.zeros_like();
        let mut g2 = model.zeros_like();
        model.mse_backward(&series, &[0, 4], &kv, &p, &mut g1).unwrap();
        model.mse_backward(&series, &[0, 4, 0, 4], &kv, &p, &mut g2).unwrap();
        for (a, b) in g1.to_flat().iter().zip(g2.to_flat()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn knowledge_free_model_ignores_dynamic_vectors() {
        let (speeds, ids, kv, p) = fixture(4, 8, 3, 2, 9);
        let mut cfg = small_config(1);
        cfg.d_d = 0;
        let model = ForecastModel::init(cfg, 3).unwrap();
        let series = Series::new(speeds.view(), speeds.view(), &ids).unwrap();
        let a = model.predict(&series, &[0, 2], &kv.ablate(true, false), &p).unwrap();
        let kv2 = KnowledgeVectors::new(kv.static_vectors().to_owned(), &ids, Array2::from_elem((8, 2), 9.0)).unwrap();
        let b = model.predict(&series, &[0, 2], &kv2.ablate(true, false), &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn edgeless_graph_is_local() {
        let (mut speeds, ids, kv, _) = fixture(4, 8, 3, 2, 2);
        let p = PropagationMatrix::identity(4);
        let model = ForecastModel::init(small_config(1), 6).unwrap();
        let base = model.predict_window(speeds.slice(s![0..3, ..]), &ids[0..3], &kv, &p).unwrap();
        speeds[[1, 2]] += 0.5;
        let moved = model.predict_window(speeds.slice(s![0..3, ..]), &ids[0..3], &kv, &p).unwrap();
        for i in 0..4 {
            assert_eq!(base.row(i) == moved.row(i), i != 2);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = ForecastModel::init(small_config(2), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        assert_eq!(ForecastModel::load(dir.path()).unwrap(), model);
    }

    #[test]
    fn out_of_range_window_rejected() {
        let (speeds, ids, kv, p) = fixture(4, 6, 3, 2, 2);
        let model = ForecastModel::init(small_config(1), 1).unwrap();
        let series = Series::new(speeds.view(), speeds.view(), &ids).unwrap();
        assert!(model.predict(&series, &[2], &kv, &p).is_err());
        assert!(model.predict(&series, &[1], &kv, &p).is_ok());
        assert_eq!(model.n_windows(6), 2);
    }
}
