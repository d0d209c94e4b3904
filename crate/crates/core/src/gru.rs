//! Gated recurrent unit over KS-Cell outputs with a direct multi-horizon head.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;

use crate::embed::KnowledgeVectors;
use crate::error::{shape_err, Result};
use crate::graph::{sigmoid, PropagationMatrix};
use crate::kscell::{ks_cell_forward, xavier, KsCellParams};

/// Gate weights act on `[x ∥ h]`, input rows first.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_u: Array2<f64>,
    pub w_r: Array2<f64>,
    pub w_c: Array2<f64>,
    pub b_u: Array1<f64>,
    pub b_r: Array1<f64>,
    pub b_c: Array1<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl GruParams {
    pub fn zeros(d_in: usize, d_h: usize, horizon: usize) -> Self {
        Self {
            w_u: Array2::zeros((d_in + d_h, d_h)),
            w_r: Array2::zeros((d_in + d_h, d_h)),
            w_c: Array2::zeros((d_in + d_h, d_h)),
            b_u: Array1::zeros(d_h),
            b_r: Array1::zeros(d_h),
            b_c: Array1::zeros(d_h),
            head_w: Array2::zeros((d_h, horizon)),
            head_b: Array1::zeros(horizon),
        }
    }

    /// Xavier-uniform weights; update-gate bias 1 so early training keeps state.
    pub fn init<R: Rng>(d_in: usize, d_h: usize, horizon: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(d_in, d_h, horizon);
        for w in [&mut p.w_u, &mut p.w_r, &mut p.w_c, &mut p.head_w] {
            xavier(w, rng);
        }
        p.b_u.fill(1.0);
        p
    }

    pub fn hidden(&self) -> usize {
        self.b_u.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w_u.nrows() - self.hidden()
    }

    pub fn horizon(&self) -> usize {
        self.head_b.len()
    }
}

/// Intermediate values of one step.
#[derive(Debug, Clone)]
pub struct GruStepCache {
    pub u: Array2<f64>,
    pub r: Array2<f64>,
    pub c: Array2<f64>,
    pub rh: Array2<f64>,
    pub h: Array2<f64>,
}

/// `x W[..d_in] + h W[d_in..] + b`.
pub(crate) fn affine_split(
    x: ArrayView2<'_, f64>,
    h: ArrayView2<'_, f64>,
    w: &Array2<f64>,
    b: &Array1<f64>,
) -> Array2<f64> {
    let d_in = x.ncols();
    let mut out = x.dot(&w.slice(s![..d_in, ..]));
    out += &h.dot(&w.slice(s![d_in.., ..]));
    out += b;
    out
}

/// One step with an optional injected update-gate value.
pub fn gru_step_cached(
    x: ArrayView2<'_, f64>,
    h_prev: ArrayView2<'_, f64>,
    params: &GruParams,
    forced_update: Option<f64>,
) -> Result<GruStepCache> {
    let d_h = params.hidden();
    if x.nrows() != h_prev.nrows() {
        return shape_err(format!("input has {} rows, state has {}", x.nrows(), h_prev.nrows()));
    }
    if x.ncols() != params.input_dim() || h_prev.ncols() != d_h {
        return shape_err(format!(
            "step inputs are {}+{} wide, weights expect {}+{d_h}",
            x.ncols(),
            h_prev.ncols(),
            params.input_dim()
        ));
    }
    let u = match forced_update {
        Some(v) => Array2::from_elem(h_prev.raw_dim(), v),
        None => affine_split(x, h_prev, &params.w_u, &params.b_u).mapv(sigmoid),
    };
    let r = affine_split(x, h_prev, &params.w_r, &params.b_r).mapv(sigmoid);
    let rh = &r * &h_prev;
    let c = affine_split(x, rh.view(), &params.w_c, &params.b_c).mapv(f64::tanh);
    let h = &u * &h_prev + &(1.0 - &u) * &c;
    Ok(GruStepCache { u, r, c, rh, h })
}

/// `h = u ⊙ h_prev + (1 - u) ⊙ c`.
pub fn gru_step(x: ArrayView2<'_, f64>, h_prev: ArrayView2<'_, f64>, params: &GruParams) -> Result<Array2<f64>> {
    Ok(gru_step_cached(x, h_prev, params, None)?.h)
}

/// `h W_head + b_head`, one row per node.
pub fn head(h: ArrayView2<'_, f64>, params: &GruParams) -> Array2<f64> {
    h.dot(&params.head_w) + &params.head_b
}

/// Runs KS-Cell and GRU over a `w x n` window from `h_0 = 0`, returning the
/// `n x horizon` forecast and every intermediate hidden state.
pub fn forward_sequence_states(
    window: ArrayView2<'_, f64>,
    times: &[usize],
    kv: &KnowledgeVectors,
    p: &PropagationMatrix,
    cell: &KsCellParams,
    gru: &GruParams,
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    if window.nrows() == 0 || window.nrows() != times.len() {
        return shape_err(format!("window has {} steps and {} time ids", window.nrows(), times.len()));
    }
    let mut h = Array2::zeros((window.ncols(), gru.hidden()));
    let mut states = Vec::with_capacity(times.len());
    for (x, &t) in window.rows().into_iter().zip(times) {
        let xp = ks_cell_forward(x, kv, t, p, cell)?;
        h = gru_step(xp.view(), h.view(), gru)?;
        states.push(h.clone());
    }
    Ok((head(h.view(), gru), states))
}

pub fn forward_sequence(
    window: ArrayView2<'_, f64>,
    times: &[usize],
    kv: &KnowledgeVectors,
    p: &PropagationMatrix,
    cell: &KsCellParams,
    gru: &GruParams,
) -> Result<Array2<f64>> {
    Ok(forward_sequence_states(window, times, kv, p, cell, gru)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_hand_case() {
        let p = GruParams::zeros(1, 1, 1);
        let c = gru_step_cached(array![[0.0]].view(), array![[0.4]].view(), &p, None).unwrap();
        assert_eq!(c.u[[0, 0]], 0.5);
        assert_eq!(c.r[[0, 0]], 0.5);
        assert_eq!(c.c[[0, 0]], 0.0);
        assert!((c.h[[0, 0]] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn forced_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = GruParams::init(3, 4, 1, &mut rng);
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let h = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 4 + j) as f64 * 0.1).sin());
        let keep = gru_step_cached(x.view(), h.view(), &p, Some(1.0)).unwrap();
        assert_eq!(keep.h, h);
        let replace = gru_step_cached(x.view(), h.view(), &p, Some(0.0)).unwrap();
        assert_eq!(replace.h, replace.c);
    }

    #[test]
    fn gate_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = GruParams::init(2, 3, 2, &mut rng);
        let x = Array2::from_shape_fn((4, 2), |(i, j)| (i * 2 + j) as f64 - 3.0);
        let h = Array2::from_shape_fn((4, 3), |(i, j)| 0.2 * (i as f64 - j as f64));
        let c = gru_step_cached(x.view(), h.view(), &p, None).unwrap();
        assert!(c.u.iter().chain(c.r.iter()).all(|&v| v > 0.0 && v < 1.0));
        assert!(c.c.iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn shape_errors() {
        let p = GruParams::zeros(2, 3, 1);
        assert!(gru_step(Array2::zeros((4, 1)).view(), Array2::zeros((4, 3)).view(), &p).is_err());
        assert!(gru_step(Array2::zeros((4, 2)).view(), Array2::zeros((3, 3)).view(), &p).is_err());
    }

    #[test]
    fn constant_head() {
        let mut gru = GruParams::zeros(1, 2, 1);
        gru.head_b = array![3.5];
        let cell = KsCellParams::zeros(0, 0, 1, 1, 1);
        let kv = KnowledgeVectors::empty(3, &[0, 1]);
        let pred = forward_sequence(
            array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]].view(),
            &[0, 1],
            &kv,
            &PropagationMatrix::identity(3),
            &cell,
            &gru,
        )
        .unwrap();
        assert_eq!(pred, Array2::from_elem((3, 1), 3.5));
    }

    #[test]
    fn contractive_iteration_converges() {
        let mut gru = GruParams::zeros(1, 2, 1);
        gru.w_c = array![[0.5, -0.3], [0.3, 0.2], [-0.1, 0.25]];
        gru.w_u = array![[0.2, 0.1], [0.1, 0.1], [0.0, 0.1]];
        let mut cell = KsCellParams::zeros(0, 0, 1, 1, 1);
        cell.fusion_w = array![[1.0]];
        cell.gcn_w[0] = array![[1.0]];
        let w = 12;
        let kv = KnowledgeVectors::empty(2, &(0..w).collect::<Vec<_>>());
        let window = Array2::from_elem((w, 2), 0.7);
        let times: Vec<usize> = (0..w).collect();
        let (_, states) =
            forward_sequence_states(window.view(), &times, &kv, &PropagationMatrix::identity(2), &cell, &gru)
                .unwrap();
        let diffs: Vec<f64> = states
            .windows(2)
            .map(|p| (&p[1] - &p[0]).mapv(|v| v * v).sum().sqrt())
            .collect();
        assert!(diffs.windows(2).all(|d| d[1] < d[0]), "{diffs:?}");
    }
}
