//! Flat parameter views and the Adam rule, shared by the embedding and
//! forecasting models. Central differences supply reference gradients.

use serde::{Deserialize, Serialize};

/// A collection of parameter tensors exposed as contiguous segments in a
/// fixed order. Gradients are stored in the same type, so optimizers and
/// gradient checks work over any model.
pub trait ParamSet {
    fn segments(&self) -> Vec<&[f64]>;
    fn segments_mut(&mut self) -> Vec<&mut [f64]>;

    fn n_params(&self) -> usize {
        self.segments().iter().map(|s| s.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.segments().concat()
    }

    /// Panics if `flat` does not have exactly `n_params()` entries.
    fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for seg in self.segments_mut() {
            seg.copy_from_slice(&flat[offset..offset + seg.len()]);
            offset += seg.len();
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn fill(&mut self, value: f64) {
        for seg in self.segments_mut() {
            seg.fill(value);
        }
    }

    fn sum_squares(&self) -> f64 {
        self.segments()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum()
    }

    fn all_finite(&self) -> bool {
        self.segments()
            .iter()
            .all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// `self += alpha * other`, segment by segment.
    fn add_scaled(&mut self, other: &Self, alpha: f64)
    where
        Self: Sized,
    {
        for (dst, src) in self.segments_mut().into_iter().zip(other.segments()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One descent step on `params` along `grad`.
    pub fn step<P: ParamSet>(&mut self, params: &mut P, grad: &P) {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let mut i = 0;
        for (p_seg, g_seg) in params.segments_mut().into_iter().zip(grad.segments()) {
            for (p, &g) in p_seg.iter_mut().zip(g_seg) {
                let m = &mut self.m[i];
                let v = &mut self.v[i];
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                i += 1;
            }
        }
    }
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` at each
/// requested coordinate.
pub fn central_differences<F>(f: F, point: &[f64], coords: &[usize], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    coords
        .iter()
        .map(|&i| {
            x[i] = point[i] + eps;
            let plus = f(&x);
            x[i] = point[i] - eps;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Relative error with a small absolute floor so that coordinates whose true
/// gradient is ~0 are judged on absolute agreement.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}
