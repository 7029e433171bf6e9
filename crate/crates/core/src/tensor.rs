//! Dense row-major matrices and the handful of kernels the model needs.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: bad length");
        Mat { rows, cols, data }
    }

    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

/// `out[t] = x[t] · w + b` for every row `t` of `x`.
pub fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    debug_assert_eq!(x.cols, w.rows);
    let mut out = Mat::zeros(x.rows, w.cols);
    for t in 0..x.rows {
        affine_row(x.row(t), w, b, out.row_mut(t));
    }
    out
}

#[inline]
pub fn affine_row(x: &[f64], w: &Mat, b: &[f64], out: &mut [f64]) {
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        axpy(xi, w.row(i), out);
    }
}

/// Backward of [`affine`]: accumulates `dw += xᵀ·dy`, `db += Σ dy` and
/// returns `dx = dy · wᵀ`.
pub fn affine_backward(x: &Mat, w: &Mat, dy: &Mat, dw: &mut Mat, db: &mut [f64]) -> Mat {
    let mut dx = Mat::zeros(x.rows, x.cols);
    for t in 0..x.rows {
        affine_row_backward(x.row(t), w, dy.row(t), dw, db, dx.row_mut(t));
    }
    dx
}

#[inline]
pub fn affine_row_backward(
    x: &[f64],
    w: &Mat,
    dy: &[f64],
    dw: &mut Mat,
    db: &mut [f64],
    dx: &mut [f64],
) {
    axpy(1.0, dy, db);
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(xi, dy, dw.row_mut(i));
        }
        dx[i] += dot(w.row(i), dy);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable log-softmax of `logits / temperature`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let lse = logits
        .iter()
        .map(|&z| (z / temperature - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|&z| z / temperature - lse).collect()
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    log_softmax(logits, temperature)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Shannon entropy in nats of `softmax(logits / temperature)`.
pub fn entropy_of_logits(logits: &[f64], temperature: f64) -> f64 {
    let logp = log_softmax(logits, temperature);
    let h: f64 = logp
        .iter()
        .map(|&lp| {
            let p = lp.exp();
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum();
    h.max(0.0)
}
