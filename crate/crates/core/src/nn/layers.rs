use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NamedGrads, ParamsMut};
use crate::linalg::Matrix;

/// `y = x·Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Fan-in scaled uniform init, `U(−1/√in, 1/√in)` for weights and bias.
    pub fn init<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let weight = (0..d_in * d_out).map(|_| rng.random_range(-bound..bound)).collect();
        let bias = (0..d_out).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Matrix::from_vec(d_out, d_in, weight),
            bias,
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(d_out, d_in),
            bias: vec![0.0; d_out],
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul_t(&self.weight);
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        y
    }

    /// Returns `(dW, db, dx)`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
        let dw = dy.t_matmul(x);
        let mut db = vec![0.0; self.d_out()];
        for i in 0..dy.rows() {
            for (acc, g) in db.iter_mut().zip(dy.row(i)) {
                *acc += g;
            }
        }
        let dx = dy.matmul(&self.weight);
        (dw, db, dx)
    }

    pub fn grads(dw: Matrix, db: Vec<f64>) -> NamedGrads {
        NamedGrads(vec![("weight".into(), dw.into_vec()), ("bias".into(), db)])
    }

    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        vec![
            ("weight".into(), self.weight.as_mut_slice()),
            ("bias".into(), self.bias.as_mut_slice()),
        ]
    }

    pub fn params(&self) -> Vec<(String, &[f64])> {
        vec![
            ("weight".into(), self.weight.as_slice()),
            ("bias".into(), self.bias.as_slice()),
        ]
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// 1-D batch normalization over the batch axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// Saved train-mode intermediates.
#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gain: vec![1.0; width],
            shift: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Normalizes with batch statistics (biased variance) and updates the
    /// running estimates (unbiased variance).
    pub(crate) fn forward_train(&mut self, z: &Matrix) -> (Matrix, BnCache) {
        let n = z.rows();
        let w = z.cols();
        let mean = z.column_means();
        let mut var = vec![0.0; w];
        for i in 0..n {
            for ((v, x), m) in var.iter_mut().zip(z.row(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Matrix::zeros(n, w);
        let mut out = Matrix::zeros(n, w);
        for i in 0..n {
            for j in 0..w {
                let xh = (z[(i, j)] - mean[j]) * inv_std[j];
                xhat[(i, j)] = xh;
                out[(i, j)] = self.gain[j] * xh + self.shift[j];
            }
        }
        let unbias = n as f64 / (n as f64 - 1.0);
        for j in 0..w {
            self.running_mean[j] = (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean[j];
            self.running_var[j] = (1.0 - self.momentum) * self.running_var[j] + self.momentum * var[j] * unbias;
        }
        (out, BnCache { xhat, inv_std })
    }

    pub(crate) fn forward_eval(&self, z: &Matrix) -> (Matrix, BnCache) {
        let inv_std: Vec<f64> = self.running_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = z.clone();
        let mut out = z.clone();
        for i in 0..z.rows() {
            for j in 0..z.cols() {
                let xh = (z[(i, j)] - self.running_mean[j]) * inv_std[j];
                xhat[(i, j)] = xh;
                out[(i, j)] = self.gain[j] * xh + self.shift[j];
            }
        }
        (out, BnCache { xhat, inv_std })
    }

    /// Returns `(dgain, dshift, dz)`. `batch_stats` selects the train-mode
    /// derivative that flows through the batch mean and variance.
    pub(crate) fn backward(&self, cache: &BnCache, dy: &Matrix, batch_stats: bool) -> (Vec<f64>, Vec<f64>, Matrix) {
        let n = dy.rows();
        let w = dy.cols();
        let mut dgain = vec![0.0; w];
        let mut dshift = vec![0.0; w];
        for i in 0..n {
            for j in 0..w {
                dgain[j] += dy[(i, j)] * cache.xhat[(i, j)];
                dshift[j] += dy[(i, j)];
            }
        }
        let mut dz = Matrix::zeros(n, w);
        if batch_stats {
            // dz = inv_std/N · (N·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)), with dx̂ = dy·gain
            let nf = n as f64;
            for j in 0..w {
                let g = self.gain[j];
                let sum_dxhat = g * dshift[j];
                let sum_dxhat_xhat = g * dgain[j];
                for i in 0..n {
                    let dxhat = dy[(i, j)] * g;
                    dz[(i, j)] = cache.inv_std[j] / nf * (nf * dxhat - sum_dxhat - cache.xhat[(i, j)] * sum_dxhat_xhat);
                }
            }
        } else {
            for i in 0..n {
                for j in 0..w {
                    dz[(i, j)] = dy[(i, j)] * self.gain[j] * cache.inv_std[j];
                }
            }
        }
        (dgain, dshift, dz)
    }

    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        vec![
            ("gain".into(), self.gain.as_mut_slice()),
            ("shift".into(), self.shift.as_mut_slice()),
        ]
    }

    pub fn params(&self) -> Vec<(String, &[f64])> {
        vec![
            ("gain".into(), self.gain.as_slice()),
            ("shift".into(), self.shift.as_slice()),
        ]
    }
}
