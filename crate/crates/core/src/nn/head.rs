use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::{gelu, gelu_grad, hash_tensors, prefixed, NamedGrads, NnError, ParamsMut};
use crate::linalg::Matrix;
use crate::rng;

/// Three linear layers `in → hidden → hidden → classes` with GELU between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeHead {
    pub layers: [Linear; 3],
}

pub struct HeadCache {
    x: Matrix,
    z0: Matrix,
    h1: Matrix,
    z1: Matrix,
    h2: Matrix,
}

fn gelu_map(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
    out
}

fn gelu_back(z: &Matrix, dh: &Matrix) -> Matrix {
    let mut out = dh.clone();
    for (g, p) in out.as_mut_slice().iter_mut().zip(z.as_slice()) {
        *g *= gelu_grad(*p);
    }
    out
}

impl ProbeHead {
    pub fn new(d_in: usize, hidden: usize, n_classes: usize, seed: u64, tag: &str) -> Result<Self, NnError> {
        if d_in == 0 || hidden == 0 || n_classes == 0 {
            return Err(NnError::Input("head dimensions must be at least 1".into()));
        }
        let mut r = rng::stream(seed, &format!("head/{tag}"));
        Ok(Self {
            layers: [
                Linear::init(d_in, hidden, &mut r),
                Linear::init(hidden, hidden, &mut r),
                Linear::init(hidden, n_classes, &mut r),
            ],
        })
    }

    pub fn n_classes(&self) -> usize {
        self.layers[2].d_out()
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, HeadCache), NnError> {
        if x.cols() != self.d_in() {
            return Err(NnError::Input(format!(
                "head expects {} inputs, got {}",
                self.d_in(),
                x.cols()
            )));
        }
        let z0 = self.layers[0].forward(x);
        let h1 = gelu_map(&z0);
        let z1 = self.layers[1].forward(&h1);
        let h2 = gelu_map(&z1);
        let logits = self.layers[2].forward(&h2);
        Ok((
            logits,
            HeadCache {
                x: x.clone(),
                z0,
                h1,
                z1,
                h2,
            },
        ))
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix, NnError> {
        self.forward(x).map(|(l, _)| l)
    }

    pub fn backward(&self, cache: &HeadCache, d_logits: &Matrix) -> (NamedGrads, Matrix) {
        let (dw2, db2, dh2) = self.layers[2].backward(&cache.h2, d_logits);
        let dz1 = gelu_back(&cache.z1, &dh2);
        let (dw1, db1, dh1) = self.layers[1].backward(&cache.h1, &dz1);
        let dz0 = gelu_back(&cache.z0, &dh1);
        let (dw0, db0, dx) = self.layers[0].backward(&cache.x, &dz0);
        let mut g = NamedGrads::default();
        g.extend_prefixed("l0.", Linear::grads(dw0, db0));
        g.extend_prefixed("l1.", Linear::grads(dw1, db1));
        g.extend_prefixed("l2.", Linear::grads(dw2, db2));
        (g, dx)
    }

    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        let [a, b, c] = &mut self.layers;
        let mut out = prefixed("l0.", a.params_mut());
        out.extend(prefixed("l1.", b.params_mut()));
        out.extend(prefixed("l2.", c.params_mut()));
        out
    }

    pub fn params(&self) -> Vec<(String, &[f64])> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params().into_iter().map(move |(n, p)| (format!("l{i}.{n}"), p)))
            .collect()
    }

    pub fn parameter_hash(&self) -> String {
        hash_tensors(self.params().into_iter().map(|(_, p)| p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_width_is_class_count() {
        let h = ProbeHead::new(4, 6, 3, 1, "t").unwrap();
        let x = Matrix::from_vec(2, 4, vec![0.5; 8]);
        let (l, _) = h.forward(&x).unwrap();
        assert_eq!((l.rows(), l.cols()), (2, 3));
        assert!(h.forward(&Matrix::zeros(2, 5)).is_err());
    }

    #[test]
    fn backward_matches_finite_difference_on_input() {
        let h = ProbeHead::new(3, 5, 2, 2, "t").unwrap();
        let x = Matrix::from_rows(&[[0.3, -0.2, 1.0], [1.5, 0.1, -0.7]]);
        let r = Matrix::from_rows(&[[0.7, -1.1], [0.2, 0.4]]);
        let loss = |x: &Matrix| -> f64 {
            let l = h.logits(x).unwrap();
            l.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = h.forward(&x).unwrap();
        let (_, dx) = h.backward(&cache, &r);
        let eps = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut p = x.clone();
                p[(i, j)] += eps;
                let mut m = x.clone();
                m[(i, j)] -= eps;
                let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
                assert!((fd - dx[(i, j)]).abs() < 1e-8);
            }
        }
    }
}
