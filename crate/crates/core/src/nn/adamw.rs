//! AdamW with decoupled weight decay.
//!
//! ```text
//! m ← β1·m + (1 − β1)·g
//! v ← β2·v + (1 − β2)·g²
//! θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ
//! ```
//! where `m̂`, `v̂` are the bias-corrected moments at step `t`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NamedGrads, NnError, ParamsMut};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every parameter in `params` from the matching entry of
    /// `grads`. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: ParamsMut<'_>, grads: &NamedGrads) -> Result<(), NnError> {
        if !(self.config.lr > 0.0) {
            return Err(NnError::Input("learning rate must be positive".into()));
        }
        let mut pairs = Vec::with_capacity(params.len());
        for (name, values) in params {
            let g = grads
                .get(&name)
                .ok_or_else(|| NnError::Input(format!("no gradient for {name}")))?;
            if g.len() != values.len() {
                return Err(NnError::Input(format!("gradient shape mismatch for {name}")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(NnError::Divergence { param: name });
            }
            pairs.push((name, values, g));
        }

        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, values, g) in pairs {
            let mo = self.moments.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for i in 0..g.len() {
                mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * g[i];
                mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = mo.m[i] / bc1;
                let v_hat = mo.v[i] / bc2;
                let theta = values[i];
                values[i] = theta - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * weight_decay * theta;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(theta: &mut [f64], g: f64, opt: &mut AdamW) -> Result<(), NnError> {
        let grads = NamedGrads(vec![("p".into(), vec![g])]);
        opt.step(vec![("p".into(), theta)], &grads)
    }

    #[test]
    fn worked_single_step() {
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        });
        let mut theta = [1.0];
        one(&mut theta, 1.0, &mut opt).unwrap();
        let closed = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.001;
        assert!((theta[0] - closed).abs() < 1e-12);
        assert!((theta[0] - 0.899).abs() < 1e-6);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut theta = [0.37];
        one(&mut theta, 0.0, &mut opt).unwrap();
        assert_eq!(theta[0], 0.37);
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let cfg = AdamWConfig {
            lr: 0.05,
            weight_decay: 0.2,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg);
        let mut theta = [2.0];
        one(&mut theta, 0.0, &mut opt).unwrap();
        assert!((theta[0] - 2.0 * (1.0 - 0.05 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_leaves_state() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut a = [1.0];
        let mut b = [1.0];
        let grads = NamedGrads(vec![("a".into(), vec![0.5]), ("b".into(), vec![f64::NAN])]);
        let err = opt
            .step(vec![("a".into(), &mut a[..]), ("b".into(), &mut b[..])], &grads)
            .unwrap_err();
        assert_eq!(err, NnError::Divergence { param: "b".into() });
        assert_eq!((a[0], b[0], opt.step), (1.0, 1.0, 0));
    }
}
