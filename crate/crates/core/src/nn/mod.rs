//! Dense neural stack with hand-written reverse mode: residual MLP backbone
//! (linear → batch norm → GELU, added back to the block input), three-layer
//! probe heads, cross-entropy losses, AdamW and a finite-difference checker.

mod adamw;
mod backbone;
pub mod checkpoint;
mod gradcheck;
mod head;
mod layers;
mod loss;

pub use adamw::{AdamW, AdamWConfig, Moments};
pub use backbone::{Backbone, BackboneCache, BackboneConfig, Mode};
pub use gradcheck::{grad_check, grad_check_with, Corruption, GradCheckOptions, GradCheckReport, LayerCheck};
pub use head::{HeadCache, ProbeHead};
pub use layers::{BatchNorm, Linear};
pub use loss::{log_softmax_row, softmax_cross_entropy, uniform_cross_entropy};

use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("batch statistics need at least 2 rows in train mode, got {0}")]
    BatchStatistics(usize),
    #[error("cache was produced before the last parameter update")]
    StaleCache,
    #[error("input error: {0}")]
    Input(String),
    #[error("training diverged: non-finite gradient in {param}")]
    Divergence { param: String },
}

/// Gradients keyed by parameter name, in the owner's parameter order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedGrads(pub Vec<(String, Vec<f64>)>);

impl NamedGrads {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, g)| g.as_slice())
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: NamedGrads) {
        self.0
            .extend(other.0.into_iter().map(|(n, g)| (format!("{prefix}{n}"), g)));
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|(_, g)| g.iter().all(|x| *x == 0.0))
    }
}

/// Mutable views of named parameter tensors.
pub type ParamsMut<'a> = Vec<(String, &'a mut [f64])>;

pub(crate) fn prefixed<'a>(prefix: &str, params: ParamsMut<'a>) -> ParamsMut<'a> {
    params.into_iter().map(|(n, p)| (format!("{prefix}{n}"), p)).collect()
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// `d/dx [x·Φ(x)] = Φ(x) + x·φ(x)`.
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// SHA-256 over the bit patterns of a sequence of tensors.
pub(crate) fn hash_tensors<'a>(tensors: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        h.update((t.len() as u64).to_le_bytes());
        for x in t {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
