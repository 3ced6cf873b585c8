use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, BnCache, Linear};
use super::{gelu, gelu_grad, hash_tensors, prefixed, NamedGrads, NnError, ParamsMut};
use crate::linalg::Matrix;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub depth: usize,
    pub width: usize,
    pub d_in: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub linear: Linear,
    pub norm: BatchNorm,
}

/// Input projection followed by `depth` residual blocks
/// `h ← h + GELU(BN(W·h + b))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub input: Linear,
    pub blocks: Vec<Block>,
    pub frozen: bool,
    /// Bumped on every parameter update; caches record it to detect staleness.
    #[serde(default)]
    version: u64,
}

#[derive(Debug)]
struct BlockCache {
    h_in: Matrix,
    norm: BnCache,
    pre_act: Matrix,
}

/// Intermediates of one forward pass, consumed by [`Backbone::backward`].
#[derive(Debug)]
pub struct BackboneCache {
    x: Matrix,
    blocks: Vec<BlockCache>,
    mode: Mode,
    version: u64,
}

impl Backbone {
    pub fn new(config: &BackboneConfig) -> Result<Self, NnError> {
        if config.depth == 0 || config.width == 0 || config.d_in == 0 {
            return Err(NnError::Input("depth, width and d_in must be at least 1".into()));
        }
        let mut r = rng::stream(config.seed, "backbone/init");
        let input = Linear::init(config.d_in, config.width, &mut r);
        let blocks = (0..config.depth)
            .map(|_| Block {
                linear: Linear::init(config.width, config.width, &mut r),
                norm: BatchNorm::new(config.width),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            input,
            blocks,
            frozen: false,
            version: 0,
        })
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<(Matrix, BackboneCache), NnError> {
        if x.cols() != self.config.d_in {
            return Err(NnError::Input(format!(
                "expected {} input features, got {}",
                self.config.d_in,
                x.cols()
            )));
        }
        if mode == Mode::Train && x.rows() < 2 {
            return Err(NnError::BatchStatistics(x.rows()));
        }
        let h0 = self.input.forward(x);
        let mut h = h0;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let z = block.linear.forward(&h);
            let (pre_act, norm) = match mode {
                Mode::Train => block.norm.forward_train(&z),
                Mode::Eval => block.norm.forward_eval(&z),
            };
            let mut out = h.clone();
            for (o, p) in out.as_mut_slice().iter_mut().zip(pre_act.as_slice()) {
                *o += gelu(*p);
            }
            caches.push(BlockCache { h_in: h, norm, pre_act });
            h = out;
        }
        Ok((
            h,
            BackboneCache {
                x: x.clone(),
                blocks: caches,
                mode,
                version: self.version,
            },
        ))
    }

    /// Pure eval-mode forward; running statistics are read, never written.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix, NnError> {
        let mut copy = self.clone();
        copy.forward(x, Mode::Eval).map(|(f, _)| f)
    }

    /// Gradients of a scalar loss given `d loss / d features`.
    pub fn backward(&self, cache: &BackboneCache, grad_out: &Matrix) -> Result<(NamedGrads, Matrix), NnError> {
        if cache.version != self.version {
            return Err(NnError::StaleCache);
        }
        let batch_stats = cache.mode == Mode::Train;
        let mut dh = grad_out.clone();
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut dn = dh.clone();
            for (g, p) in dn.as_mut_slice().iter_mut().zip(bc.pre_act.as_slice()) {
                *g *= gelu_grad(*p);
            }
            let (dgain, dshift, dz) = block.norm.backward(&bc.norm, &dn, batch_stats);
            let (dw, db, dh_lin) = block.linear.backward(&bc.h_in, &dz);
            for (a, b) in dh.as_mut_slice().iter_mut().zip(dh_lin.as_slice()) {
                *a += b;
            }
            block_grads.push((dw, db, dgain, dshift));
        }
        let (dw_in, db_in, dx) = self.input.backward(&cache.x, &dh);

        let mut grads = NamedGrads::default();
        grads.extend_prefixed("input.", Linear::grads(dw_in, db_in));
        for (i, (dw, db, dgain, dshift)) in block_grads.into_iter().rev().enumerate() {
            grads.extend_prefixed(&format!("block{i}.linear."), Linear::grads(dw, db));
            grads.0.push((format!("block{i}.norm.gain"), dgain));
            grads.0.push((format!("block{i}.norm.shift"), dshift));
        }
        Ok((grads, dx))
    }

    /// Parameter views in the same order as the gradients from `backward`.
    /// Taking them counts as an update and invalidates outstanding caches.
    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        self.version += 1;
        let mut out = prefixed("input.", self.input.params_mut());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(prefixed(&format!("block{i}.linear."), b.linear.params_mut()));
            out.extend(prefixed(&format!("block{i}.norm."), b.norm.params_mut()));
        }
        out
    }

    pub fn params(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = self
            .input
            .params()
            .into_iter()
            .map(|(n, p)| (format!("input.{n}"), p))
            .collect();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(
                b.linear
                    .params()
                    .into_iter()
                    .map(|(n, p)| (format!("block{i}.linear.{n}"), p)),
            );
            out.extend(
                b.norm
                    .params()
                    .into_iter()
                    .map(|(n, p)| (format!("block{i}.norm.{n}"), p)),
            );
        }
        out
    }

    /// Hash of every parameter and running statistic.
    pub fn parameter_hash(&self) -> String {
        let mut tensors: Vec<&[f64]> = self.params().into_iter().map(|(_, p)| p).collect();
        for b in &self.blocks {
            tensors.push(&b.norm.running_mean);
            tensors.push(&b.norm.running_var);
        }
        hash_tensors(tensors)
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}
