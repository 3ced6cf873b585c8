//! Central finite differences against the analytic gradients of a backbone
//! plus probe head under softmax cross entropy, in train mode.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneConfig, Mode};
use super::head::ProbeHead;
use super::loss::softmax_cross_entropy;
use super::NamedGrads;
use crate::linalg::Matrix;
use crate::rng;

/// Adds `delta` to one analytic gradient entry before comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    pub param: String,
    pub index: usize,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub config: BackboneConfig,
    pub batch: usize,
    pub n_classes: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this are compared absolutely.
    pub abs_floor: f64,
    pub corruption: Option<Corruption>,
}

impl GradCheckOptions {
    pub fn new(config: BackboneConfig, batch: usize, tolerance: f64) -> Self {
        Self {
            config,
            batch,
            n_classes: 4,
            step: 1e-5,
            tolerance,
            abs_floor: 1e-6,
            corruption: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub layer: String,
    pub n_entries: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub layers: Vec<LayerCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failing_layers(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| !l.passed)
            .map(|l| l.layer.as_str())
            .collect()
    }
}

struct Problem {
    backbone: Backbone,
    head: ProbeHead,
    x: Matrix,
    labels: Vec<usize>,
}

impl Problem {
    fn loss(&self) -> f64 {
        let mut b = self.backbone.clone();
        let (f, _) = b.forward(&self.x, Mode::Train).expect("forward");
        let logits = self.head.logits(&f).expect("head");
        softmax_cross_entropy(&logits, &self.labels).expect("loss").0
    }

    /// Analytic gradients, with the input gradient under the name `x`.
    fn analytic(&self) -> NamedGrads {
        let mut b = self.backbone.clone();
        let (f, cache) = b.forward(&self.x, Mode::Train).expect("forward");
        let (logits, hcache) = self.head.forward(&f).expect("head");
        let (_, dlogits) = softmax_cross_entropy(&logits, &self.labels).expect("loss");
        let (hg, df) = self.head.backward(&hcache, &dlogits);
        let (bg, dx) = b.backward(&cache, &df).expect("backward");
        let mut g = NamedGrads::default();
        g.extend_prefixed("backbone.", bg);
        g.extend_prefixed("head.", hg);
        g.0.push(("x".into(), dx.into_vec()));
        g
    }

    fn value_mut(&mut self, name: &str) -> &mut [f64] {
        if name == "x" {
            return self.x.as_mut_slice();
        }
        if let Some(rest) = name.strip_prefix("backbone.") {
            return self
                .backbone
                .params_mut()
                .into_iter()
                .find(|(n, _)| n == rest)
                .map(|(_, p)| p)
                .expect("backbone parameter");
        }
        let rest = name.strip_prefix("head.").expect("head parameter");
        self.head
            .params_mut()
            .into_iter()
            .find(|(n, _)| n == rest)
            .map(|(_, p)| p)
            .expect("head parameter")
    }
}

fn layer_of(name: &str) -> String {
    match name.rfind('.') {
        Some(i) => name[..i].to_string(),
        None => name.to_string(),
    }
}

pub fn grad_check(config: &BackboneConfig, batch: usize, tolerance: f64) -> GradCheckReport {
    grad_check_with(&GradCheckOptions::new(config.clone(), batch, tolerance))
}

pub fn grad_check_with(opts: &GradCheckOptions) -> GradCheckReport {
    let cfg = &opts.config;
    let backbone = Backbone::new(cfg).expect("valid backbone config");
    let head = ProbeHead::new(cfg.width, cfg.width, opts.n_classes, cfg.seed, "gradcheck").expect("valid head");
    let mut r = rng::stream(cfg.seed, "gradcheck/data");
    let x = Matrix::from_vec(
        opts.batch,
        cfg.d_in,
        (0..opts.batch * cfg.d_in).map(|_| r.sample(StandardNormal)).collect(),
    );
    let labels = (0..opts.batch).map(|_| r.random_range(0..opts.n_classes)).collect();
    let mut problem = Problem {
        backbone,
        head,
        x,
        labels,
    };

    let mut analytic = problem.analytic();
    if let Some(c) = &opts.corruption {
        if let Some((_, g)) = analytic.0.iter_mut().find(|(n, _)| *n == c.param) {
            g[c.index] += c.delta;
        }
    }

    let h = opts.step;
    let mut per_layer: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    let mut order = Vec::new();
    for (name, grad) in &analytic.0 {
        let mut worst = 0.0_f64;
        for (i, &a) in grad.iter().enumerate() {
            let orig = problem.value_mut(name)[i];
            problem.value_mut(name)[i] = orig + h;
            let lp = problem.loss();
            problem.value_mut(name)[i] = orig - h;
            let lm = problem.loss();
            problem.value_mut(name)[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        let layer = layer_of(name);
        if !per_layer.contains_key(&layer) {
            order.push(layer.clone());
        }
        let e = per_layer.entry(layer).or_insert((0, 0.0));
        e.0 += grad.len();
        e.1 = e.1.max(worst);
    }

    let layers: Vec<LayerCheck> = order
        .into_iter()
        .map(|layer| {
            let (n, err) = per_layer[&layer];
            LayerCheck {
                layer,
                n_entries: n,
                max_rel_err: err,
                passed: err < opts.tolerance,
            }
        })
        .collect();
    let max_rel_err = layers.iter().map(|l| l.max_rel_err).fold(0.0, f64::max);
    GradCheckReport {
        max_rel_err,
        tolerance: opts.tolerance,
        passed: layers.iter().all(|l| l.passed),
        layers,
    }
}
