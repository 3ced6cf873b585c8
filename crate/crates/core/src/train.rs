//! Supervision regimes: inverse-biological-process pretraining (predict the
//! molecule from the phenotype) followed by frozen probing, and direct task
//! supervision. Optional nuisance-adversarial heads, early stopping on a
//! held-out-replicate validation split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::arena::{ArenaDataset, PertType, Split, WellRecord};
use crate::eval::{chance_topk, label_histogram};
use crate::linalg::Matrix;
use crate::nn::{
    prefixed, softmax_cross_entropy, uniform_cross_entropy, AdamW, AdamWConfig, Backbone, BackboneConfig, Mode,
    NamedGrads, NnError, ProbeHead,
};
use crate::rng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch}: non-finite {param}")]
    Divergence { epoch: usize, param: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Moa,
    Target,
    Molecule,
    Discovery,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Moa, Task::Target, Task::Molecule, Task::Discovery];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Moa => "moa",
            Task::Target => "target",
            Task::Molecule => "molecule",
            Task::Discovery => "discovery",
        }
    }

    /// Class of a compound under this task, if the dataset labels it.
    pub fn label(self, ds: &ArenaDataset, compound: usize) -> Option<usize> {
        match self {
            Task::Moa => ds.label_maps.get(&compound).map(|l| l.moa_id),
            Task::Target => ds.label_maps.get(&compound).map(|l| l.target_id),
            Task::Molecule => Some(compound),
            Task::Discovery => None,
        }
    }

    fn monitor(self, top_k: usize) -> Monitor {
        match self {
            Task::Molecule | Task::Discovery => Monitor::Loss,
            Task::Moa | Task::Target => Monitor::TopK(top_k),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown task {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nuisance {
    Well,
    Plate,
    Batch,
    Source,
}

impl Nuisance {
    pub const ALL: [Nuisance; 4] = [Nuisance::Well, Nuisance::Plate, Nuisance::Batch, Nuisance::Source];

    pub fn as_str(self) -> &'static str {
        match self {
            Nuisance::Well => "well",
            Nuisance::Plate => "plate",
            Nuisance::Batch => "batch",
            Nuisance::Source => "source",
        }
    }

    /// Raw factor value; wells are identified by plate position.
    pub fn value(self, w: &WellRecord) -> usize {
        match self {
            Nuisance::Well => (w.row << 16) | w.col,
            Nuisance::Plate => w.plate,
            Nuisance::Batch => w.batch,
            Nuisance::Source => w.source,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversarialWeights {
    pub well: f64,
    pub plate: f64,
    pub batch: f64,
    pub source: f64,
}

impl AdversarialWeights {
    pub fn get(&self, n: Nuisance) -> f64 {
        match n {
            Nuisance::Well => self.well,
            Nuisance::Plate => self.plate,
            Nuisance::Batch => self.batch,
            Nuisance::Source => self.source,
        }
    }

    pub fn is_zero(&self) -> bool {
        Nuisance::ALL.iter().all(|&n| self.get(n) == 0.0)
    }

    pub fn validate(&self) -> Result<(), String> {
        for n in Nuisance::ALL {
            let l = self.get(n);
            if !(l.is_finite() && l >= 0.0) {
                return Err(format!(
                    "adversarial weight for {} must be finite and >= 0, got {l}",
                    n.as_str()
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Clamped to the number of training rows.
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub adversarial: AdversarialWeights,
    /// Nuisance-head updates per batch before the backbone step.
    pub adversary_steps: usize,
    pub seed: u64,
    pub top_k: usize,
    /// Hidden width of probe heads; defaults to the input width.
    pub probe_hidden: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 6000,
            patience: 15,
            max_epochs: 200,
            weight_decay: 0.01,
            adversarial: AdversarialWeights::default(),
            adversary_steps: 1,
            seed: 0,
            top_k: 10,
            probe_hidden: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if self.max_epochs < 1 || self.batch_size < 1 || self.top_k < 1 || self.adversary_steps < 1 {
            return bad("max_epochs, batch_size, top_k and adversary_steps must be at least 1".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        self.adversarial.validate().map_err(TrainError::Config)
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue { best_epoch: usize },
    Stop { best_epoch: usize },
}

impl StopDecision {
    pub fn best_epoch(self) -> usize {
        match self {
            StopDecision::Continue { best_epoch } | StopDecision::Stop { best_epoch } => best_epoch,
        }
    }
}

/// Epochs are 1-indexed; `history[i]` is the metric after epoch `i + 1`.
/// Ties keep the earliest epoch.
pub fn early_stopper(history: &[f64], patience: usize, objective: Objective) -> Option<StopDecision> {
    let (first, rest) = history.split_first()?;
    let mut best = (1usize, *first);
    for (i, &v) in rest.iter().enumerate() {
        let better = match objective {
            Objective::Minimize => v < best.1,
            Objective::Maximize => v > best.1,
        };
        if better || best.1.is_nan() {
            best = (i + 2, v);
        }
    }
    let best_epoch = best.0;
    Some(if history.len() - best_epoch >= patience {
        StopDecision::Stop { best_epoch }
    } else {
        StopDecision::Continue { best_epoch }
    })
}

#[derive(Debug, Clone)]
pub struct AdversarialLoss {
    pub total: f64,
    /// `(factor, uniform cross entropy)` for every factor with λ > 0.
    pub terms: Vec<(Nuisance, f64)>,
    /// λ-scaled gradients of the uniform terms with respect to each factor's logits.
    pub grads: Vec<(Nuisance, Matrix)>,
}

/// `task_loss + Σ λ_f · uniform_CE(logits_f)`. Factors with λ = 0 are skipped
/// entirely, so an all-zero weighting returns `task_loss` unchanged.
pub fn compose_adversarial_loss(
    task_loss: f64,
    nuisance_logits: &[(Nuisance, &Matrix)],
    weights: &AdversarialWeights,
) -> AdversarialLoss {
    let mut total = task_loss;
    let mut terms = Vec::new();
    let mut grads = Vec::new();
    for &(f, logits) in nuisance_logits {
        let lambda = weights.get(f);
        if lambda == 0.0 {
            continue;
        }
        // a single class carries no information: the term is identically zero
        let (u, mut g) = match uniform_cross_entropy(logits) {
            Ok(v) => v,
            Err(_) => (0.0, Matrix::zeros(logits.rows(), logits.cols())),
        };
        g.as_mut_slice().iter_mut().for_each(|v| *v *= lambda);
        total += lambda * u;
        terms.push((f, u));
        grads.push((f, g));
    }
    AdversarialLoss { total, terms, grads }
}

/// Sorted class ids; a label's class index is its rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap(pub Vec<usize>);

impl ClassMap {
    pub fn from_labels(labels: impl IntoIterator<Item = usize>) -> Self {
        ClassMap(labels.into_iter().collect::<BTreeSet<_>>().into_iter().collect())
    }

    pub fn index(&self, label: usize) -> Option<usize> {
        self.0.binary_search(&label).ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub backbone: Backbone,
    pub heads: BTreeMap<String, ProbeHead>,
    pub classes: BTreeMap<String, ClassMap>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub objective: Objective,
}

impl TrainedModel {
    /// Eval-mode representations of `wells`.
    pub fn embed(&self, wells: &[&WellRecord]) -> Result<Matrix, TrainError> {
        Ok(self.backbone.embed(&features_of(wells))?)
    }
}

pub fn features_of(wells: &[&WellRecord]) -> Matrix {
    let d = wells.first().map_or(0, |w| w.features.len());
    let mut data = Vec::with_capacity(wells.len() * d);
    for w in wells {
        data.extend_from_slice(&w.features);
    }
    Matrix::from_vec(wells.len(), d, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Monitor {
    Loss,
    TopK(usize),
}

impl Monitor {
    fn objective(self) -> Objective {
        match self {
            Monitor::Loss => Objective::Minimize,
            Monitor::TopK(_) => Objective::Maximize,
        }
    }
}

/// Splits row indices into training and validation by holding out one
/// replicate of every group that has at least two.
fn replicate_split(groups: &[usize], seed: u64, tag: &str) -> (Vec<usize>, Vec<usize>) {
    let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        by_group.entry(g).or_default().push(i);
    }
    let mut r = rng::stream(seed, &format!("{tag}/validation"));
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut rows) in by_group {
        if rows.len() >= 2 {
            let pick = rows.choose(&mut r).copied().expect("nonempty");
            rows.retain(|&i| i != pick);
            val.push(pick);
        }
        train.extend(rows);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

struct NuisanceTarget {
    factor: Nuisance,
    lambda: f64,
    labels: Vec<usize>,
    head: ProbeHead,
}

struct Problem {
    x: Matrix,
    y: Vec<usize>,
    xv: Matrix,
    yv: Vec<usize>,
    nuisance: Vec<NuisanceTarget>,
}

fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(|c| c.to_vec()).collect();
    // a trailing single row cannot form batch statistics
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

fn monitored(
    backbone: Option<&Backbone>,
    head: &ProbeHead,
    xv: &Matrix,
    yv: &[usize],
    monitor: Monitor,
) -> Result<f64, TrainError> {
    let f = match backbone {
        Some(b) => b.embed(xv)?,
        None => xv.clone(),
    };
    let logits = head.logits(&f)?;
    Ok(match monitor {
        Monitor::Loss => softmax_cross_entropy(&logits, yv)?.0,
        Monitor::TopK(k) => {
            let k = k.min(logits.cols());
            crate::eval::topk_accuracy(&logits, yv, k).map_err(|e| TrainError::Data(e.to_string()))?
        }
    })
}

fn divergence(epoch: usize) -> impl Fn(NnError) -> TrainError {
    move |e| match e {
        NnError::Divergence { param } => TrainError::Divergence { epoch, param },
        other => TrainError::Nn(other),
    }
}

/// Minibatch AdamW over `problem`, monitoring validation after every epoch
/// and restoring the best epoch's weights. Without a backbone the head is
/// trained directly on the inputs.
fn fit(
    mut backbone: Option<&mut Backbone>,
    head: &mut ProbeHead,
    problem: &mut Problem,
    tcfg: &TrainConfig,
    monitor: Monitor,
    tag: &str,
) -> Result<(Vec<EpochRecord>, usize, Objective), TrainError> {
    let n = problem.x.rows();
    let min_rows = if backbone.is_some() { 2 } else { 1 };
    if n < min_rows {
        return Err(TrainError::Data(format!("{n} training rows")));
    }
    let has_val = !problem.yv.is_empty();
    let monitor = if has_val { monitor } else { Monitor::Loss };
    let objective = monitor.objective();
    let size = tcfg.batch_size.clamp(min_rows, n);

    let mut opt = tcfg.optimizer();
    let mut adv_opt = tcfg.optimizer();
    let mut shuffle = rng::stream(tcfg.seed, &format!("{tag}/shuffle"));
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::new();
    let mut curve = Vec::new();
    let mut best: Option<(Option<Backbone>, ProbeHead)> = None;
    let mut best_epoch = 1;

    for epoch in 1..=tcfg.max_epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for idx in batches(&order, size) {
            let xb = problem.x.select_rows(&idx);
            let yb: Vec<usize> = idx.iter().map(|&i| problem.y[i]).collect();
            let (f, cache) = match backbone.as_deref_mut() {
                Some(b) => {
                    let (f, c) = b.forward(&xb, Mode::Train)?;
                    (f, Some(c))
                }
                None => (xb, None),
            };
            let (logits, hcache) = head.forward(&f)?;
            let (task_loss, dlogits) = softmax_cross_entropy(&logits, &yb)?;
            let (hgrads, mut df) = head.backward(&hcache, &dlogits);

            let mut batch_loss = task_loss;
            if cache.is_some() && !problem.nuisance.is_empty() {
                // heads step first on the current features
                for _ in 0..tcfg.adversary_steps {
                    let mut head_grads = NamedGrads::default();
                    for t in &problem.nuisance {
                        let (nl, nc) = t.head.forward(&f)?;
                        let nb: Vec<usize> = idx.iter().map(|&i| t.labels[i]).collect();
                        let (_, dn) = softmax_cross_entropy(&nl, &nb)?;
                        let (g, _) = t.head.backward(&nc, &dn);
                        head_grads.extend_prefixed(&format!("{}.", t.factor.as_str()), g);
                    }
                    let mut params = Vec::new();
                    for t in problem.nuisance.iter_mut() {
                        params.extend(prefixed(&format!("{}.", t.factor.as_str()), t.head.params_mut()));
                    }
                    adv_opt.step(params, &head_grads).map_err(divergence(epoch))?;
                }
                // then the feature extractor is pushed toward uniform predictions
                let mut outs = Vec::with_capacity(problem.nuisance.len());
                for t in &problem.nuisance {
                    outs.push(t.head.forward(&f)?);
                }
                let views: Vec<(Nuisance, &Matrix)> = problem
                    .nuisance
                    .iter()
                    .zip(&outs)
                    .map(|(t, (l, _))| (t.factor, l))
                    .collect();
                let adv = compose_adversarial_loss(task_loss, &views, &tcfg.adversarial);
                batch_loss = adv.total;
                for ((t, (_, nc)), (_, du)) in problem.nuisance.iter().zip(&outs).zip(&adv.grads) {
                    let (_, dfu) = t.head.backward(nc, du);
                    for (a, b) in df.as_mut_slice().iter_mut().zip(dfu.as_slice()) {
                        *a += b;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    param: "loss".into(),
                });
            }
            loss_sum += batch_loss * idx.len() as f64;

            let mut grads = NamedGrads::default();
            grads.extend_prefixed("head.", hgrads);
            let mut params = prefixed("head.", head.params_mut());
            if let (Some(b), Some(c)) = (backbone.as_deref_mut(), cache.as_ref()) {
                let (bg, _) = b.backward(c, &df)?;
                grads.extend_prefixed("backbone.", bg);
                params.extend(prefixed("backbone.", b.params_mut()));
            }
            opt.step(params, &grads).map_err(divergence(epoch))?;
        }
        let train_loss = loss_sum / n as f64;
        let validation = if has_val {
            let v = monitored(backbone.as_deref(), head, &problem.xv, &problem.yv, monitor)?;
            if !v.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    param: "validation metric".into(),
                });
            }
            Some(v)
        } else {
            None
        };
        curve.push(validation.unwrap_or(train_loss));
        history.push(EpochRecord {
            epoch,
            train_loss,
            validation,
        });
        let decision = early_stopper(&curve, tcfg.patience, objective).expect("nonempty history");
        if decision.best_epoch() == epoch {
            best_epoch = epoch;
            best = Some((backbone.as_deref().cloned(), head.clone()));
        }
        if matches!(decision, StopDecision::Stop { .. }) {
            break;
        }
    }
    if let Some((b, h)) = best {
        if let (Some(dst), Some(src)) = (backbone.as_deref_mut(), b) {
            *dst = src;
        }
        *head = h;
    }
    Ok((history, best_epoch, objective))
}

/// Training compound wells of `data` that `labeler` assigns a class to.
fn labelled_train_wells<'a>(
    data: &'a ArenaDataset,
    keep: impl Fn(usize) -> bool,
    labeler: impl Fn(usize) -> Option<usize>,
) -> Vec<(&'a WellRecord, usize)> {
    data.wells
        .iter()
        .filter(|w| w.pert_type == PertType::Compound && data.split_of(w) == Split::Train && keep(w.pert_id))
        .filter_map(|w| labeler(w.pert_id).map(|l| (w, l)))
        .collect()
}

fn supervised(
    config: &BackboneConfig,
    tcfg: &TrainConfig,
    data: &ArenaDataset,
    key: &str,
    labeler: impl Fn(usize) -> Option<usize>,
    monitor: Monitor,
    adversarial: bool,
) -> Result<TrainedModel, TrainError> {
    tcfg.validate()?;
    let rows = labelled_train_wells(data, |_| true, labeler);
    let classes = ClassMap::from_labels(rows.iter().map(|(_, l)| *l));
    if classes.len() < 2 {
        return Err(TrainError::Data(format!(
            "{key} training needs at least 2 classes, found {}",
            classes.len()
        )));
    }
    let d_in = rows[0].0.features.len();
    if d_in != config.d_in {
        return Err(TrainError::Config(format!(
            "backbone expects {} features, data has {d_in}",
            config.d_in
        )));
    }
    let groups: Vec<usize> = rows.iter().map(|(w, _)| w.pert_id).collect();
    let (tr, va) = replicate_split(&groups, tcfg.seed, key);
    let pick = |ix: &[usize]| -> (Matrix, Vec<usize>) {
        let wells: Vec<&WellRecord> = ix.iter().map(|&i| rows[i].0).collect();
        let y = ix
            .iter()
            .map(|&i| classes.index(rows[i].1).expect("known class"))
            .collect();
        (features_of(&wells), y)
    };
    let (x, y) = pick(&tr);
    let (xv, yv) = pick(&va);

    let mut nuisance = Vec::new();
    if adversarial {
        for f in Nuisance::ALL {
            let lambda = tcfg.adversarial.get(f);
            if lambda == 0.0 {
                continue;
            }
            let raw: Vec<usize> = tr.iter().map(|&i| f.value(rows[i].0)).collect();
            let map = ClassMap::from_labels(raw.iter().copied());
            let labels = raw.iter().map(|v| map.index(*v).expect("known")).collect();
            let head = ProbeHead::new(
                config.width,
                config.width,
                map.len(),
                tcfg.seed,
                &format!("nuisance/{}", f.as_str()),
            )?;
            nuisance.push(NuisanceTarget {
                factor: f,
                lambda,
                labels,
                head,
            });
        }
    }
    debug_assert!(nuisance.iter().all(|t| t.lambda > 0.0));

    let mut backbone = Backbone::new(config)?;
    let hidden = tcfg.probe_hidden.unwrap_or(config.width);
    let mut head = ProbeHead::new(config.width, hidden, classes.len(), tcfg.seed, key)?;
    let mut problem = Problem { x, y, xv, yv, nuisance };
    let (history, best_epoch, objective) = fit(Some(&mut backbone), &mut head, &mut problem, tcfg, monitor, key)?;
    Ok(TrainedModel {
        backbone,
        heads: BTreeMap::from([(key.to_string(), head)]),
        classes: BTreeMap::from([(key.to_string(), classes)]),
        history,
        best_epoch,
        objective,
    })
}

pub const IBP_HEAD: &str = "ibp";

/// Pretrains a backbone to predict the molecule id of every training compound
/// well in the view (arena and OOD compounds). The result is frozen.
pub fn train_ibp(config: &BackboneConfig, tcfg: &TrainConfig, data: &ArenaDataset) -> Result<TrainedModel, TrainError> {
    let mut model = supervised(
        config,
        tcfg,
        data,
        IBP_HEAD,
        Some,
        Monitor::Loss,
        !tcfg.adversarial.is_zero(),
    )?;
    model.backbone.frozen = true;
    Ok(model)
}

/// Trains backbone and head end to end on task labels.
pub fn train_task_supervised(
    config: &BackboneConfig,
    tcfg: &TrainConfig,
    data: &ArenaDataset,
    task: Task,
) -> Result<TrainedModel, TrainError> {
    if task == Task::Discovery {
        return Err(TrainError::Config(
            "discovery is evaluated zero-shot and has no training labels".into(),
        ));
    }
    supervised(
        config,
        tcfg,
        data,
        task.as_str(),
        |c| task.label(data, c),
        task.monitor(tcfg.top_k),
        !tcfg.adversarial.is_zero(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: Task,
    /// Top-k accuracy for MoA/target, cross entropy for molecules.
    pub metric: f64,
    pub metric_name: String,
    pub chance: f64,
    /// Top-1 accuracy over all holdout wells, whatever the headline metric.
    pub top1: f64,
    pub n_holdout: usize,
    pub coverage_warning: Option<String>,
}

/// Scores a head on the arena-holdout wells of `data`.
pub fn evaluate_task(
    backbone: &Backbone,
    head: &ProbeHead,
    classes: &ClassMap,
    task: Task,
    data: &ArenaDataset,
    top_k: usize,
) -> Result<TaskScore, TrainError> {
    let wells: Vec<&WellRecord> = data
        .holdout_wells()
        .filter(|w| w.pert_type == PertType::Compound && data.arena_compounds.contains(&w.pert_id))
        .collect();
    let labels: Vec<usize> = wells
        .iter()
        .map(|w| task.label(data, w.pert_id))
        .collect::<Option<_>>()
        .ok_or_else(|| TrainError::Data(format!("holdout compound without {task} label")))?;
    if wells.is_empty() {
        return Err(TrainError::Data("no arena holdout wells".into()));
    }
    let logits = head.logits(&backbone.embed(&features_of(&wells))?)?;
    if !logits.is_finite() {
        return Err(TrainError::Data("non-finite predictions on arena holdout wells".into()));
    }
    let mapped: Vec<Option<usize>> = labels.iter().map(|&l| classes.index(l)).collect();
    let uncovered: BTreeSet<usize> = labels
        .iter()
        .zip(&mapped)
        .filter(|(_, m)| m.is_none())
        .map(|(l, _)| *l)
        .collect();
    let coverage_warning = (!uncovered.is_empty()).then(|| {
        format!(
            "{} holdout {task} classes never seen in training: {:?}",
            uncovered.len(),
            uncovered
        )
    });

    let top1 = mapped
        .iter()
        .enumerate()
        .filter(|(i, m)| m.is_some_and(|c| rank(logits.row(*i), c) == 0))
        .count() as f64
        / wells.len() as f64;
    let (metric, metric_name, chance) = match task {
        Task::Molecule => {
            let (rows, ys): (Vec<usize>, Vec<usize>) =
                mapped.iter().enumerate().filter_map(|(i, m)| m.map(|c| (i, c))).unzip();
            if rows.is_empty() {
                return Err(TrainError::Data("no holdout molecule is covered by the head".into()));
            }
            let m = softmax_cross_entropy(&logits.select_rows(&rows), &ys)?.0;
            (m, "cce".to_string(), (classes.len() as f64).ln())
        }
        _ => {
            let k = top_k.min(classes.len());
            let hits = mapped
                .iter()
                .enumerate()
                .filter(|(i, m)| m.is_some_and(|c| rank(logits.row(*i), c) < k))
                .count();
            let label_classes = ClassMap::from_labels(labels.iter().copied());
            let idx: Vec<usize> = labels.iter().map(|l| label_classes.index(*l).expect("known")).collect();
            let chance = chance_topk(&label_histogram(&idx, label_classes.len()), k)
                .map_err(|e| TrainError::Data(e.to_string()))?;
            (hits as f64 / wells.len() as f64, format!("top{k}"), chance)
        }
    };
    Ok(TaskScore {
        task,
        metric,
        metric_name,
        chance,
        top1,
        n_holdout: wells.len(),
        coverage_warning,
    })
}

fn rank(row: &[f64], label: usize) -> usize {
    let v = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && j < label))
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub head: ProbeHead,
    pub classes: ClassMap,
    pub score: TaskScore,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

/// Fits a three-layer probe on frozen eval-mode features of arena training
/// wells, then scores it once on the arena holdout.
pub fn fit_probe(
    model: &TrainedModel,
    task: Task,
    data: &ArenaDataset,
    tcfg: &TrainConfig,
) -> Result<ProbeResult, TrainError> {
    tcfg.validate()?;
    if !model.backbone.frozen {
        return Err(TrainError::Config("probes require a frozen backbone".into()));
    }
    if task == Task::Discovery {
        return Err(TrainError::Config("discovery has no probe".into()));
    }
    let hash_before = model.backbone.parameter_hash();
    let rows = labelled_train_wells(data, |c| data.arena_compounds.contains(&c), |c| task.label(data, c));
    let classes = ClassMap::from_labels(rows.iter().map(|(_, l)| *l));
    if classes.is_empty() {
        return Err(TrainError::Data("no labelled arena training wells".into()));
    }
    let wells: Vec<&WellRecord> = rows.iter().map(|(w, _)| *w).collect();
    let feats = model.embed(&wells)?;
    let groups: Vec<usize> = rows.iter().map(|(w, _)| w.pert_id).collect();
    let tag = format!("probe/{task}");
    let (tr, va) = replicate_split(&groups, tcfg.seed, &tag);
    let ys = |ix: &[usize]| -> Vec<usize> { ix.iter().map(|&i| classes.index(rows[i].1).expect("known")).collect() };
    let mut problem = Problem {
        x: feats.select_rows(&tr),
        y: ys(&tr),
        xv: feats.select_rows(&va),
        yv: ys(&va),
        nuisance: Vec::new(),
    };
    let width = model.backbone.width();
    let mut head = ProbeHead::new(
        width,
        tcfg.probe_hidden.unwrap_or(width),
        classes.len(),
        tcfg.seed,
        &tag,
    )?;
    let (history, best_epoch, _) = fit(None, &mut head, &mut problem, tcfg, task.monitor(tcfg.top_k), &tag)?;

    let score = evaluate_task(&model.backbone, &head, &classes, task, data, tcfg.top_k)?;
    let hash_after = model.backbone.parameter_hash();
    Ok(ProbeResult {
        head,
        classes,
        score,
        history,
        best_epoch,
        backbone_hash_before: hash_before,
        backbone_hash_after: hash_after,
    })
}

/// Fits a fresh classifier for one nuisance factor on frozen features of all
/// training wells and reports its accuracy on held-out replicates alongside
/// the constant-predictor chance.
pub fn nuisance_probe(
    model: &TrainedModel,
    factor: Nuisance,
    data: &ArenaDataset,
    tcfg: &TrainConfig,
) -> Result<(f64, f64), TrainError> {
    let wells: Vec<&WellRecord> = data.train_wells().collect();
    let raw: Vec<usize> = wells.iter().map(|w| factor.value(w)).collect();
    let classes = ClassMap::from_labels(raw.iter().copied());
    if classes.len() < 2 {
        return Err(TrainError::Data(format!("only one {} in the data", factor.as_str())));
    }
    let y: Vec<usize> = raw.iter().map(|v| classes.index(*v).expect("known")).collect();
    let feats = model.embed(&wells)?;
    let mut r = rng::stream(tcfg.seed, &format!("nuisance-probe/{}", factor.as_str()));
    let mut order: Vec<usize> = (0..wells.len()).collect();
    order.shuffle(&mut r);
    let cut = wells.len() * 4 / 5;
    let (tr, te) = order.split_at(cut);
    let mut problem = Problem {
        x: feats.select_rows(tr),
        y: tr.iter().map(|&i| y[i]).collect(),
        xv: Matrix::zeros(0, feats.cols()),
        yv: Vec::new(),
        nuisance: Vec::new(),
    };
    let width = model.backbone.width();
    let tag = format!("nuisance-probe/{}", factor.as_str());
    let mut head = ProbeHead::new(
        width,
        tcfg.probe_hidden.unwrap_or(width),
        classes.len(),
        tcfg.seed,
        &tag,
    )?;
    fit(None, &mut head, &mut problem, tcfg, Monitor::Loss, &tag)?;
    let logits = head.logits(&feats.select_rows(te))?;
    let yt: Vec<usize> = te.iter().map(|&i| y[i]).collect();
    let acc = crate::eval::topk_accuracy(&logits, &yt, 1).map_err(|e| TrainError::Data(e.to_string()))?;
    let chance = chance_topk(&label_histogram(&yt, classes.len()), 1).map_err(|e| TrainError::Data(e.to_string()))?;
    Ok((acc, chance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arena::{CompoundLabels, WellRecord};
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn early_stopping_rules() {
        let improving: Vec<f64> = (0..40).map(|i| 100.0 - i as f64).collect();
        assert_eq!(
            early_stopper(&improving, 15, Objective::Minimize),
            Some(StopDecision::Continue { best_epoch: 40 })
        );
        let mut flat = vec![10.0, 9.0, 8.0, 7.0, 1.0];
        flat.extend(std::iter::repeat_n(1.0, 14));
        assert_eq!(
            early_stopper(&flat, 15, Objective::Minimize),
            Some(StopDecision::Continue { best_epoch: 5 })
        );
        flat.push(1.0);
        assert_eq!(flat.len(), 20);
        assert_eq!(
            early_stopper(&flat, 15, Objective::Minimize),
            Some(StopDecision::Stop { best_epoch: 5 })
        );
        let tie = [0.1, 0.2, 0.5, 0.3, 0.2, 0.1, 0.4, 0.3, 0.5, 0.2];
        assert_eq!(early_stopper(&tie, 15, Objective::Maximize).unwrap().best_epoch(), 3);
        assert_eq!(early_stopper(&[], 15, Objective::Minimize), None);
    }

    proptest::proptest! {
        #[test]
        fn best_epoch_is_never_beaten(h in proptest::collection::vec(-5.0f64..5.0, 1..60), p in 1usize..20) {
            let best = early_stopper(&h, p, Objective::Minimize).unwrap().best_epoch();
            proptest::prop_assert!(h.iter().all(|v| *v >= h[best - 1]));
            proptest::prop_assert!(h[..best - 1].iter().all(|v| *v > h[best - 1]));
        }
    }

    #[test]
    fn zero_weights_leave_loss_bitwise() {
        let logits = Matrix::from_rows(&[[3.0, -1.0], [0.5, 0.2]]);
        let task = 0.123456789012345;
        let out = compose_adversarial_loss(task, &[(Nuisance::Plate, &logits)], &AdversarialWeights::default());
        assert_eq!(out.total.to_bits(), task.to_bits());
        assert!(out.terms.is_empty());
    }

    #[test]
    fn constant_nuisance_logits_hit_log_k() {
        let logits = Matrix::from_vec(3, 6, vec![0.7; 18]);
        let w = AdversarialWeights {
            plate: 2.0,
            ..Default::default()
        };
        let out = compose_adversarial_loss(1.0, &[(Nuisance::Plate, &logits)], &w);
        assert!((out.terms[0].1 - 6f64.ln()).abs() < 1e-12);
        assert!((out.total - (1.0 + 2.0 * 6f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn batches_merge_trailing_singleton() {
        let order: Vec<usize> = (0..7).collect();
        let b = batches(&order, 3);
        assert_eq!(b, vec![vec![0, 1, 2], vec![3, 4, 5, 6]]);
        assert_eq!(batches(&order, 100), vec![order.clone()]);
    }

    /// Two-MoA toy: compounds of MoA `m` sit near `±3·e_0` in feature space.
    fn separable(n_compounds: usize, reps: usize, d: usize, seed: u64) -> ArenaDataset {
        let mut r = rng::stream(seed, "toy");
        let mut wells = Vec::new();
        let mut split = BTreeMap::new();
        let mut label_maps = BTreeMap::new();
        let mut arena = BTreeSet::new();
        for c in 0..n_compounds {
            let moa = c % 2;
            label_maps.insert(
                c,
                CompoundLabels {
                    moa_id: moa,
                    target_id: moa,
                },
            );
            arena.insert(c);
            let centre: Vec<f64> = (0..d)
                .map(|j| {
                    if j == 0 {
                        if moa == 0 {
                            3.0
                        } else {
                            -3.0
                        }
                    } else {
                        r.sample::<f64, _>(StandardNormal)
                    }
                })
                .collect();
            for rep in 0..reps {
                let id = wells.len();
                let features = centre
                    .iter()
                    .map(|m| m + 0.2 * r.sample::<f64, _>(StandardNormal))
                    .collect();
                wells.push(WellRecord {
                    well_id: id,
                    features,
                    plate: id % 4,
                    batch: id % 2,
                    source: 0,
                    row: id / 24,
                    col: id % 24,
                    pert_type: PertType::Compound,
                    pert_id: c,
                    replicate_index: rep,
                });
                split.insert(
                    id,
                    if rep + 1 == reps {
                        Split::ArenaHoldout
                    } else {
                        Split::Train
                    },
                );
            }
        }
        ArenaDataset {
            wells,
            split,
            label_maps,
            arena_compounds: arena,
            ood_pool: BTreeSet::new(),
            crispr_genes: BTreeMap::new(),
            replicates: reps,
        }
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            batch_size: 16,
            max_epochs: 60,
            patience: 60,
            weight_decay: 0.0,
            seed: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn two_molecule_ibp_separates() {
        let ds = separable(2, 6, 4, 3);
        let cfg = BackboneConfig {
            depth: 1,
            width: 8,
            d_in: 4,
            seed: 2,
        };
        let model = train_ibp(
            &cfg,
            &TrainConfig {
                max_epochs: 50,
                ..quick()
            },
            &ds,
        )
        .unwrap();
        assert!(model.backbone.frozen);
        let head = &model.heads[IBP_HEAD];
        let wells: Vec<&WellRecord> = ds.train_wells().collect();
        let logits = head.logits(&model.embed(&wells).unwrap()).unwrap();
        let classes = &model.classes[IBP_HEAD];
        let y: Vec<usize> = wells.iter().map(|w| classes.index(w.pert_id).unwrap()).collect();
        assert_eq!(crate::eval::topk_accuracy(&logits, &y, 1).unwrap(), 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = separable(6, 4, 5, 4);
        let cfg = BackboneConfig {
            depth: 2,
            width: 8,
            d_in: 5,
            seed: 2,
        };
        let tcfg = TrainConfig {
            max_epochs: 10,
            ..quick()
        };
        let a = train_ibp(&cfg, &tcfg, &ds).unwrap();
        let b = train_ibp(&cfg, &tcfg, &ds).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.best_epoch, b.best_epoch);
        assert_eq!(a.backbone.parameter_hash(), b.backbone.parameter_hash());
    }

    #[test]
    fn task_supervision_solves_separable_moa() {
        let ds = separable(8, 4, 4, 5);
        let cfg = BackboneConfig {
            depth: 1,
            width: 8,
            d_in: 4,
            seed: 2,
        };
        let tcfg = TrainConfig { top_k: 1, ..quick() };
        let m = train_task_supervised(&cfg, &tcfg, &ds, Task::Moa).unwrap();
        let score = evaluate_task(&m.backbone, &m.heads["moa"], &m.classes["moa"], Task::Moa, &ds, 1).unwrap();
        assert_eq!(score.metric, 1.0);
        assert_eq!(score.chance, 0.5);
        assert!(train_task_supervised(&cfg, &tcfg, &ds, Task::Discovery).is_err());
    }

    #[test]
    fn molecule_task_matches_ibp_objective() {
        let ds = separable(4, 4, 4, 6);
        let cfg = BackboneConfig {
            depth: 1,
            width: 8,
            d_in: 4,
            seed: 2,
        };
        let tcfg = TrainConfig {
            max_epochs: 5,
            ..quick()
        };
        let ibp = train_ibp(&cfg, &tcfg, &ds).unwrap();
        let task = train_task_supervised(&cfg, &tcfg, &ds, Task::Molecule).unwrap();
        // identical objective, data and seeds; only the head's name differs
        assert_eq!(ibp.classes[IBP_HEAD], task.classes["molecule"]);
        assert_eq!(ibp.history.len(), task.history.len());
        for (a, b) in ibp.history.iter().zip(&task.history) {
            assert!((a.train_loss - b.train_loss).abs() < 1.0);
        }
    }

    #[test]
    fn probe_on_identity_backbone_solves_separable_task() {
        let ds = separable(8, 5, 4, 7);
        let cfg = BackboneConfig {
            depth: 1,
            width: 4,
            d_in: 4,
            seed: 2,
        };
        let mut backbone = Backbone::new(&cfg).unwrap();
        backbone.input = crate::nn::Linear {
            weight: Matrix::identity(4),
            bias: vec![0.0; 4],
        };
        backbone.blocks[0].linear = crate::nn::Linear::zeros(4, 4);
        backbone.frozen = true;
        let model = TrainedModel {
            backbone,
            heads: BTreeMap::new(),
            classes: BTreeMap::new(),
            history: vec![],
            best_epoch: 0,
            objective: Objective::Minimize,
        };
        let tcfg = TrainConfig { top_k: 1, ..quick() };
        let res = fit_probe(&model, Task::Moa, &ds, &tcfg).unwrap();
        assert_eq!(res.score.metric, 1.0);
        assert_eq!(res.backbone_hash_before, res.backbone_hash_after);
        assert_eq!(res.backbone_hash_before, model.backbone.parameter_hash());
    }

    #[test]
    fn probe_requires_frozen_backbone() {
        let ds = separable(4, 3, 4, 8);
        let cfg = BackboneConfig {
            depth: 1,
            width: 4,
            d_in: 4,
            seed: 2,
        };
        let mut m = train_task_supervised(
            &cfg,
            &TrainConfig {
                max_epochs: 2,
                ..quick()
            },
            &ds,
            Task::Moa,
        )
        .unwrap();
        assert!(fit_probe(&m, Task::Moa, &ds, &quick()).is_err());
        m.backbone.frozen = true;
        assert!(fit_probe(
            &m,
            Task::Moa,
            &ds,
            &TrainConfig {
                max_epochs: 2,
                ..quick()
            }
        )
        .is_ok());
    }

    #[test]
    fn poisoned_holdout_is_never_read_during_training() {
        let mut ds = separable(6, 4, 4, 9);
        for w in ds.wells.iter_mut() {
            if ds.split[&w.well_id] == Split::ArenaHoldout {
                w.features = vec![f64::NAN; 4];
            }
        }
        let cfg = BackboneConfig {
            depth: 1,
            width: 6,
            d_in: 4,
            seed: 2,
        };
        let tcfg = TrainConfig {
            max_epochs: 5,
            ..quick()
        };
        let model = train_ibp(&cfg, &tcfg, &ds).unwrap();
        assert!(model.backbone.parameter_hash().len() == 64);
        // the probe trains fine; only the final holdout score sees the canaries
        let err = fit_probe(&model, Task::Moa, &ds, &tcfg).unwrap_err();
        assert!(err.to_string().contains("holdout"), "{err}");
    }

    #[test]
    fn non_finite_training_feature_reports_epoch() {
        let mut ds = separable(4, 4, 4, 10);
        ds.wells[0].features[1] = f64::INFINITY;
        let cfg = BackboneConfig {
            depth: 1,
            width: 6,
            d_in: 4,
            seed: 2,
        };
        let err = train_ibp(&cfg, &quick(), &ds).unwrap_err();
        assert!(matches!(err, TrainError::Divergence { epoch: 1, .. }), "{err:?}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ds = separable(4, 3, 4, 11);
        let cfg = BackboneConfig {
            depth: 1,
            width: 4,
            d_in: 4,
            seed: 2,
        };
        for bad in [
            TrainConfig { patience: 0, ..quick() },
            TrainConfig { lr: 0.0, ..quick() },
            TrainConfig {
                adversarial: AdversarialWeights {
                    plate: -1.0,
                    ..Default::default()
                },
                ..quick()
            },
        ] {
            assert!(matches!(train_ibp(&cfg, &bad, &ds), Err(TrainError::Config(_))));
        }
    }

    #[test]
    fn adversarial_training_runs_and_records_history() {
        let ds = separable(6, 4, 4, 12);
        let cfg = BackboneConfig {
            depth: 1,
            width: 6,
            d_in: 4,
            seed: 2,
        };
        let tcfg = TrainConfig {
            max_epochs: 5,
            adversarial: AdversarialWeights {
                plate: 1.0,
                batch: 0.5,
                ..Default::default()
            },
            ..quick()
        };
        let m = train_ibp(&cfg, &tcfg, &ds).unwrap();
        assert_eq!(m.history.len(), 5);
        // the adversarial terms are included in the reported train loss
        let plain = train_ibp(
            &cfg,
            &TrainConfig {
                adversarial: AdversarialWeights::default(),
                ..tcfg
            },
            &ds,
        )
        .unwrap();
        assert!(m.history[0].train_loss > plain.history[0].train_loss);
    }
}
