//! Experiment grid: enumerate run configurations, execute each as
//! train → probe → holdout evaluation, and persist records to an append-only
//! JSON-lines store that supports resumption by content fingerprint.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arena::{subsample_view, ArenaDataset, PertType};
use crate::eval::{discovery_challenge, Metric};
use crate::nn::BackboneConfig;
use crate::rng;
use crate::train::{
    evaluate_task, features_of, fit_probe, train_ibp, train_task_supervised, AdversarialWeights, Task, TrainConfig,
    TrainedModel,
};

pub const STORE_SCHEMA: u32 = 1;
/// CRISPR perturbations need this many replicate wells to enter discovery.
pub const DISCOVERY_MIN_REPLICATES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    Ibp,
    Task,
}

impl Supervision {
    pub fn as_str(self) -> &'static str {
        match self {
            Supervision::Ibp => "ibp",
            Supervision::Task => "task",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub supervision: Supervision,
    pub task: Task,
    pub depth: usize,
    pub width: usize,
    pub ood_count: usize,
    pub replicate_fraction: f64,
    #[serde(default)]
    pub adversarial: AdversarialWeights,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.task == Task::Discovery && self.supervision == Supervision::Task {
            return Err("discovery is zero-shot and only runs with IBP supervision".into());
        }
        if self.depth == 0 || self.width == 0 {
            return Err("depth and width must be at least 1".into());
        }
        if !(self.replicate_fraction > 0.0 && self.replicate_fraction <= 1.0) {
            return Err(format!("replicate_fraction {} outside (0, 1]", self.replicate_fraction));
        }
        self.adversarial.validate()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn run_seed(&self, global_seed: u64) -> u64 {
        rng::derive_seed(global_seed, &self.fingerprint())
    }
}

/// A config is excluded when every field the rule sets matches.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Exclusion {
    pub supervision: Option<Supervision>,
    pub task: Option<Task>,
    pub depth: Option<usize>,
    pub width: Option<usize>,
    pub ood_count: Option<usize>,
    pub replicate_fraction: Option<f64>,
}

impl Exclusion {
    pub fn matches(&self, c: &RunConfig) -> bool {
        self.supervision.is_none_or(|v| v == c.supervision)
            && self.task.is_none_or(|v| v == c.task)
            && self.depth.is_none_or(|v| v == c.depth)
            && self.width.is_none_or(|v| v == c.width)
            && self.ood_count.is_none_or(|v| v == c.ood_count)
            && self.replicate_fraction.is_none_or(|v| v == c.replicate_fraction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    pub supervision: Vec<Supervision>,
    pub tasks: Vec<Task>,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub ood_counts: Vec<usize>,
    pub replicate_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub adversarial: AdversarialWeights,
    #[serde(default)]
    pub exclude: Vec<Exclusion>,
}

impl GridAxes {
    /// Desk-scale grid shaped like the full-size study, for an OOD pool of `pool` compounds.
    pub fn desk(pool: usize) -> Self {
        let ood = [0.0, 0.25, 0.5, 1.0]
            .iter()
            .map(|f| (f * pool as f64).round() as usize)
            .collect();
        Self {
            supervision: vec![Supervision::Ibp, Supervision::Task],
            tasks: vec![Task::Moa, Task::Target, Task::Molecule],
            depths: vec![1, 3, 6],
            widths: vec![16, 32, 64],
            ood_counts: ood,
            replicate_fractions: vec![0.2, 0.6, 1.0],
            seeds: vec![0],
            adversarial: AdversarialWeights::default(),
            exclude: vec![],
        }
    }
}

/// Cartesian product in axis order (supervision, task, depth, width, OOD
/// count, replicate fraction, seed), minus invalid and excluded combinations.
pub fn build_grid(axes: &GridAxes) -> Vec<RunConfig> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for &supervision in &axes.supervision {
        for &task in &axes.tasks {
            for &depth in &axes.depths {
                for &width in &axes.widths {
                    for &ood_count in &axes.ood_counts {
                        for &replicate_fraction in &axes.replicate_fractions {
                            for &seed in &axes.seeds {
                                let c = RunConfig {
                                    supervision,
                                    task,
                                    depth,
                                    width,
                                    ood_count,
                                    replicate_fraction,
                                    adversarial: axes.adversarial,
                                    seed,
                                };
                                if c.validate().is_err() || axes.exclude.iter().any(|e| e.matches(&c)) {
                                    continue;
                                }
                                if seen.insert(c.fingerprint()) {
                                    out.push(c);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Done,
    Failed,
    Pending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub schema: u32,
    pub fingerprint: String,
    pub config: RunConfig,
    pub run_seed: u64,
    pub status: RunStatus,
    pub cause: Option<String>,
    /// `metric` is the task's headline number (top-k accuracy, cross entropy
    /// or mean discovery AUC), `chance` its baseline.
    pub metrics: BTreeMap<String, f64>,
    pub metric_name: Option<String>,
    pub best_epoch: Option<usize>,
    pub epochs: Option<usize>,
    pub warnings: Vec<String>,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn metric(&self) -> Option<f64> {
        self.metrics.get("metric").copied()
    }

    /// The record with wall-clock time zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_s: 0.0,
            ..self.clone()
        }
    }
}

struct Outcome {
    metrics: BTreeMap<String, f64>,
    metric_name: String,
    best_epoch: usize,
    epochs: usize,
    warnings: Vec<String>,
}

fn run_inner(cfg: &RunConfig, dataset: &ArenaDataset, tcfg: &TrainConfig, run_seed: u64) -> Result<Outcome, String> {
    cfg.validate()?;
    let view = subsample_view(dataset, cfg.ood_count, cfg.replicate_fraction, run_seed).map_err(|e| e.to_string())?;
    let bcfg = BackboneConfig {
        depth: cfg.depth,
        width: cfg.width,
        d_in: dataset.d_feat(),
        seed: run_seed,
    };
    let tcfg = TrainConfig {
        seed: run_seed,
        adversarial: cfg.adversarial,
        ..tcfg.clone()
    };
    let mut metrics = BTreeMap::new();
    let mut warnings = Vec::new();
    let ood_wells = view
        .train_wells()
        .filter(|w| w.pert_type == PertType::Compound && view.ood_pool.contains(&w.pert_id))
        .count();
    let train_wells = view.train_wells().filter(|w| w.pert_type == PertType::Compound).count();
    metrics.insert("ood_wells".into(), ood_wells as f64);
    metrics.insert("train_wells".into(), train_wells as f64);

    let trained: TrainedModel;
    let metric_name;
    match (cfg.supervision, cfg.task) {
        (Supervision::Ibp, Task::Discovery) => {
            trained = train_ibp(&bcfg, &tcfg, &view).map_err(|e| e.to_string())?;
            let all: Vec<_> = view.wells.iter().collect();
            let reps = trained.embed(&all).map_err(|e| e.to_string())?;
            let raw = features_of(&all);
            let ours = discovery_challenge(&view, &reps, DISCOVERY_MIN_REPLICATES, Metric::Cosine)
                .map_err(|e| e.to_string())?;
            let base = discovery_challenge(&view, &raw, DISCOVERY_MIN_REPLICATES, Metric::Cosine)
                .map_err(|e| e.to_string())?;
            if ours.is_empty() {
                return Err("no CRISPR perturbation is eligible for discovery".into());
            }
            let mean = |v: &[crate::eval::DiscoveryOutcome]| v.iter().map(|o| o.auc).sum::<f64>() / v.len() as f64;
            metrics.insert("metric".into(), mean(&ours));
            metrics.insert("baseline_metric".into(), mean(&base));
            metrics.insert("chance".into(), 0.5);
            metrics.insert("n_eligible".into(), ours.len() as f64);
            for (o, b) in ours.iter().zip(&base) {
                metrics.insert(format!("auc/{}", o.crispr_id), o.auc);
                metrics.insert(format!("baseline_auc/{}", b.crispr_id), b.auc);
            }
            metric_name = "auc".to_string();
        }
        (Supervision::Ibp, task) => {
            trained = train_ibp(&bcfg, &tcfg, &view).map_err(|e| e.to_string())?;
            let probe = fit_probe(&trained, task, &view, &tcfg).map_err(|e| e.to_string())?;
            metrics.insert("metric".into(), probe.score.metric);
            metrics.insert("chance".into(), probe.score.chance);
            metrics.insert("probe_best_epoch".into(), probe.best_epoch as f64);
            warnings.extend(probe.score.coverage_warning);
            metric_name = probe.score.metric_name;
        }
        (Supervision::Task, task) => {
            trained = train_task_supervised(&bcfg, &tcfg, &view, task).map_err(|e| e.to_string())?;
            let key = task.as_str();
            let score = evaluate_task(
                &trained.backbone,
                &trained.heads[key],
                &trained.classes[key],
                task,
                &view,
                tcfg.top_k,
            )
            .map_err(|e| e.to_string())?;
            metrics.insert("metric".into(), score.metric);
            metrics.insert("chance".into(), score.chance);
            warnings.extend(score.coverage_warning);
            metric_name = score.metric_name;
        }
    }
    if let Some(last) = trained.history.last() {
        metrics.insert("final_train_loss".into(), last.train_loss);
    }
    if let Some((k, _)) = metrics.iter().find(|(_, v)| !v.is_finite()) {
        return Err(format!("non-finite metric {k}"));
    }
    Ok(Outcome {
        metrics,
        metric_name,
        best_epoch: trained.best_epoch,
        epochs: trained.history.len(),
        warnings,
    })
}

/// Runs one configuration. Failures are captured in the record, never raised.
pub fn execute_run(cfg: &RunConfig, dataset: &ArenaDataset, tcfg: &TrainConfig, global_seed: u64) -> RunRecord {
    let start = Instant::now();
    let run_seed = cfg.run_seed(global_seed);
    let result = run_inner(cfg, dataset, tcfg, run_seed);
    let mut rec = RunRecord {
        schema: STORE_SCHEMA,
        fingerprint: cfg.fingerprint(),
        config: cfg.clone(),
        run_seed,
        status: RunStatus::Failed,
        cause: None,
        metrics: BTreeMap::new(),
        metric_name: None,
        best_epoch: None,
        epochs: None,
        warnings: vec![],
        wall_time_s: 0.0,
    };
    match result {
        Ok(o) => {
            rec.status = RunStatus::Done;
            rec.metrics = o.metrics;
            rec.metric_name = Some(o.metric_name);
            rec.best_epoch = Some(o.best_epoch);
            rec.epochs = Some(o.epochs);
            rec.warnings = o.warnings;
        }
        Err(cause) => rec.cause = Some(cause),
    }
    rec.wall_time_s = start.elapsed().as_secs_f64();
    rec
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("run store {path}: {message}")]
    Io { path: String, message: String },
    #[error("run store {path} is corrupt at line {line}: {message}; rerun with reset to move it aside")]
    Corrupt { path: String, line: usize, message: String },
    #[error("run store {path} line {line} has schema {found}, expected {expected}")]
    Schema {
        path: String,
        line: usize,
        found: u32,
        expected: u32,
    },
}

/// Append-only JSON-lines run store. Appends are serialized through a mutex
/// and written as whole lines.
pub struct RunStore {
    path: PathBuf,
    file: Mutex<File>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> StoreError + '_ {
    move |e| StoreError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Reads every record of a store file; a missing file is an empty store.
pub fn read_store(path: &Path) -> Result<Vec<RunRecord>, StoreError> {
    if !path.exists() {
        return Ok(vec![]);
    }
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |message: String| StoreError::Corrupt {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        let schema = value
            .get("schema")
            .and_then(|s| s.as_u64())
            .ok_or_else(|| corrupt("missing schema".into()))?;
        if schema != STORE_SCHEMA as u64 {
            return Err(StoreError::Schema {
                path: path.display().to_string(),
                line: i + 1,
                found: schema as u32,
                expected: STORE_SCHEMA,
            });
        }
        out.push(serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?);
    }
    Ok(out)
}

impl RunStore {
    /// Opens (creating if needed) a store and returns its existing records.
    /// A corrupt store is refused unless `reset`, which renames it to `*.bak`.
    pub fn open(path: &Path, reset: bool) -> Result<(Self, Vec<RunRecord>), StoreError> {
        let records = match read_store(path) {
            Ok(r) => r,
            Err(e @ StoreError::Io { .. }) => return Err(e),
            Err(e) if !reset => return Err(e),
            Err(_) => {
                let mut bak = path.as_os_str().to_owned();
                bak.push(".bak");
                std::fs::rename(path, &bak).map_err(io_err(path))?;
                vec![]
            }
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(path))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok((
            Self {
                path: path.to_path_buf(),
                file: Mutex::new(file),
            },
            records,
        ))
    }

    pub fn append(&self, rec: &RunRecord) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(rec).map_err(|e| StoreError::Io {
            path: self.path.display().to_string(),
            message: e.to_string(),
        })?;
        line.push('\n');
        let mut f = self.file.lock().expect("store lock poisoned");
        f.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        f.flush().map_err(io_err(&self.path))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[derive(Debug, Clone)]
pub struct ZooOptions {
    pub parallelism: usize,
    pub store: PathBuf,
    pub reset: bool,
    pub global_seed: u64,
    /// Execute at most this many pending runs, then return.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ZooSummary {
    /// Records produced by this invocation, in grid order.
    pub executed: Vec<RunRecord>,
    pub skipped: usize,
}

/// Executes every grid config without a record in the store.
pub fn run_zoo(
    grid: &[RunConfig],
    dataset: &ArenaDataset,
    tcfg: &TrainConfig,
    opts: &ZooOptions,
) -> Result<ZooSummary, StoreError> {
    let (store, existing) = RunStore::open(&opts.store, opts.reset)?;
    let finished: BTreeSet<String> = existing
        .iter()
        .filter(|r| r.status != RunStatus::Pending)
        .map(|r| r.fingerprint.clone())
        .collect();
    let mut pending: Vec<(usize, &RunConfig)> = grid
        .iter()
        .enumerate()
        .filter(|(_, c)| !finished.contains(&c.fingerprint()))
        .collect();
    let skipped = grid.len() - pending.len();
    if let Some(n) = opts.stop_after {
        pending.truncate(n);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallelism.max(1))
        .build()
        .map_err(|e| StoreError::Io {
            path: opts.store.display().to_string(),
            message: e.to_string(),
        })?;
    let results: Vec<Result<(usize, RunRecord), StoreError>> = pool.install(|| {
        pending
            .par_iter()
            .map(|(i, cfg)| {
                let rec = execute_run(cfg, dataset, tcfg, opts.global_seed);
                store.append(&rec)?;
                Ok((*i, rec))
            })
            .collect()
    });
    let mut executed = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    executed.sort_by_key(|(i, _)| *i);
    Ok(ZooSummary {
        executed: executed.into_iter().map(|(_, r)| r).collect(),
        skipped,
    })
}

/// Flattens records into a CSV table with one column per metric name.
pub fn export_csv(records: &[RunRecord], path: &Path) -> Result<(), StoreError> {
    let err = |e: csv::Error| StoreError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let metric_names: BTreeSet<&str> = records
        .iter()
        .flat_map(|r| r.metrics.keys().map(String::as_str))
        .filter(|k| !k.contains('/'))
        .collect();
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header: Vec<String> = [
        "fingerprint",
        "supervision",
        "task",
        "depth",
        "width",
        "ood_count",
        "replicate_fraction",
        "seed",
        "status",
        "metric_name",
        "best_epoch",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(metric_names.iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(err)?;
    for r in records {
        let c = &r.config;
        let mut row = vec![
            r.fingerprint.clone(),
            c.supervision.as_str().into(),
            c.task.as_str().into(),
            c.depth.to_string(),
            c.width.to_string(),
            c.ood_count.to_string(),
            c.replicate_fraction.to_string(),
            c.seed.to_string(),
            format!("{:?}", r.status).to_lowercase(),
            r.metric_name.clone().unwrap_or_default(),
            r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
        ];
        row.extend(
            metric_names
                .iter()
                .map(|k| r.metrics.get(*k).map(|v| v.to_string()).unwrap_or_default()),
        );
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| StoreError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axes() -> GridAxes {
        GridAxes {
            supervision: vec![Supervision::Ibp, Supervision::Task],
            tasks: vec![Task::Moa],
            depths: vec![1, 2],
            widths: vec![8, 16],
            ood_counts: vec![0, 4],
            replicate_fractions: vec![0.5, 1.0],
            seeds: vec![0],
            adversarial: AdversarialWeights::default(),
            exclude: vec![],
        }
    }

    #[test]
    fn grid_counts() {
        assert_eq!(build_grid(&axes()).len(), 32);
        let single = GridAxes {
            supervision: vec![Supervision::Ibp],
            depths: vec![1],
            widths: vec![8],
            ood_counts: vec![0],
            replicate_fractions: vec![1.0],
            ..axes()
        };
        assert_eq!(build_grid(&single).len(), 1);
    }

    #[test]
    fn grid_order_is_lexicographic_on_axes() {
        let g = build_grid(&axes());
        assert_eq!(g[0].supervision, Supervision::Ibp);
        assert_eq!((g[0].depth, g[0].width, g[0].ood_count), (1, 8, 0));
        assert_eq!(g[1].replicate_fraction, 1.0);
        assert_eq!(g[2].ood_count, 4);
        assert_eq!(g[16].supervision, Supervision::Task);
    }

    #[test]
    fn discovery_only_with_ibp_and_exclusions_apply() {
        let a = GridAxes {
            tasks: vec![Task::Moa, Task::Discovery],
            ..axes()
        };
        let g = build_grid(&a);
        assert_eq!(g.len(), 48);
        assert!(g
            .iter()
            .all(|c| !(c.task == Task::Discovery && c.supervision == Supervision::Task)));
        let ex = GridAxes {
            exclude: vec![Exclusion {
                depth: Some(2),
                width: Some(16),
                ..Default::default()
            }],
            ..axes()
        };
        assert_eq!(build_grid(&ex).len(), 24);
    }

    #[test]
    fn full_scale_fingerprints_are_distinct() {
        let a = GridAxes {
            supervision: vec![Supervision::Ibp, Supervision::Task],
            tasks: vec![Task::Moa],
            depths: vec![1, 3, 6, 9, 12],
            widths: vec![128, 256, 512, 1512],
            ood_counts: vec![1000, 20_000, 50_000, 80_000, 100_000],
            replicate_fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            seeds: vec![0],
            adversarial: AdversarialWeights::default(),
            exclude: vec![],
        };
        // 5 depths x 4 widths x 5 OOD counts x 5 fractions x 2 regimes
        assert_eq!(build_grid(&a).len(), 1000);
        let g = build_grid(&GridAxes { seeds: vec![0, 1], ..a });
        assert_eq!(g.len(), 2000);
        let fps: BTreeSet<String> = g.iter().map(|c| c.fingerprint()).collect();
        assert_eq!(fps.len(), 2000);
    }

    #[test]
    fn fingerprint_is_stable_and_seed_is_derived() {
        let c = build_grid(&axes())[3].clone();
        assert_eq!(c.fingerprint(), c.clone().fingerprint());
        assert_eq!(c.run_seed(7), rng::derive_seed(7, &c.fingerprint()));
        assert_ne!(c.run_seed(7), c.run_seed(8));
    }

    #[test]
    fn corrupt_store_needs_reset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("runs.jsonl");
        std::fs::write(&p, "{\"schema\":1,\"fingerprint\":\n").unwrap();
        assert!(matches!(
            RunStore::open(&p, false),
            Err(StoreError::Corrupt { line: 1, .. })
        ));
        let (_, recs) = RunStore::open(&p, true).unwrap();
        assert!(recs.is_empty());
        assert!(dir.path().join("runs.jsonl.bak").exists());
        std::fs::write(&p, "{\"schema\":9}\n").unwrap();
        assert!(matches!(
            RunStore::open(&p, false),
            Err(StoreError::Schema { found: 9, .. })
        ));
    }
}
