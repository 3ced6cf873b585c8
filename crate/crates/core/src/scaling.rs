//! Scaling analysis over run records: best-model frontiers, ordinary least
//! squares lines, data-requirement extrapolation and replicate effects.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::train::{Objective, Task};
use crate::zoo::{RunRecord, RunStatus, Supervision};

/// Replicates per molecule when converting molecules to wells.
pub const DEFAULT_REPLICATES: f64 = 5.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScalingError {
    #[error("singular fit: {0}")]
    Singular(String),
    #[error("infeasible extrapolation: {0}")]
    Infeasible(String),
    #[error("input error: {0}")]
    Input(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub x: f64,
    pub best: f64,
    /// Fingerprints of the records behind the best value.
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XAxis {
    /// Distinct OOD compounds in the training view.
    OodCount,
    /// OOD compound training wells (non-unique molecules).
    OodWells,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierSpec {
    pub supervision: Supervision,
    pub task: Task,
    pub x_axis: XAxis,
    /// Aggregate seeds by median before maximizing over the other axes.
    pub median_over_seeds: bool,
    pub truncate_overfit: bool,
}

impl FrontierSpec {
    pub fn new(supervision: Supervision, task: Task) -> Self {
        Self {
            supervision,
            task,
            x_axis: XAxis::OodWells,
            median_over_seeds: true,
            truncate_overfit: true,
        }
    }
}

pub fn objective_for(task: Task) -> Objective {
    match task {
        Task::Molecule => Objective::Minimize,
        _ => Objective::Maximize,
    }
}

fn better(objective: Objective, a: f64, b: f64) -> bool {
    match objective {
        Objective::Maximize => a > b,
        Objective::Minimize => a < b,
    }
}

/// Best value per distinct `x`, sorted by `x`. With `truncate`, trailing
/// points that fall behind the running best are dropped.
pub fn frontier_points(points: &[(f64, f64, String)], objective: Objective, truncate: bool) -> Vec<FrontierPoint> {
    let mut by_x: BTreeMap<u64, FrontierPoint> = BTreeMap::new();
    let mut sorted: Vec<&(f64, f64, String)> = points.iter().collect();
    sorted.sort_by(|a, b| a.2.cmp(&b.2));
    for (x, y, id) in sorted {
        // x values are non-negative counts, so bit order is numeric order
        let key = x.to_bits();
        match by_x.get_mut(&key) {
            None => {
                by_x.insert(
                    key,
                    FrontierPoint {
                        x: *x,
                        best: *y,
                        provenance: vec![id.clone()],
                    },
                );
            }
            Some(p) if better(objective, *y, p.best) => {
                p.best = *y;
                p.provenance = vec![id.clone()];
            }
            Some(p) if *y == p.best => p.provenance.push(id.clone()),
            _ => {}
        }
    }
    let mut out: Vec<FrontierPoint> = by_x.into_values().collect();
    out.sort_by(|a, b| a.x.total_cmp(&b.x));
    if truncate {
        while out.len() > 1 {
            let last = out[out.len() - 1].best;
            let prev_best = out[..out.len() - 1]
                .iter()
                .map(|p| p.best)
                .reduce(|a, b| if better(objective, b, a) { b } else { a })
                .expect("nonempty");
            if better(objective, prev_best, last) {
                out.pop();
            } else {
                break;
            }
        }
    }
    out
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn x_of(r: &RunRecord, axis: XAxis) -> Option<f64> {
    match axis {
        XAxis::OodCount => Some(r.config.ood_count as f64),
        XAxis::OodWells => r.metrics.get("ood_wells").copied(),
    }
}

/// Frontier of done records matching `spec`'s regime and task.
pub fn frontier(records: &[RunRecord], spec: &FrontierSpec) -> Vec<FrontierPoint> {
    let selected: Vec<&RunRecord> = records
        .iter()
        .filter(|r| {
            r.status == RunStatus::Done && r.config.supervision == spec.supervision && r.config.task == spec.task
        })
        .collect();
    let mut points = Vec::new();
    if spec.median_over_seeds {
        let mut groups: BTreeMap<String, (f64, Vec<f64>, Vec<String>)> = BTreeMap::new();
        for r in &selected {
            let (Some(x), Some(m)) = (x_of(r, spec.x_axis), r.metric()) else {
                continue;
            };
            let mut key_cfg = r.config.clone();
            key_cfg.seed = 0;
            let e = groups.entry(key_cfg.fingerprint()).or_insert((x, vec![], vec![]));
            // OOD well counts can differ across seeds only through rounding; keep the first
            e.1.push(m);
            e.2.push(r.fingerprint.clone());
        }
        for (_, (x, mut ms, mut ids)) in groups {
            ids.sort();
            points.push((x, median(&mut ms), ids.join("+")));
        }
    } else {
        for r in &selected {
            if let (Some(x), Some(m)) = (x_of(r, spec.x_axis), r.metric()) {
                points.push((x, m, r.fingerprint.clone()));
            }
        }
    }
    frontier_points(&points, objective_for(spec.task), spec.truncate_overfit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
    pub x_unit: String,
    pub y_unit: String,
    pub group: String,
}

/// Ordinary least squares `y = slope·x + intercept`.
pub fn fit_linear(points: &[(f64, f64)]) -> Result<ScalingFit, ScalingError> {
    if points.len() < 2 {
        return Err(ScalingError::Singular(format!("{} points", points.len())));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(ScalingError::Input("non-finite point".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return Err(ScalingError::Singular("all x values are identical".into()));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let ss_res: f64 = points
        .iter()
        .map(|p| {
            let e = p.1 - (slope * p.0 + intercept);
            e * e
        })
        .sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(ScalingFit {
        slope,
        intercept,
        r_squared,
        n_points: points.len(),
        x_unit: "molecules".into(),
        y_unit: String::new(),
        group: String::new(),
    })
}

/// Fits a frontier in reporting units: accuracy in percentage points,
/// cross entropy in nats, x in molecules or wells.
pub fn fit_frontier(
    points: &[FrontierPoint],
    task: Task,
    x_axis: XAxis,
    group: &str,
) -> Result<ScalingFit, ScalingError> {
    let (scale, unit) = match task {
        Task::Molecule => (1.0, "nats"),
        Task::Discovery => (1.0, "auc"),
        _ => (100.0, "percent"),
    };
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.x, p.best * scale)).collect();
    let mut fit = fit_linear(&xy)?;
    fit.x_unit = match x_axis {
        XAxis::OodCount => "molecules",
        XAxis::OodWells => "wells",
    }
    .into();
    fit.y_unit = unit.into();
    fit.group = group.into();
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    pub molecules: f64,
    pub wells: f64,
    pub replicates: f64,
}

/// Additional molecules needed to move from `current` to `target` along the
/// fitted line, and the wells that implies at `replicates` per molecule.
/// A fit over wells is converted back to molecules.
pub fn extrapolate(
    fit: &ScalingFit,
    current: f64,
    target: f64,
    replicates: f64,
) -> Result<Extrapolation, ScalingError> {
    if !(replicates > 0.0) {
        return Err(ScalingError::Input(format!(
            "replicates must be positive, got {replicates}"
        )));
    }
    let delta = target - current;
    if delta == 0.0 {
        return Ok(Extrapolation {
            molecules: 0.0,
            wells: 0.0,
            replicates,
        });
    }
    if fit.slope == 0.0 || delta.signum() != fit.slope.signum() {
        return Err(ScalingError::Infeasible(format!(
            "slope {} cannot move {current} toward {target}",
            fit.slope
        )));
    }
    let dx = delta / fit.slope;
    let molecules = if fit.x_unit == "wells" { dx / replicates } else { dx };
    Ok(Extrapolation {
        molecules,
        wells: molecules * replicates,
        replicates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate_fraction: f64,
    pub frontier: Vec<FrontierPoint>,
    pub fit: Option<ScalingFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEffect {
    pub rows: Vec<ReplicateRow>,
    /// Whether slopes are nondecreasing in replicate fraction; `None` when
    /// fewer than two fractions have a fit.
    pub slope_nondecreasing: Option<bool>,
}

/// One frontier and fit per replicate fraction.
pub fn replicate_effect(records: &[RunRecord], spec: &FrontierSpec) -> ReplicateEffect {
    let mut fractions: Vec<f64> = records.iter().map(|r| r.config.replicate_fraction).collect();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let rows: Vec<ReplicateRow> = fractions
        .into_iter()
        .map(|f| {
            let subset: Vec<RunRecord> = records
                .iter()
                .filter(|r| r.config.replicate_fraction == f)
                .cloned()
                .collect();
            let frontier = frontier(&subset, spec);
            let fit = fit_frontier(&frontier, spec.task, spec.x_axis, &format!("replicate_fraction={f}")).ok();
            ReplicateRow {
                replicate_fraction: f,
                frontier,
                fit,
            }
        })
        .collect();
    let slopes: Vec<f64> = rows.iter().filter_map(|r| r.fit.as_ref().map(|f| f.slope)).collect();
    let slope_nondecreasing = (slopes.len() >= 2).then(|| slopes.windows(2).all(|w| w[1] >= w[0]));
    ReplicateEffect {
        rows,
        slope_nondecreasing,
    }
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}
