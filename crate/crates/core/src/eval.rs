//! Arena metrics: top-k accuracy, constant-predictor chance, molecule cross
//! entropy, CRISPR-to-compound discovery curves, Welch's t-test and a 2-D
//! principal-component projection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::arena::{ArenaDataset, PertType};
use crate::linalg::{self, Matrix};
use crate::nn::softmax_cross_entropy;
use crate::prep::quantile_sorted;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("input error: {0}")]
    Input(String),
    #[error("AUC is undefined without any matching molecule")]
    UndefinedAuc,
    #[error("degenerate samples: {0}")]
    Degenerate(String),
}

/// Rank of `label` in a row, counting strictly larger logits plus equal
/// logits at lower class indices.
fn rank_of(row: &[f64], label: usize) -> usize {
    let v = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && j < label))
        .count()
}

/// Fraction of rows whose label is among the `k` largest logits. Ties go to
/// the lower class index.
pub fn topk_accuracy(logits: &Matrix, labels: &[usize], k: usize) -> Result<f64, EvalError> {
    let n_classes = logits.cols();
    if k == 0 || k > n_classes {
        return Err(EvalError::Input(format!("k = {k} with {n_classes} classes")));
    }
    if labels.len() != logits.rows() || labels.is_empty() {
        return Err(EvalError::Input(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.rows()
        )));
    }
    if !logits.is_finite() {
        return Err(EvalError::Input("non-finite logits".into()));
    }
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(EvalError::Input(format!("label {y} outside [0, {n_classes})")));
        }
        if rank_of(logits.row(i), y) < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Top-k accuracy of the best constant predictor: the mass of the `k` most
/// frequent classes.
pub fn chance_topk(histogram: &[usize], k: usize) -> Result<f64, EvalError> {
    let total: usize = histogram.iter().sum();
    if total == 0 {
        return Err(EvalError::Input("empty label histogram".into()));
    }
    let mut counts = histogram.to_vec();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let top: usize = counts.iter().take(k).sum();
    Ok(top as f64 / total as f64)
}

pub fn label_histogram(labels: &[usize], n_classes: usize) -> Vec<usize> {
    let mut h = vec![0; n_classes];
    for &l in labels {
        if l < n_classes {
            h[l] += 1;
        }
    }
    h
}

/// Mean categorical cross entropy of molecule predictions.
pub fn molecule_cce(logits: &Matrix, labels: &[usize]) -> Result<f64, EvalError> {
    softmax_cross_entropy(logits, labels)
        .map(|(l, _)| l)
        .map_err(|e| EvalError::Input(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryCurve {
    /// Hits among the first `g + 1` guesses at index `g`.
    pub cumulative_hits: Vec<usize>,
    pub n_matches: usize,
    /// Molecule ids in guess order.
    pub order: Vec<usize>,
    /// Molecules whose distance fell back to Euclidean (zero norm under cosine).
    pub euclidean_fallbacks: Vec<usize>,
}

impl DiscoveryCurve {
    pub fn guesses(&self) -> impl Iterator<Item = usize> + '_ {
        1..=self.cumulative_hits.len()
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Ranks molecules by distance to a CRISPR representation and accumulates
/// how many of the first guesses share the knocked-out gene's target.
pub fn discovery_curve(
    crispr: &[f64],
    molecules: &[(usize, Vec<f64>)],
    target_of: &BTreeMap<usize, usize>,
    gene: usize,
    metric: Metric,
) -> Result<DiscoveryCurve, EvalError> {
    if molecules.is_empty() {
        return Err(EvalError::Input("no molecules to rank".into()));
    }
    let mut fallbacks = Vec::new();
    let cn = linalg::norm(crispr);
    let mut scored = Vec::with_capacity(molecules.len());
    for (id, rep) in molecules {
        if rep.len() != crispr.len() {
            return Err(EvalError::Input(format!("molecule {id} has dimension {}", rep.len())));
        }
        let d = match metric {
            Metric::Euclidean => euclidean(crispr, rep),
            Metric::Cosine => {
                let mn = linalg::norm(rep);
                if cn == 0.0 || mn == 0.0 {
                    fallbacks.push(*id);
                    euclidean(crispr, rep)
                } else {
                    1.0 - linalg::dot(crispr, rep) / (cn * mn)
                }
            }
        };
        if !d.is_finite() {
            return Err(EvalError::Input(format!("non-finite distance for molecule {id}")));
        }
        scored.push((d, *id));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut hits = 0;
    let mut cumulative_hits = Vec::with_capacity(scored.len());
    for (_, id) in &scored {
        if target_of.get(id) == Some(&gene) {
            hits += 1;
        }
        cumulative_hits.push(hits);
    }
    Ok(DiscoveryCurve {
        cumulative_hits,
        n_matches: hits,
        order: scored.into_iter().map(|(_, id)| id).collect(),
        euclidean_fallbacks: fallbacks,
    })
}

/// Trapezoidal area under `(guess/M, hits/n_matches)`, starting at the origin.
pub fn discovery_auc(curve: &DiscoveryCurve) -> Result<f64, EvalError> {
    if curve.n_matches == 0 {
        return Err(EvalError::UndefinedAuc);
    }
    let m = curve.cumulative_hits.len() as f64;
    let n = curve.n_matches as f64;
    let mut prev = 0.0;
    let mut area = 0.0;
    for &h in &curve.cumulative_hits {
        let y = h as f64 / n;
        area += (prev + y) / 2.0 / m;
        prev = y;
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_two_sided: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

fn two_sided_p(t: f64, df: f64) -> Result<f64, EvalError> {
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| EvalError::Degenerate(e.to_string()))?;
    Ok((2.0 * dist.sf(t.abs())).min(1.0))
}

/// Welch's unequal-variance t-test with Welch–Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EvalError::Degenerate("each sample needs at least 2 values".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        if ma == mb {
            return Ok(TTest {
                t: 0.0,
                df: (a.len() + b.len() - 2) as f64,
                p_two_sided: 1.0,
            });
        }
        return Err(EvalError::Degenerate(
            "both samples are constant with different means".into(),
        ));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    Ok(TTest {
        t,
        df,
        p_two_sided: two_sided_p(t, df)?,
    })
}

/// One-sample t-test on the differences `a[i] − b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(EvalError::Degenerate(
            "paired samples need equal length of at least 2".into(),
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (m, v) = mean_var(&d);
    let df = (d.len() - 1) as f64;
    if v == 0.0 {
        if m == 0.0 {
            return Ok(TTest {
                t: 0.0,
                df,
                p_two_sided: 1.0,
            });
        }
        return Err(EvalError::Degenerate("constant nonzero differences".into()));
    }
    let t = m / (v / d.len() as f64).sqrt();
    Ok(TTest {
        t,
        df,
        p_two_sided: two_sided_p(t, df)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2d {
    pub coords: Matrix,
    pub explained_variance_ratio: [f64; 2],
    /// Rank below 2: only the first coordinate carries information.
    pub degenerate: bool,
}

/// Projection onto the top two principal components.
pub fn embed_2d(reps: &Matrix) -> Result<Embedding2d, EvalError> {
    if reps.rows() < 3 {
        return Err(EvalError::Input(format!("need at least 3 rows, got {}", reps.rows())));
    }
    if !reps.is_finite() {
        return Err(EvalError::Input("non-finite representation".into()));
    }
    let pa = linalg::principal_axes(reps);
    let total: f64 = pa.variances.iter().sum();
    let v0 = pa.variances[0];
    let v1 = pa.variances.get(1).copied().unwrap_or(0.0);
    let degenerate = pa.variances.len() < 2 || v1 <= 1e-12 * v0.max(f64::MIN_POSITIVE);
    let mut coords = Matrix::zeros(reps.rows(), 2);
    let n_axes = if degenerate { 1 } else { 2 };
    for i in 0..reps.rows() {
        let row = reps.row(i);
        for k in 0..n_axes {
            coords[(i, k)] = (0..reps.cols()).map(|j| (row[j] - pa.mean[j]) * pa.axes[(j, k)]).sum();
        }
    }
    let ratio = |v: f64| if total > 0.0 { v / total } else { 0.0 };
    Ok(Embedding2d {
        coords,
        explained_variance_ratio: [ratio(v0), if degenerate { 0.0 } else { ratio(v1) }],
        degenerate,
    })
}

/// Element-wise median of a set of rows (average of the middle pair when even).
pub fn median_profile(rows: &[&[f64]]) -> Vec<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    (0..d)
        .map(|j| {
            let mut col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            col.sort_by(f64::total_cmp);
            quantile_sorted(&col, 0.5)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryOutcome {
    pub crispr_id: usize,
    pub gene: usize,
    pub n_replicates: usize,
    pub auc: f64,
    pub curve: DiscoveryCurve,
}

/// Zero-shot discovery over every CRISPR perturbation with at least
/// `min_replicates` wells and at least one arena compound on its gene.
/// Perturbation profiles are replicate medians minus the control median.
/// `reps` holds one representation per well, aligned with `ds.wells`.
pub fn discovery_challenge(
    ds: &ArenaDataset,
    reps: &Matrix,
    min_replicates: usize,
    metric: Metric,
) -> Result<Vec<DiscoveryOutcome>, EvalError> {
    if reps.rows() != ds.wells.len() {
        return Err(EvalError::Input(format!(
            "{} representations for {} wells",
            reps.rows(),
            ds.wells.len()
        )));
    }
    let mut by_compound: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    let mut by_crispr: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    let mut controls: Vec<&[f64]> = Vec::new();
    for (i, w) in ds.wells.iter().enumerate() {
        match w.pert_type {
            PertType::Compound if ds.arena_compounds.contains(&w.pert_id) => {
                by_compound.entry(w.pert_id).or_default().push(reps.row(i));
            }
            PertType::Crispr => by_crispr.entry(w.pert_id).or_default().push(reps.row(i)),
            PertType::Control => controls.push(reps.row(i)),
            _ => {}
        }
    }
    // profiles are compared as deviations from the control phenotype
    let reference = if controls.is_empty() {
        vec![0.0; reps.cols()]
    } else {
        median_profile(&controls)
    };
    let profile = |rows: &[&[f64]]| -> Vec<f64> {
        median_profile(rows)
            .iter()
            .zip(&reference)
            .map(|(v, c)| v - c)
            .collect()
    };
    let molecules: Vec<(usize, Vec<f64>)> = by_compound.iter().map(|(c, rows)| (*c, profile(rows))).collect();
    let target_of: BTreeMap<usize, usize> = ds
        .label_maps
        .iter()
        .filter(|(c, _)| ds.arena_compounds.contains(c))
        .map(|(c, l)| (*c, l.target_id))
        .collect();

    let mut out = Vec::new();
    for (pid, rows) in &by_crispr {
        let Some(&gene) = ds.crispr_genes.get(pid) else {
            continue;
        };
        if rows.len() < min_replicates || !target_of.values().any(|&t| t == gene) {
            continue;
        }
        let curve = discovery_curve(&profile(rows), &molecules, &target_of, gene, metric)?;
        out.push(DiscoveryOutcome {
            crispr_id: *pid,
            gene,
            n_replicates: rows.len(),
            auc: discovery_auc(&curve)?,
            curve,
        });
    }
    Ok(out)
}
