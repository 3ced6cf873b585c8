//! Tables computed from run records. Every row carries a provenance id that
//! is either a record fingerprint or a derived id listing its source records.

use std::collections::BTreeMap;

use pheno_core::eval::{paired_t_test, welch_t_test};
use pheno_core::scaling::{fit_frontier, frontier, FrontierPoint, FrontierSpec, ScalingFit, XAxis};
use pheno_core::train::Task;
use pheno_core::zoo::{RunRecord, RunStatus, Supervision};
use serde::Serialize;

use crate::table::{num, opt, Table};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Derived {
    pub method: String,
    pub sources: Vec<String>,
}

pub type DerivedMap = BTreeMap<String, Derived>;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn lower_is_better(task: Task) -> bool {
    task == Task::Molecule
}

fn groups(records: &[RunRecord]) -> BTreeMap<(Supervision, Task), Vec<&RunRecord>> {
    let mut out: BTreeMap<(Supervision, Task), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        out.entry((r.config.supervision, r.config.task)).or_default().push(r);
    }
    out
}

/// Best, median and chance per supervision regime and task.
pub fn regime_table(records: &[RunRecord], derived: &mut DerivedMap) -> Table {
    let mut t = Table::new(&[
        "supervision",
        "task",
        "metric",
        "done",
        "failed",
        "best",
        "median",
        "chance",
        "provenance",
    ]);
    for ((sup, task), rs) in groups(records) {
        let done: Vec<&&RunRecord> = rs
            .iter()
            .filter(|r| r.status == RunStatus::Done && r.metric().is_some())
            .collect();
        let failed = rs.iter().filter(|r| r.status == RunStatus::Failed).count();
        let metric_name = done
            .iter()
            .find_map(|r| r.metric_name.clone())
            .unwrap_or_else(|| "NA".into());
        let best = done
            .iter()
            .copied()
            .min_by(|a, b| {
                let (x, y) = (a.metric().unwrap(), b.metric().unwrap());
                if lower_is_better(task) {
                    x.total_cmp(&y)
                } else {
                    y.total_cmp(&x)
                }
            })
            .map(|r| {
                (
                    r.metric().unwrap(),
                    r.metrics.get("chance").copied(),
                    r.fingerprint.clone(),
                )
            });
        let med = median(done.iter().map(|r| r.metric().unwrap()).collect());
        let id = format!("regime/{}/{}", sup.as_str(), task.as_str());
        derived.insert(
            id.clone(),
            Derived {
                method: "best and median over done runs".into(),
                sources: rs.iter().map(|r| r.fingerprint.clone()).collect(),
            },
        );
        t.push(vec![
            sup.as_str().into(),
            task.as_str().into(),
            metric_name,
            done.len().to_string(),
            failed.to_string(),
            opt(best.as_ref().map(|b| b.0)),
            num(med),
            opt(best.as_ref().and_then(|b| b.1)),
            best.map_or(id.clone(), |b| b.2),
        ]);
    }
    t
}

/// Welch t-test of IBP against task supervision per task.
pub fn regime_ttests(records: &[RunRecord], derived: &mut DerivedMap) -> Table {
    let mut t = Table::new(&[
        "task",
        "n_ibp",
        "n_task",
        "mean_ibp",
        "mean_task",
        "t",
        "df",
        "p",
        "provenance",
    ]);
    let g = groups(records);
    for task in Task::ALL {
        let pick = |sup| -> Vec<&RunRecord> {
            g.get(&(sup, task))
                .map(|rs| {
                    rs.iter()
                        .copied()
                        .filter(|r| r.status == RunStatus::Done && r.metric().is_some())
                        .collect()
                })
                .unwrap_or_default()
        };
        let (a, b) = (pick(Supervision::Ibp), pick(Supervision::Task));
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let va: Vec<f64> = a.iter().map(|r| r.metric().unwrap()).collect();
        let vb: Vec<f64> = b.iter().map(|r| r.metric().unwrap()).collect();
        let test = welch_t_test(&va, &vb).ok();
        let id = format!("ttest/{}", task.as_str());
        derived.insert(
            id.clone(),
            Derived {
                method: "welch t-test, ibp minus task".into(),
                sources: a.iter().chain(&b).map(|r| r.fingerprint.clone()).collect(),
            },
        );
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        t.push(vec![
            task.as_str().into(),
            va.len().to_string(),
            vb.len().to_string(),
            num(mean(&va)),
            num(mean(&vb)),
            opt(test.map(|x| x.t)),
            opt(test.map(|x| x.df)),
            opt(test.map(|x| x.p_two_sided)),
            id,
        ]);
    }
    t
}

/// Per-perturbation discovery AUCs of one record with the raw-feature baseline.
pub fn discovery_pairs(r: &RunRecord) -> Vec<(String, f64, f64)> {
    r.metrics
        .iter()
        .filter_map(|(k, v)| {
            let id = k.strip_prefix("auc/")?;
            let base = r.metrics.get(&format!("baseline_auc/{id}"))?;
            Some((id.to_string(), *v, *base))
        })
        .collect()
}

/// Paired comparison of representation against raw features for each done
/// discovery run.
pub fn discovery_table(records: &[RunRecord]) -> Table {
    let mut t = Table::new(&[
        "run",
        "perturbations",
        "mean_auc",
        "mean_baseline",
        "wins",
        "t",
        "p",
        "provenance",
    ]);
    for r in records
        .iter()
        .filter(|r| r.status == RunStatus::Done && r.config.task == Task::Discovery)
    {
        let pairs = discovery_pairs(r);
        let a: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.2).collect();
        let test = paired_t_test(&a, &b).ok();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        t.push(vec![
            r.fingerprint[..12].to_string(),
            pairs.len().to_string(),
            num(mean(&a)),
            num(mean(&b)),
            pairs.iter().filter(|p| p.1 > p.2).count().to_string(),
            opt(test.map(|x| x.t)),
            opt(test.map(|x| x.p_two_sided)),
            r.fingerprint.clone(),
        ]);
    }
    t
}

#[derive(Debug, Clone)]
pub struct ScalingResult {
    pub supervision: Supervision,
    pub task: Task,
    pub points: Vec<FrontierPoint>,
    pub fit: Option<ScalingFit>,
    pub id: String,
}

/// Frontier and fit for every supervision/task pair present in the records.
pub fn scaling_results(
    records: &[RunRecord],
    x_axis: XAxis,
    median_over_seeds: bool,
    truncate: bool,
) -> Vec<ScalingResult> {
    groups(records)
        .into_keys()
        .map(|(supervision, task)| {
            let spec = FrontierSpec {
                supervision,
                task,
                x_axis,
                median_over_seeds,
                truncate_overfit: truncate,
            };
            let points = frontier(records, &spec);
            let id = format!("fit/{}/{}", supervision.as_str(), task.as_str());
            let fit = fit_frontier(&points, task, x_axis, &id).ok();
            ScalingResult {
                supervision,
                task,
                points,
                fit,
                id,
            }
        })
        .collect()
}

pub fn frontier_id(sup: Supervision, task: Task, x: f64) -> String {
    format!("frontier/{}/{}/{x}", sup.as_str(), task.as_str())
}

fn sources(points: &[FrontierPoint]) -> Vec<String> {
    let mut s: Vec<String> = points
        .iter()
        .flat_map(|p| p.provenance.iter().flat_map(|id| id.split('+').map(String::from)))
        .collect();
    s.sort();
    s.dedup();
    s
}

pub fn frontier_table(results: &[ScalingResult], derived: &mut DerivedMap) -> Table {
    let mut t = Table::new(&["supervision", "task", "x", "best", "provenance"]);
    for r in results {
        for p in &r.points {
            let id = frontier_id(r.supervision, r.task, p.x);
            derived.insert(
                id.clone(),
                Derived {
                    method: "frontier point".into(),
                    sources: sources(std::slice::from_ref(p)),
                },
            );
            t.push(vec![
                r.supervision.as_str().into(),
                r.task.as_str().into(),
                num(p.x),
                num(p.best),
                id,
            ]);
        }
    }
    t
}

pub fn fit_table(
    results: &[ScalingFit],
    derived: &mut DerivedMap,
    by_id: &BTreeMap<String, Vec<FrontierPoint>>,
) -> Table {
    let mut t = Table::new(&[
        "group",
        "slope",
        "intercept",
        "r_squared",
        "points",
        "x_unit",
        "y_unit",
        "provenance",
    ]);
    for f in results {
        derived.insert(
            f.group.clone(),
            Derived {
                method: "least squares over frontier".into(),
                sources: by_id.get(&f.group).map(|p| sources(p)).unwrap_or_default(),
            },
        );
        t.push(vec![
            f.group.clone(),
            format!("{:.6e}", f.slope),
            num(f.intercept),
            num(f.r_squared),
            f.n_points.to_string(),
            f.x_unit.clone(),
            f.y_unit.clone(),
            f.group.clone(),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use pheno_core::train::AdversarialWeights;
    use pheno_core::zoo::{RunConfig, STORE_SCHEMA};

    fn rec(sup: Supervision, task: Task, seed: u64, ood: usize, metric: f64) -> RunRecord {
        let config = RunConfig {
            supervision: sup,
            task,
            depth: 1,
            width: 8,
            ood_count: ood,
            replicate_fraction: 1.0,
            adversarial: AdversarialWeights::default(),
            seed,
        };
        let mut metrics = BTreeMap::from([
            ("metric".to_string(), metric),
            ("chance".to_string(), 0.1),
            ("ood_wells".to_string(), ood as f64 * 5.0),
        ]);
        if task == Task::Discovery {
            metrics.insert("auc/0".into(), 0.8);
            metrics.insert("baseline_auc/0".into(), 0.6);
            metrics.insert("auc/1".into(), 0.7);
            metrics.insert("baseline_auc/1".into(), 0.65);
        }
        RunRecord {
            schema: STORE_SCHEMA,
            fingerprint: config.fingerprint(),
            config,
            run_seed: seed,
            status: RunStatus::Done,
            cause: None,
            metrics,
            metric_name: Some("top10".into()),
            best_epoch: Some(1),
            epochs: Some(1),
            warnings: vec![],
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn regime_best_respects_task_direction() {
        let rs = vec![
            rec(Supervision::Ibp, Task::Moa, 0, 0, 0.4),
            rec(Supervision::Ibp, Task::Moa, 1, 0, 0.6),
            rec(Supervision::Ibp, Task::Molecule, 0, 0, 3.0),
            rec(Supervision::Ibp, Task::Molecule, 1, 0, 2.0),
        ];
        let mut d = DerivedMap::new();
        let t = regime_table(&rs, &mut d);
        assert_eq!(t.rows[0][5], "0.6000");
        assert_eq!(t.rows[0][8], rs[1].fingerprint);
        assert_eq!(t.rows[1][5], "2.0000");
        assert_eq!(t.rows[1][6], "2.5000");
    }

    #[test]
    fn ttest_and_discovery_rows() {
        let rs = vec![
            rec(Supervision::Ibp, Task::Moa, 0, 0, 0.5),
            rec(Supervision::Ibp, Task::Moa, 1, 0, 0.7),
            rec(Supervision::Task, Task::Moa, 0, 0, 0.3),
            rec(Supervision::Task, Task::Moa, 1, 0, 0.5),
            rec(Supervision::Ibp, Task::Discovery, 0, 0, 0.75),
        ];
        let mut d = DerivedMap::new();
        let t = regime_ttests(&rs, &mut d);
        assert_eq!(t.rows.len(), 1);
        // means 0.6 and 0.4, both variances 0.02: t = 0.2 / sqrt(0.02)
        let tv: f64 = t.rows[0][5].parse().unwrap();
        assert!((tv - 0.2 / 0.02f64.sqrt()).abs() < 1e-4);
        assert_eq!(d["ttest/moa"].sources.len(), 4);
        let disc = discovery_table(&rs);
        assert_eq!(disc.rows[0][1], "2");
        assert_eq!(disc.rows[0][4], "2");
    }

    #[test]
    fn scaling_results_fit_each_group() {
        let rs: Vec<RunRecord> = [0, 10, 20]
            .iter()
            .flat_map(|&o| [rec(Supervision::Ibp, Task::Moa, 0, o, 0.5 + o as f64 / 100.0)])
            .collect();
        let res = scaling_results(&rs, XAxis::OodCount, true, true);
        assert_eq!(res.len(), 1);
        let fit = res[0].fit.as_ref().unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-9);
        assert_eq!(fit.x_unit, "molecules");
    }
}
