//! Report bundle: text tables, SVG plots and a provenance document.

use std::collections::BTreeMap;
use std::path::Path;

use pheno_core::arena::{ArenaDataset, PertType};
use pheno_core::eval::{discovery_challenge, embed_2d, median_profile, Metric};
use pheno_core::linalg::Matrix;
use pheno_core::scaling::{FrontierPoint, XAxis};
use pheno_core::train::{features_of, Task};
use pheno_core::zoo::{RunRecord, RunStatus, DISCOVERY_MIN_REPLICATES};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::{self, DerivedMap};
use crate::error::{io_error, CliError};
use crate::svg::{Plot, Series, Style};
use crate::table::Table;

#[derive(Debug, Serialize)]
struct RecordRef<'a> {
    config: &'a pheno_core::zoo::RunConfig,
    run_seed: u64,
    status: RunStatus,
}

#[derive(Debug, Serialize)]
struct StoreRef {
    path: String,
    sha256: String,
    records: usize,
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    version: &'static str,
    store: StoreRef,
    dataset: Option<String>,
    records: BTreeMap<&'a str, RecordRef<'a>>,
    derived: DerivedMap,
    tables: BTreeMap<String, Vec<String>>,
}

pub struct Bundle {
    pub tables: Vec<(String, Table)>,
    pub plots: Vec<(String, Plot)>,
    pub warnings: Vec<String>,
}

fn provenance_column(t: &Table) -> Vec<String> {
    let i = t
        .headers
        .iter()
        .position(|h| h == "provenance")
        .expect("provenance column");
    t.rows.iter().map(|r| r[i].clone()).collect()
}

fn scaling_plot(task: Task, results: &[analysis::ScalingResult]) -> Option<Plot> {
    let mine: Vec<&analysis::ScalingResult> = results
        .iter()
        .filter(|r| r.task == task && !r.points.is_empty())
        .collect();
    if mine.is_empty() {
        return None;
    }
    let scale = if matches!(task, Task::Moa | Task::Target) {
        100.0
    } else {
        1.0
    };
    let mut series = Vec::new();
    for r in &mine {
        series.push(Series {
            name: format!("{} frontier", r.supervision.as_str()),
            points: r.points.iter().map(|p| (p.x, p.best * scale)).collect(),
            style: Style::Line,
        });
        if let Some(f) = &r.fit {
            let (lo, hi) = r
                .points
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.x), b.max(p.x)));
            series.push(Series {
                name: format!("{} fit", r.supervision.as_str()),
                points: vec![(lo, f.slope * lo + f.intercept), (hi, f.slope * hi + f.intercept)],
                style: Style::Dashed,
            });
        }
    }
    let y_label = match task {
        Task::Moa | Task::Target => "top-k accuracy (%)",
        Task::Molecule => "cross entropy (nats)",
        Task::Discovery => "mean discovery AUC",
    };
    Some(Plot {
        title: format!("{} scaling", task.as_str()),
        x_label: "OOD training wells".into(),
        y_label: y_label.into(),
        series,
    })
}

fn discovery_auc_plot(records: &[RunRecord]) -> Option<(Plot, String)> {
    let best = records
        .iter()
        .filter(|r| r.status == RunStatus::Done && r.config.task == Task::Discovery)
        .filter_map(|r| r.metric().map(|m| (m, r)))
        .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.fingerprint.cmp(&a.1.fingerprint)))?
        .1;
    let pairs = analysis::discovery_pairs(best);
    if pairs.is_empty() {
        return None;
    }
    let plot = Plot {
        title: "discovery AUC per CRISPR perturbation".into(),
        x_label: "raw feature AUC".into(),
        y_label: "representation AUC".into(),
        series: vec![
            Series {
                name: "perturbations".into(),
                points: pairs.iter().map(|p| (p.2, p.1)).collect(),
                style: Style::Markers,
            },
            Series {
                name: "parity".into(),
                points: vec![(0.0, 0.0), (1.0, 1.0)],
                style: Style::Dashed,
            },
        ],
    };
    Some((plot, best.fingerprint.clone()))
}

/// 2-D projection of compound median profiles, one series per MoA.
fn embedding_plot(ds: &ArenaDataset) -> Result<Option<Plot>, CliError> {
    let mut by_compound: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for w in ds.wells.iter().filter(|w| w.pert_type == PertType::Compound) {
        by_compound.entry(w.pert_id).or_default().push(&w.features);
    }
    if by_compound.len() < 3 {
        return Ok(None);
    }
    let ids: Vec<usize> = by_compound.keys().copied().collect();
    let rows: Vec<Vec<f64>> = by_compound.values().map(|v| median_profile(v)).collect();
    let emb = embed_2d(&Matrix::from_rows(&rows))?;
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let moas: Vec<usize> = {
        let mut m: Vec<usize> = ds.label_maps.values().map(|l| l.moa_id).collect();
        m.sort();
        m.dedup();
        m
    };
    let shown: Vec<usize> = moas.into_iter().take(7).collect();
    for (i, id) in ids.iter().enumerate() {
        let key = match ds.label_maps.get(id).map(|l| l.moa_id) {
            Some(m) if shown.contains(&m) => format!("MoA {m:03}"),
            _ => "other".to_string(),
        };
        groups
            .entry(key)
            .or_default()
            .push((emb.coords[(i, 0)], emb.coords[(i, 1)]));
    }
    Ok(Some(Plot {
        title: "compound profiles, 2-D PCA".into(),
        x_label: format!("PC1 ({:.1}%)", 100.0 * emb.explained_variance_ratio[0]),
        y_label: format!("PC2 ({:.1}%)", 100.0 * emb.explained_variance_ratio[1]),
        series: groups
            .into_iter()
            .map(|(name, points)| Series {
                name,
                points,
                style: Style::Markers,
            })
            .collect(),
    }))
}

/// Discovery curves on the dataset's own features.
fn discovery_curve_plot(ds: &ArenaDataset) -> Result<Option<Plot>, CliError> {
    let all: Vec<_> = ds.wells.iter().collect();
    let outcomes = match discovery_challenge(ds, &features_of(&all), DISCOVERY_MIN_REPLICATES, Metric::Cosine) {
        Ok(o) if !o.is_empty() => o,
        _ => return Ok(None),
    };
    let series = outcomes
        .iter()
        .take(8)
        .map(|o| {
            let m = o.curve.cumulative_hits.len() as f64;
            let n = o.curve.n_matches as f64;
            let mut points = vec![(0.0, 0.0)];
            points.extend(
                o.curve
                    .cumulative_hits
                    .iter()
                    .enumerate()
                    .map(|(g, &h)| ((g + 1) as f64 / m, h as f64 / n)),
            );
            Series {
                name: format!("CRISPR {} (AUC {:.2})", o.crispr_id, o.auc),
                points,
                style: Style::Line,
            }
        })
        .collect();
    Ok(Some(Plot {
        title: "discovery curves, preprocessed features".into(),
        x_label: "fraction of molecules guessed".into(),
        y_label: "fraction of matches found".into(),
        series,
    }))
}

pub fn build(records: &[RunRecord], dataset: Option<&ArenaDataset>) -> Result<(Bundle, DerivedMap), CliError> {
    let mut derived = DerivedMap::new();
    let mut warnings = Vec::new();
    if records.is_empty() {
        warnings.push("run store is empty; report has no rows".to_string());
    }
    let failed = records.iter().filter(|r| r.status == RunStatus::Failed).count();
    if failed > 0 {
        warnings.push(format!("{failed} failed runs are excluded from frontiers"));
    }
    let results = analysis::scaling_results(records, XAxis::OodWells, true, true);
    let fits: Vec<_> = results.iter().filter_map(|r| r.fit.clone()).collect();
    let by_id: BTreeMap<String, Vec<FrontierPoint>> =
        results.iter().map(|r| (r.id.clone(), r.points.clone())).collect();

    let mut tables = vec![
        ("bests".to_string(), analysis::regime_table(records, &mut derived)),
        ("ttests".to_string(), analysis::regime_ttests(records, &mut derived)),
        (
            "frontiers".to_string(),
            analysis::frontier_table(&results, &mut derived),
        ),
        ("fits".to_string(), analysis::fit_table(&fits, &mut derived, &by_id)),
        ("discovery".to_string(), analysis::discovery_table(records)),
    ];
    let mut plots = Vec::new();
    for task in Task::ALL {
        if let Some(p) = scaling_plot(task, &results) {
            plots.push((format!("scaling_{}", task.as_str()), p));
        }
    }
    if let Some((p, fp)) = discovery_auc_plot(records) {
        let mut t = Table::new(&["plot", "provenance"]);
        t.push(vec!["discovery_auc".into(), fp]);
        tables.push(("plots".into(), t));
        plots.push(("discovery_auc".into(), p));
    }
    if let Some(ds) = dataset {
        if let Some(p) = embedding_plot(ds)? {
            plots.push(("embedding".into(), p));
        }
        if let Some(p) = discovery_curve_plot(ds)? {
            plots.push(("discovery_curves".into(), p));
        }
    }
    Ok((
        Bundle {
            tables,
            plots,
            warnings,
        },
        derived,
    ))
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    match std::fs::read(path) {
        Ok(bytes) => Ok(hex::encode(Sha256::digest(&bytes))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(hex::encode(Sha256::digest(b""))),
        Err(e) => Err(io_error(path, e)),
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Writes the bundle into `out`. Output bytes depend only on the inputs.
pub fn write_bundle(
    records: &[RunRecord],
    store: &Path,
    dataset: Option<(&ArenaDataset, &Path)>,
    out: &Path,
) -> Result<Vec<String>, CliError> {
    let (bundle, derived) = build(records, dataset.map(|d| d.0))?;
    std::fs::create_dir_all(out.join("tables")).map_err(|e| io_error(out, e))?;
    std::fs::create_dir_all(out.join("plots")).map_err(|e| io_error(out, e))?;

    let mut summary = String::from("pheno report\n\n");
    for w in &bundle.warnings {
        summary += &format!("warning: {w}\n");
    }
    let mut table_ids = BTreeMap::new();
    for (name, t) in &bundle.tables {
        write(&out.join("tables").join(format!("{name}.tsv")), &t.to_tsv())?;
        write(&out.join("tables").join(format!("{name}.txt")), &t.to_text())?;
        summary += &format!("\n## {name}\n\n{}", t.to_text());
        table_ids.insert(name.clone(), provenance_column(t));
    }
    for (name, p) in &bundle.plots {
        write(&out.join("plots").join(format!("{name}.svg")), &p.render())?;
    }
    summary += &format!(
        "\nplots: {}\n",
        bundle
            .plots
            .iter()
            .map(|(n, _)| format!("{n}.svg"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    write(&out.join("report.txt"), &summary)?;

    let prov = Provenance {
        tool: "pheno",
        version: env!("CARGO_PKG_VERSION"),
        store: StoreRef {
            path: store.display().to_string(),
            sha256: sha256_file(store)?,
            records: records.len(),
        },
        dataset: dataset.map(|d| d.1.display().to_string()),
        records: records
            .iter()
            .map(|r| {
                (
                    r.fingerprint.as_str(),
                    RecordRef {
                        config: &r.config,
                        run_seed: r.run_seed,
                        status: r.status,
                    },
                )
            })
            .collect(),
        derived,
        tables: table_ids,
    };
    write(
        &out.join("provenance.json"),
        &(serde_json::to_string_pretty(&prov).expect("provenance serializes") + "\n"),
    )?;
    Ok(bundle.warnings)
}

/// Ids in the bundle's tables that resolve neither to a record nor to a
/// derived entry whose sources are records.
#[cfg(test)]
pub fn unresolved(provenance: &serde_json::Value) -> Vec<String> {
    let records = provenance["records"].as_object().cloned().unwrap_or_default();
    let derived = provenance["derived"].as_object().cloned().unwrap_or_default();
    let mut bad = Vec::new();
    let tables = provenance["tables"].as_object().cloned().unwrap_or_default();
    for ids in tables.values() {
        for id in ids.as_array().into_iter().flatten().filter_map(|v| v.as_str()) {
            let ok = records.contains_key(id)
                || derived.get(id).is_some_and(|d| {
                    d["sources"]
                        .as_array()
                        .is_some_and(|s| s.iter().all(|x| x.as_str().is_some_and(|x| records.contains_key(x))))
                });
            if !ok {
                bad.push(id.to_string());
            }
        }
    }
    bad
}
