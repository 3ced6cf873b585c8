//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use pheno_core::arena::*;
use pheno_core::eval::*;
use pheno_core::linalg::Matrix;
use pheno_core::nn::{grad_check, AdamW, AdamWConfig, BackboneConfig, NamedGrads};
use pheno_core::prep::*;
use pheno_core::scaling::*;
use pheno_core::train::*;
use pheno_core::zoo::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradient_exactness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failing = Vec::new();
    for depth in [1, 3] {
        for width in [8, 16] {
            let cfg = BackboneConfig {
                depth,
                width,
                d_in: 5,
                seed: 17,
            };
            let report = grad_check(&cfg, 8, 1e-4);
            worst = worst.max(report.max_rel_err);
            if !report.passed {
                failing.push(format!("({depth},{width}): {:?}", report.failing_layers()));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failing.is_empty() && worst < 1e-4 && secs < 60.0,
        format!("max rel err {worst:.2e} over 4 shapes in {secs:.1}s; failing {failing:?}"),
    )
}

fn synthetic_plates(n_plates: usize, per_plate: usize, d: usize) -> Vec<WellRecord> {
    let mut r = pheno_core::rng::stream(3, "acceptance/plates");
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut wells = Vec::new();
    for plate in 0..n_plates {
        let shift: Vec<f64> = (0..d).map(|_| 3.0 * normal.sample(&mut r)).collect();
        let scale: Vec<f64> = (0..d).map(|_| r.random_range(0.5..4.0)).collect();
        for i in 0..per_plate {
            let features = (0..d)
                .map(|j| shift[j] + scale[j] * normal.sample(&mut r).exp())
                .collect();
            wells.push(WellRecord {
                well_id: wells.len(),
                features,
                plate,
                batch: plate / 5,
                source: 0,
                row: i / 24,
                col: i % 24,
                pert_type: PertType::Compound,
                pert_id: i,
                replicate_index: 0,
            });
        }
    }
    wells
}

fn preprocessing_invariants() -> Outcome {
    let d = 6;
    let wells = synthetic_plates(20, 50, d);
    let normed = match normalize_plate(&wells, 1e-300) {
        Ok(w) => w,
        Err(e) => return outcome(false, e.to_string()),
    };
    let (mut max_median, mut max_iqr_err): (f64, f64) = (0.0, 0.0);
    for plate in 0..20 {
        for j in 0..d {
            let mut col: Vec<f64> = normed
                .iter()
                .filter(|w| w.plate == plate)
                .map(|w| w.features[j])
                .collect();
            col.sort_by(f64::total_cmp);
            max_median = max_median.max(quantile_sorted(&col, 0.5).abs());
            let iqr = quantile_sorted(&col, 0.75) - quantile_sorted(&col, 0.25);
            max_iqr_err = max_iqr_err.max((iqr - 1.0).abs());
        }
    }
    let whitener = match fit_whitener(&normed, d, 0.0) {
        Ok(w) => w,
        Err(e) => return outcome(false, e.to_string()),
    };
    let white = apply_whitener(&whitener, &normed).expect("whitening applies");
    let rows: Vec<&[f64]> = white.iter().map(|w| w.features.as_slice()).collect();
    let cov_err = Matrix::from_rows(&rows).covariance().max_abs_diff(&Matrix::identity(d));
    outcome(
        max_median < 1e-9 && max_iqr_err <= 1e-9 && cov_err < 1e-6,
        format!("max |median| {max_median:.1e}, max |IQR-1| {max_iqr_err:.1e}, max |cov-I| {cov_err:.1e}"),
    )
}

fn chance_anchors() -> Outcome {
    let k = 2919;
    let logits = Matrix::zeros(4, k);
    let cce = molecule_cce(&logits, &[0, 5, 100, 2918]).expect("valid logits");

    let (n, classes, top) = (100_000, 20, 5);
    let mut r = pheno_core::rng::stream(5, "acceptance/topk");
    let normal = Normal::new(0.0, 1.0).unwrap();
    let data: Vec<f64> = (0..n * classes).map(|_| normal.sample(&mut r)).collect();
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
    let acc = topk_accuracy(&Matrix::from_vec(n, classes, data), &labels, top).expect("valid logits");
    let p = top as f64 / classes as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let z = (acc - p) / sigma;
    outcome(
        (7.97..=7.99).contains(&cce) && z.abs() <= 3.0,
        format!(
            "uniform CCE over {k} molecules {cce:.4}; top-{top} of {classes} accuracy {acc:.4} vs {p:.4} (z = {z:.2})"
        ),
    )
}

fn adamw_single_step() -> Outcome {
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.01,
    });
    let mut theta = [1.0];
    let grads = NamedGrads(vec![("theta".to_string(), vec![1.0])]);
    if let Err(e) = opt.step(vec![("theta".to_string(), &mut theta[..])], &grads) {
        return outcome(false, e.to_string());
    }
    let closed = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.1 * 0.01 * 1.0;
    outcome(
        (theta[0] - closed).abs() <= 1e-12 && format!("{:.6}", theta[0]) == "0.899000",
        format!("theta' = {:.12} (closed form {closed:.12})", theta[0]),
    )
}

fn ibp_moa(
    cfg: &UniverseConfig,
    plan: &SplitPlan,
    bcfg: (usize, usize),
    tcfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<(f64, f64)>, String> {
    let mut out = Vec::new();
    for &seed in seeds {
        let u = generate_universe(cfg, seed).map_err(|e| e.to_string())?;
        let ds = assemble_dataset(&u, plan, seed).map_err(|e| e.to_string())?;
        let (ds, _) = preprocess(&ds, &PrepOptions::default()).map_err(|e| e.to_string())?;
        let b = BackboneConfig {
            depth: bcfg.0,
            width: bcfg.1,
            d_in: ds.d_feat(),
            seed,
        };
        let t = TrainConfig { seed, ..tcfg.clone() };
        let model = train_ibp(&b, &t, &ds).map_err(|e| e.to_string())?;
        let probe = fit_probe(&model, Task::Moa, &ds, &t).map_err(|e| e.to_string())?;
        out.push((probe.score.metric, probe.score.chance));
    }
    Ok(out)
}

fn desk_train() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 64,
        ..Default::default()
    }
}

fn ibp_beats_chance_literal() -> Outcome {
    let start = Instant::now();
    let cfg = UniverseConfig {
        n_compounds: 100,
        n_moas: 20,
        n_targets: 10,
        ..Default::default()
    };
    let plan = SplitPlan {
        replicates: 5,
        ..Default::default()
    };
    match ibp_moa(&cfg, &plan, (2, 64), &desk_train(), &[0, 1, 2]) {
        Ok(res) => {
            let pass = res.iter().all(|(m, c)| *m >= 3.0 * c) && start.elapsed().as_secs() < 600;
            outcome(pass, format!("(accuracy, chance) per seed {res:.3?}"))
        }
        Err(e) => outcome(false, format!("20 MoAs over 10 targets: {e}")),
    }
}

fn ibp_beats_chance_wide() -> Outcome {
    let start = Instant::now();
    let cfg = UniverseConfig {
        n_compounds: 300,
        n_moas: 100,
        n_targets: 100,
        ..Default::default()
    };
    let plan = SplitPlan {
        n_arena: 100,
        replicates: 5,
        ..Default::default()
    };
    match ibp_moa(&cfg, &plan, (2, 64), &desk_train(), &[0, 1, 2]) {
        Ok(res) => {
            let secs = start.elapsed().as_secs_f64();
            let pass = res.iter().all(|(m, c)| *m >= 3.0 * c) && secs < 600.0;
            outcome(
                pass,
                format!("100 MoAs, 300 compounds: (accuracy, chance) per seed {res:.3?} in {secs:.0}s"),
            )
        }
        Err(e) => outcome(false, e),
    }
}

fn scaling_trend() -> Outcome {
    let cfg = UniverseConfig {
        n_targets: 50,
        n_moas: 50,
        n_compounds: 300,
        noise_sd: 2.0,
        offset_scale: 0.6,
        effect_scale: 0.6,
        ..Default::default()
    };
    let plan = SplitPlan {
        n_arena: 50,
        ..Default::default()
    };
    let fractions = [0.0, 0.25, 0.5, 1.0];
    let mut ibp: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut task: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for seed in 0..3u64 {
        let u = generate_universe(&cfg, seed).expect("valid universe");
        let ds = assemble_dataset(&u, &plan, seed).expect("valid plan");
        let (ds, _) = preprocess(&ds, &PrepOptions::default()).expect("preprocess");
        let pool = ds.ood_pool.len();
        for (i, f) in fractions.iter().enumerate() {
            let n = (f * pool as f64).round() as usize;
            let view = subsample_view(&ds, n, 1.0, seed).expect("view");
            let b = BackboneConfig {
                depth: 2,
                width: 64,
                d_in: ds.d_feat(),
                seed,
            };
            let t = TrainConfig { seed, ..desk_train() };
            let model = train_ibp(&b, &t, &view).expect("ibp trains");
            ibp.entry(i)
                .or_default()
                .push(fit_probe(&model, Task::Moa, &view, &t).expect("probe").score.metric);
            let sup = train_task_supervised(&b, &t, &view, Task::Moa).expect("task model trains");
            let s = evaluate_task(
                &sup.backbone,
                &sup.heads["moa"],
                &sup.classes["moa"],
                Task::Moa,
                &view,
                10,
            )
            .expect("scores");
            task.entry(i).or_default().push(s.metric);
        }
    }
    let med = |m: &BTreeMap<usize, Vec<f64>>| -> Vec<f64> {
        m.values()
            .map(|v| {
                let mut v = v.clone();
                v.sort_by(f64::total_cmp);
                v[v.len() / 2]
            })
            .collect()
    };
    let (ibp_med, task_med) = (med(&ibp), med(&task));
    let xs: Vec<f64> = fractions.to_vec();
    let points: Vec<(f64, f64, String)> = xs.iter().zip(&ibp_med).map(|(x, y)| (*x, *y, format!("{x}"))).collect();
    let front = frontier_points(&points, Objective::Maximize, false);
    let ys: Vec<f64> = front.iter().map(|p| p.best).collect();
    let nondecreasing = ys.windows(2).all(|w| w[1] >= w[0]);
    let rho = spearman(&xs, &ys).unwrap_or(f64::NAN);
    let rho_task = spearman(&xs, &task_med).unwrap_or(f64::NAN);
    outcome(
        front.len() == 4 && nondecreasing && rho >= 0.8,
        format!("IBP medians {ibp_med:.3?} (rho {rho:.2}); task-supervised medians {task_med:.3?} (rho {rho_task:.2}, reported only)"),
    )
}

fn scaling_fit_exactness() -> Outcome {
    let mut worst: f64 = 0.0;
    for (slope, intercept) in [(2.5, -1.0), (1.0 / 56000.0, 52.62), (-3.0, 7.0)] {
        let pts: Vec<(f64, f64)> = (0..8)
            .map(|i| i as f64 * 1000.0)
            .map(|x| (x, slope * x + intercept))
            .collect();
        match fit_linear(&pts) {
            Ok(f) => worst = worst.max((f.slope - slope).abs()).max((f.intercept - intercept).abs()),
            Err(e) => return outcome(false, e.to_string()),
        }
    }
    let fit = ScalingFit {
        slope: 1.0 / 56000.0,
        intercept: 0.0,
        r_squared: 1.0,
        n_points: 2,
        x_unit: "molecules".into(),
        y_unit: "percent".into(),
        group: "reference".into(),
    };
    let ex = match extrapolate(&fit, 52.62, 100.0, DEFAULT_REPLICATES) {
        Ok(e) => e,
        Err(e) => return outcome(false, e.to_string()),
    };
    let pass =
        worst <= 1e-12 && (ex.molecules - 2_653_280.0).abs() < 1e-3 && (ex.wells - 5.0 * 2_653_280.0).abs() < 5e-3;
    outcome(
        pass,
        format!(
            "max coefficient error {worst:.1e}; {:.1} molecules, {:.1} wells",
            ex.molecules, ex.wells
        ),
    )
}

fn discovery_metric() -> Outcome {
    let m = 500;
    let gene = 3;
    let target_of: BTreeMap<usize, usize> = (0..m).map(|i| (i, if i < 5 { gene } else { 10 + i % 7 })).collect();
    let crispr = vec![1.0, 0.0, 0.0];
    let perfect: Vec<(usize, Vec<f64>)> = (0..m)
        .map(|i| {
            (
                i,
                if i < 5 {
                    vec![1.0, 0.0, 0.0]
                } else {
                    vec![0.0, 1.0, (i as f64).sin()]
                },
            )
        })
        .collect();
    let auc_perfect =
        discovery_auc(&discovery_curve(&crispr, &perfect, &target_of, gene, Metric::Cosine).unwrap()).unwrap();

    let mut r = pheno_core::rng::stream(9, "acceptance/random-ranking");
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut total = 0.0;
    for _ in 0..1000 {
        let mols: Vec<(usize, Vec<f64>)> = (0..m)
            .map(|i| (i, (0..3).map(|_| normal.sample(&mut r)).collect()))
            .collect();
        total += discovery_auc(&discovery_curve(&crispr, &mols, &target_of, gene, Metric::Cosine).unwrap()).unwrap();
    }
    let auc_random = total / 1000.0;

    let cfg = UniverseConfig {
        n_targets: 20,
        n_moas: 20,
        n_compounds: 400,
        d_feat: 32,
        noise_sd: 2.0,
        offset_scale: 0.6,
        effect_scale: 0.6,
        ..Default::default()
    };
    let plan = SplitPlan {
        n_arena: 160,
        ..Default::default()
    };
    let u = generate_universe(&cfg, 0).expect("valid universe");
    let ds = assemble_dataset(&u, &plan, 0).expect("valid plan");
    let (ds, _) = preprocess(&ds, &PrepOptions::default()).expect("preprocess");
    let b = BackboneConfig {
        depth: 1,
        width: 128,
        d_in: ds.d_feat(),
        seed: 0,
    };
    let model = train_ibp(
        &b,
        &TrainConfig {
            weight_decay: 0.01,
            ..desk_train()
        },
        &ds,
    )
    .expect("ibp trains");
    let all: Vec<&WellRecord> = ds.wells.iter().collect();
    let ibp = discovery_challenge(
        &ds,
        &model.embed(&all).unwrap(),
        DISCOVERY_MIN_REPLICATES,
        Metric::Cosine,
    )
    .unwrap();
    let raw = discovery_challenge(&ds, &features_of(&all), DISCOVERY_MIN_REPLICATES, Metric::Cosine).unwrap();
    let wins = ibp.iter().zip(&raw).filter(|(a, b)| a.auc > b.auc).count();
    let paired = paired_t_test(
        &ibp.iter().map(|o| o.auc).collect::<Vec<_>>(),
        &raw.iter().map(|o| o.auc).collect::<Vec<_>>(),
    )
    .ok();
    outcome(
        auc_perfect >= 0.98 && (0.45..=0.55).contains(&auc_random) && ibp.len() == 12 && wins >= 9,
        format!(
            "perfect AUC {auc_perfect:.4}; random mean AUC {auc_random:.4}; IBP beats raw on {wins} of {} (paired t {:.2}, p {:.4})",
            ibp.len(),
            paired.map_or(f64::NAN, |t| t.t),
            paired.map_or(f64::NAN, |t| t.p_two_sided),
        ),
    )
}

fn adversarial_nuisance() -> Outcome {
    let cfg = UniverseConfig {
        nuisance: NuisanceScales {
            plate_sd: 2.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let u = generate_universe(&cfg, 0).expect("valid universe");
    let ds = assemble_dataset(&u, &SplitPlan::default(), 0).expect("valid plan");
    let (ds, _) = preprocess(
        &ds,
        &PrepOptions {
            normalize_plates: false,
            ..Default::default()
        },
    )
    .expect("preprocess");
    let b = BackboneConfig {
        depth: 2,
        width: 64,
        d_in: ds.d_feat(),
        seed: 0,
    };
    let base = TrainConfig {
        adversary_steps: 5,
        ..desk_train()
    };
    let measure = |lambda: f64| {
        let t = TrainConfig {
            adversarial: AdversarialWeights {
                plate: lambda,
                ..Default::default()
            },
            ..base.clone()
        };
        let model = train_ibp(&b, &t, &ds).expect("ibp trains");
        let (plate_acc, plate_chance) = nuisance_probe(&model, Nuisance::Plate, &ds, &base).expect("plate probe");
        let molecule = fit_probe(&model, Task::Molecule, &ds, &base)
            .expect("molecule probe")
            .score
            .top1;
        (plate_acc, plate_chance, molecule)
    };
    let (p0, chance, m0) = measure(0.0);
    let (p1, _, m1) = measure(1.0);
    outcome(
        p1 < 2.0 * chance && m1 >= 0.9 * m0,
        format!(
            "plate probe {p0:.3} -> {p1:.3} (chance {chance:.3}, bound {:.3}); molecule top-1 {m0:.3} -> {m1:.3}",
            2.0 * chance
        ),
    )
}

fn determinism_and_resume() -> Outcome {
    let cfg = UniverseConfig {
        n_compounds: 60,
        ..Default::default()
    };
    let plan = SplitPlan {
        n_arena: 30,
        ..Default::default()
    };
    let u = generate_universe(&cfg, 1).expect("valid universe");
    let ds = assemble_dataset(&u, &plan, 1).expect("valid plan");
    let (ds, _) = preprocess(&ds, &PrepOptions::default()).expect("preprocess");
    let pool = ds.ood_pool.len();
    let axes = GridAxes {
        supervision: vec![Supervision::Ibp],
        tasks: vec![Task::Moa],
        depths: vec![1, 2],
        widths: vec![8, 16],
        ood_counts: vec![0, pool],
        replicate_fractions: vec![1.0],
        seeds: vec![0, 1],
        adversarial: AdversarialWeights::default(),
        exclude: vec![],
    };
    let grid = build_grid(&axes);
    let tcfg = TrainConfig {
        max_epochs: 20,
        ..desk_train()
    };
    let dir = tempfile::tempdir().expect("tempdir");
    let run = |name: &str, parallelism: usize, stop_after: Option<usize>| {
        let opts = ZooOptions {
            parallelism,
            store: dir.path().join(name),
            reset: false,
            global_seed: 42,
            stop_after,
        };
        run_zoo(&grid, &ds, &tcfg, &opts).expect("zoo runs")
    };
    let canonical = |recs: &[RunRecord]| -> BTreeMap<String, String> {
        recs.iter()
            .map(|r| {
                (
                    r.fingerprint.clone(),
                    serde_json::to_string(&r.without_timing()).unwrap(),
                )
            })
            .collect()
    };
    let serial = run("serial.jsonl", 1, None);
    let parallel = run("parallel.jsonl", 4, None);
    let identical = canonical(&serial.executed) == canonical(&parallel.executed);

    let first = run("resume.jsonl", 4, Some(7));
    let second = run("resume.jsonl", 4, None);
    let mut seen: BTreeSet<String> = first.executed.iter().map(|r| r.fingerprint.clone()).collect();
    let overlap = second.executed.iter().any(|r| !seen.insert(r.fingerprint.clone()));
    let stored = read_store(&dir.path().join("resume.jsonl")).expect("store reads");
    let pass = grid.len() == 16
        && serial.executed.len() == 16
        && identical
        && first.executed.len() == 7
        && second.executed.len() == 9
        && second.skipped == 7
        && !overlap
        && stored.len() == 16
        && seen.len() == 16;
    outcome(
        pass,
        format!(
            "{} runs; serial == parallel: {identical}; resume executed {} then {} (skipped {}), store holds {}",
            grid.len(),
            first.executed.len(),
            second.executed.len(),
            second.skipped,
            stored.len()
        ),
    )
}

fn main() {
    let criteria: Vec<(&str, &str, fn() -> Outcome)> = vec![
        ("1", "gradient exactness", gradient_exactness),
        ("2", "preprocessing invariants", preprocessing_invariants),
        ("3", "chance anchors", chance_anchors),
        ("4", "AdamW single step", adamw_single_step),
        (
            "5",
            "IBP beats chance, 20 MoAs over 10 targets",
            ibp_beats_chance_literal,
        ),
        ("5b", "IBP beats chance, wide MoA arena", ibp_beats_chance_wide),
        ("6", "scaling trend", scaling_trend),
        ("7", "scaling fit exactness", scaling_fit_exactness),
        ("8", "discovery metric", discovery_metric),
        ("9", "adversarial nuisance training", adversarial_nuisance),
        ("10", "determinism and resume", determinism_and_resume),
    ];
    let mut failed = Vec::new();
    for (id, name, check) in criteria {
        let start = Instant::now();
        let o = check();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "{status} criterion {id} ({name}): {} [{:.1}s]",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
