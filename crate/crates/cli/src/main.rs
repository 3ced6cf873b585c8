mod analysis;
mod config;
mod error;
mod report;
mod svg;
mod table;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pheno_core::arena::io::{load_dataset, save_dataset};
use pheno_core::arena::{assemble_dataset, generate_universe, ArenaDataset};
use pheno_core::eval::{chance_topk, label_histogram};
use pheno_core::prep::{preprocess, PrepOptions};
use pheno_core::scaling::{extrapolate, replicate_effect, FrontierSpec, XAxis, DEFAULT_REPLICATES};
use pheno_core::train::Task;
use pheno_core::zoo::{build_grid, read_store, run_zoo, RunStatus, Supervision, ZooOptions};

use config::{SynthFile, ZooFile};
use error::{io_error, CliError};
use table::{num, Table};

const STORE_ENV: &str = "PHENO_STORE_DIR";
const STORE_FILE: &str = "runs.jsonl";

#[derive(Parser, Debug)]
#[command(
    name = "pheno",
    version,
    about = "Phenotypic screening workbench: synthetic arenas, model zoos and scaling analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic screening dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Plate-normalize and whiten a dataset.
    Prep {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep this many whitened components.
        #[arg(long)]
        d_out: Option<usize>,
        #[arg(long)]
        no_plate_norm: bool,
    },
    /// Train every configuration of a grid that the store lacks.
    Zoo {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        store: StoreArg,
        #[arg(long, default_value_t = default_parallelism())]
        parallelism: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Move an unreadable store aside and start over.
        #[arg(long)]
        reset: bool,
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Metric tables, chance baselines and regime t-tests.
    Eval {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Frontier, linear fit and data-requirement extrapolation.
    Scale {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long, value_enum, default_value_t = SupervisionArg::Ibp)]
        supervision: SupervisionArg,
        #[arg(long, value_enum, default_value_t = AxisArg::OodWells)]
        x_axis: AxisArg,
        /// Target in fit units (percent for accuracy tasks).
        #[arg(long)]
        target_accuracy: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_REPLICATES)]
        replicates: f64,
        /// Use every seed instead of the per-configuration median.
        #[arg(long)]
        per_seed: bool,
        #[arg(long)]
        no_truncate: bool,
        #[arg(long)]
        json: bool,
    },
    /// Write tables, plots and provenance into a directory.
    Report {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct StoreArg {
    /// Run store file; defaults to runs.jsonl under $PHENO_STORE_DIR.
    #[arg(long)]
    store: Option<PathBuf>,
}

impl StoreArg {
    fn path(&self) -> PathBuf {
        self.store.clone().unwrap_or_else(|| {
            let dir = std::env::var_os(STORE_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("pheno-store"));
            dir.join(STORE_FILE)
        })
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SupervisionArg {
    Ibp,
    Task,
}

impl From<SupervisionArg> for Supervision {
    fn from(s: SupervisionArg) -> Self {
        match s {
            SupervisionArg::Ibp => Supervision::Ibp,
            SupervisionArg::Task => Supervision::Task,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AxisArg {
    OodWells,
    OodCount,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse::<Task>().map_err(|e| e.to_string())
}

fn default_parallelism() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn load_data(dir: &Path) -> Result<ArenaDataset, CliError> {
    Ok(load_dataset(dir)?)
}

fn cmd_synth(config: Option<&Path>, out: &Path, seed: u64) -> Result<(), CliError> {
    let file = match config {
        Some(p) => config::load::<SynthFile>(p, |f| f.version)?,
        None => SynthFile {
            version: config::CONFIG_VERSION,
            ..Default::default()
        },
    };
    let universe = generate_universe(&file.universe, seed)?;
    let ds = assemble_dataset(&universe, &file.plan, seed)?;
    save_dataset(&ds, out)?;
    let u_path = out.join("universe.json");
    std::fs::write(
        &u_path,
        serde_json::to_string_pretty(&universe).expect("universe serializes") + "\n",
    )
    .map_err(|e| io_error(&u_path, e))?;
    println!(
        "wrote {} wells ({} arena compounds, {} OOD pool, {} CRISPR) to {}",
        ds.wells.len(),
        ds.arena_compounds.len(),
        ds.ood_pool.len(),
        ds.crispr_genes.len(),
        out.display()
    );
    Ok(())
}

fn cmd_prep(input: &Path, out: &Path, d_out: Option<usize>, no_plate_norm: bool) -> Result<(), CliError> {
    let ds = load_data(input)?;
    let opts = PrepOptions {
        normalize_plates: !no_plate_norm,
        d_out,
        ..Default::default()
    };
    let (prepped, whitener) = preprocess(&ds, &opts)?;
    save_dataset(&prepped, out)?;
    whitener.save(&out.join("whitener.json"))?;
    println!(
        "wrote {} wells with {} features to {}",
        prepped.wells.len(),
        prepped.d_feat(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_zoo(
    dataset: &Path,
    config_path: &Path,
    store: &Path,
    parallelism: usize,
    seed: u64,
    reset: bool,
    stop_after: Option<usize>,
) -> Result<(), CliError> {
    let file = config::load::<ZooFile>(config_path, |f| f.version)?;
    file.train.validate()?;
    let ds = load_data(dataset)?;
    let axes = file.grid.resolve(ds.ood_pool.len())?;
    let grid = build_grid(&axes);
    if let Some(bad) = grid.iter().find_map(|c| c.validate().err()) {
        return Err(CliError::Config(bad));
    }
    if let Some(dir) = store.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Store(format!("{}: {e}", dir.display())))?;
    }
    let opts = ZooOptions {
        parallelism,
        store: store.to_path_buf(),
        reset,
        global_seed: seed,
        stop_after,
    };
    let summary = run_zoo(&grid, &ds, &file.train, &opts)?;
    let failed: Vec<_> = summary
        .executed
        .iter()
        .filter(|r| r.status == RunStatus::Failed)
        .collect();
    println!(
        "grid {} configs: executed {}, already stored {}, failed {}; store {}",
        grid.len(),
        summary.executed.len(),
        summary.skipped,
        failed.len(),
        store.display()
    );
    if let Some(first) = failed.first() {
        return Err(CliError::Training(format!(
            "{} runs failed; first {}: {}",
            failed.len(),
            &first.fingerprint[..12],
            first.cause.as_deref().unwrap_or("unknown cause")
        )));
    }
    Ok(())
}

fn cmd_eval(store: &Path, dataset: Option<&Path>) -> Result<(), CliError> {
    let records = read_store(store)?;
    if records.is_empty() {
        eprintln!("warning: run store {} is empty", store.display());
    }
    let mut derived = analysis::DerivedMap::new();
    println!(
        "runs by regime\n\n{}",
        analysis::regime_table(&records, &mut derived).to_text()
    );
    println!(
        "ibp versus task supervision\n\n{}",
        analysis::regime_ttests(&records, &mut derived).to_text()
    );
    let disc = analysis::discovery_table(&records);
    if !disc.rows.is_empty() {
        println!("discovery against raw features\n\n{}", disc.to_text());
    }
    if let Some(dir) = dataset {
        let ds = load_data(dir)?;
        let mut t = Table::new(&["task", "classes", "holdout_wells", "chance_top10"]);
        for task in [Task::Moa, Task::Target] {
            let labels: Vec<usize> = ds
                .holdout_wells()
                .filter_map(|w| w.compound_id())
                .filter(|c| ds.arena_compounds.contains(c))
                .filter_map(|c| task.label(&ds, c))
                .collect();
            let n_classes = labels.iter().max().map_or(0, |m| m + 1);
            let hist = label_histogram(&labels, n_classes);
            let chance = chance_topk(&hist, 10).unwrap_or(f64::NAN);
            let k = hist.iter().filter(|&&c| c > 0).count();
            t.push(vec![
                task.as_str().into(),
                k.to_string(),
                labels.len().to_string(),
                num(chance),
            ]);
        }
        println!("dataset chance baselines\n\n{}", t.to_text());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_scale(
    store: &Path,
    task: Task,
    supervision: Supervision,
    x_axis: XAxis,
    target: Option<f64>,
    replicates: f64,
    per_seed: bool,
    no_truncate: bool,
    json: bool,
) -> Result<(), CliError> {
    if !(replicates > 0.0 && replicates.is_finite()) {
        return Err(CliError::Config(format!(
            "--replicates must be positive, got {replicates}"
        )));
    }
    let records = read_store(store)?;
    let spec = FrontierSpec {
        supervision,
        task,
        x_axis,
        median_over_seeds: !per_seed,
        truncate_overfit: !no_truncate,
    };
    let result = analysis::scaling_results(&records, x_axis, !per_seed, !no_truncate)
        .into_iter()
        .find(|r| r.supervision == supervision && r.task == task);
    let Some(result) = result.filter(|r| !r.points.is_empty()) else {
        return Err(CliError::Data(format!(
            "no done {} runs for task {} in {}",
            supervision.as_str(),
            task.as_str(),
            store.display()
        )));
    };
    let fit = pheno_core::scaling::fit_frontier(&result.points, task, x_axis, &result.id)?;
    let scale = if matches!(task, Task::Moa | Task::Target) {
        100.0
    } else {
        1.0
    };
    let current = result
        .points
        .iter()
        .map(|p| p.best * scale)
        .reduce(|a, b| {
            if pheno_core::scaling::objective_for(task) == pheno_core::train::Objective::Minimize {
                a.min(b)
            } else {
                a.max(b)
            }
        })
        .expect("nonempty frontier");
    let extrapolation = target.map(|t| extrapolate(&fit, current, t, replicates)).transpose()?;
    let effect = replicate_effect(&records, &spec);

    if json {
        let doc = serde_json::json!({
            "frontier": result.points,
            "fit": fit,
            "current_best": current,
            "target": target,
            "extrapolation": extrapolation,
            "replicate_effect": effect,
        });
        println!("{}", serde_json::to_string_pretty(&doc).expect("json serializes"));
        return Ok(());
    }
    let mut t = Table::new(&["x", "best", "runs"]);
    for p in &result.points {
        t.push(vec![
            num(p.x),
            num(p.best),
            p.provenance
                .iter()
                .map(|s| s.split('+').count())
                .sum::<usize>()
                .to_string(),
        ]);
    }
    println!(
        "frontier ({} {}, x = {})\n\n{}",
        supervision.as_str(),
        task.as_str(),
        fit.x_unit,
        t.to_text()
    );
    println!(
        "fit: slope {:.6e} {} per {}, intercept {:.4}, r^2 {:.4}, {} points",
        fit.slope,
        fit.y_unit,
        fit.x_unit.trim_end_matches('s'),
        fit.intercept,
        fit.r_squared,
        fit.n_points
    );
    println!("current best: {current:.4} {}", fit.y_unit);
    if let Some(e) = extrapolation {
        println!(
            "to reach {:.4} {}: {:.0} more molecules, {:.0} wells at {} replicates",
            target.expect("target set"),
            fit.y_unit,
            e.molecules,
            e.wells,
            e.replicates
        );
    }
    let mut rt = Table::new(&["replicate_fraction", "points", "slope"]);
    for row in &effect.rows {
        rt.push(vec![
            num(row.replicate_fraction),
            row.frontier.len().to_string(),
            row.fit
                .as_ref()
                .map_or_else(|| "NA".into(), |f| format!("{:.6e}", f.slope)),
        ]);
    }
    println!("\nreplicate effect\n\n{}", rt.to_text());
    Ok(())
}

fn cmd_report(store: &Path, out: &Path, dataset: Option<&Path>) -> Result<(), CliError> {
    let records = read_store(store)?;
    let ds = dataset.map(load_data).transpose()?;
    let warnings = report::write_bundle(&records, store, ds.as_ref().zip(dataset), out)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    println!("report written to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, out, seed } => cmd_synth(config.as_deref(), &out, seed),
        Command::Prep {
            input,
            out,
            d_out,
            no_plate_norm,
        } => cmd_prep(&input, &out, d_out, no_plate_norm),
        Command::Zoo {
            dataset,
            config,
            store,
            parallelism,
            seed,
            reset,
            stop_after,
        } => cmd_zoo(&dataset, &config, &store.path(), parallelism, seed, reset, stop_after),
        Command::Eval { store, dataset } => cmd_eval(&store.path(), dataset.as_deref()),
        Command::Scale {
            store,
            task,
            supervision,
            x_axis,
            target_accuracy,
            replicates,
            per_seed,
            no_truncate,
            json,
        } => {
            let axis = match x_axis {
                AxisArg::OodWells => XAxis::OodWells,
                AxisArg::OodCount => XAxis::OodCount,
            };
            cmd_scale(
                &store.path(),
                task,
                supervision.into(),
                axis,
                target_accuracy,
                replicates,
                per_seed,
                no_truncate,
                json,
            )
        }
        Command::Report { store, out, dataset } => cmd_report(&store.path(), &out, dataset.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Config(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
