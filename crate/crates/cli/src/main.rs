use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};
use driftcast::experiment::{
    emit_plots, evaluate_run, parse_horizons, parse_models, run_experiment, DataSource, ExperimentConfig,
    Manifest, RunSummary, TextBackend, EVALUATION_FILE, METRICS_FILE,
};
use driftcast::metrics::MetricsRow;
use driftcast::physics::{default_catalog, load_catalog};
use driftcast::simulator::{export_series, simulate_campaign};
use driftcast::Error;

/// Leeway drift forecasting experiments.
#[derive(Parser)]
#[command(name = "driftcast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the campaign and write one series CSV per object.
    Simulate(Common),
    /// Train and score only the learned models.
    Train(Common),
    /// Re-score a finished run from its snapshots, without training.
    Evaluate(Common),
    /// Run every requested model and write metrics, trajectories and plots.
    Run(Common),
    /// Rebuild the plot series of a finished run.
    Plots(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Builtin,
    File,
}

#[derive(Args)]
struct Common {
    /// Experiment config or run manifest (JSON). Missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; for `simulate`, the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated model names.
    #[arg(long)]
    models: Option<String>,
    /// Comma-separated time horizons.
    #[arg(long)]
    th: Option<String>,
    /// Output directory; for `evaluate` and `plots`, the run to read.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated held-out object ids.
    #[arg(long)]
    objects: Option<String>,
    #[arg(long, value_enum)]
    text_backend: Option<Backend>,
    /// Embedding CSV for `--text-backend file`.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Stop at the first failing cell.
    #[arg(long)]
    fail_fast: bool,
}

/// An error tagged with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

const CONFIG: u8 = 2;
const DIVERGED: u8 = 3;
const IO: u8 = 4;

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: CONFIG, error: e.into() }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Diverged { .. } => DIVERGED,
            Error::Io(_) | Error::Csv(_) | Error::Image(_) => IO,
            Error::InvalidArgument(_) | Error::Parse(_) | Error::UnknownObject(_) | Error::Json(_) => CONFIG,
            _ => 1,
        };
        Failure { code, error: e.into() }
    }
}

fn load_config(args: &Common, simulate: bool) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io(_) => Failure { code: IO, error: anyhow!("cannot read {}: {e}", p.display()) },
            e => config_err(anyhow!("{}: {e}", p.display())),
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        match (&mut cfg.data, simulate) {
            (DataSource::Simulate { scenario }, true) => scenario.seed = s,
            (_, true) => return Err(config_err(anyhow!("`simulate` needs a simulated data source"))),
            _ => cfg.seed = s,
        }
    }
    if let Some(m) = &args.models {
        cfg.models = parse_models(m).map_err(config_err)?;
    }
    if let Some(t) = &args.th {
        cfg.t_h = parse_horizons(t).map_err(config_err)?;
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if let Some(o) = &args.objects {
        cfg.holdout = Some(o.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect());
    }
    match (args.text_backend, &args.embeddings) {
        (Some(Backend::Builtin), None) => cfg.text = TextBackend::Hashing,
        (Some(Backend::File) | None, Some(path)) => cfg.text = TextBackend::File { path: path.clone() },
        (Some(Backend::File), None) => return Err(config_err(anyhow!("`--text-backend file` needs `--embeddings`"))),
        (Some(Backend::Builtin), Some(_)) => return Err(config_err(anyhow!("`--embeddings` needs `--text-backend file`"))),
        (None, None) => {}
    }
    cfg.fail_fast |= args.fail_fast;
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn simulate(args: &Common) -> Result<(), Failure> {
    let cfg = load_config(args, true)?;
    let DataSource::Simulate { scenario } = &cfg.data else {
        return Err(config_err(anyhow!("`simulate` needs a simulated data source")));
    };
    let dir = args.out.clone().unwrap_or_else(|| cfg.out_dir.join("data"));
    std::fs::create_dir_all(&dir).map_err(Error::from)?;
    let catalog = match &cfg.catalog {
        Some(p) => load_catalog(p)?,
        None => default_catalog(),
    };
    for (t, o) in simulate_campaign(scenario, &catalog)?.iter().zip(&catalog) {
        let path = dir.join(format!("{}.csv", o.id));
        export_series(&path, t)?;
        println!("{}  {} rows", path.display(), t.series().drift.len());
    }
    Ok(())
}

fn print_table(rows: &[MetricsRow]) {
    println!("{:<20} {:>4} {:>10} {:>10} {:>10}", "model", "t_h", "rmse", "mae", "mape%");
    let mut keys: Vec<(&str, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.model.as_str(), r.t_h)) {
            keys.push((r.model.as_str(), r.t_h));
        }
    }
    keys.sort_by_key(|k| k.1);
    for (model, t_h) in keys {
        let cell: Vec<_> = rows.iter().filter(|r| r.model == model && r.t_h == t_h).map(|r| &r.metrics).collect();
        let mean = |f: fn(&driftcast::metrics::Metrics) -> f64| cell.iter().map(|m| f(m)).sum::<f64>() / cell.len() as f64;
        println!("{model:<20} {t_h:>4} {:>10.4} {:>10.4} {:>10.2}", mean(|m| m.rmse), mean(|m| m.mae), mean(|m| m.mape));
    }
}

fn finish(run: &RunSummary) -> Result<(), Failure> {
    print_table(&run.rows);
    println!("wrote {}", run.out_dir.join(METRICS_FILE).display());
    let failed: Vec<_> = run.failed().collect();
    for c in &failed {
        eprintln!("t_h={} {} {}: {}", c.t_h, c.object, c.model, c.error.as_deref().unwrap_or("failed"));
    }
    match failed.len() {
        0 => Ok(()),
        n => Err(Failure {
            code: if run.diverged() { DIVERGED } else { 1 },
            error: anyhow!("{n} of {} cells failed", run.manifest.cells.len()),
        }),
    }
}

fn experiment(args: &Common, trained_only: bool) -> Result<(), Failure> {
    let mut cfg = load_config(args, false)?;
    if trained_only {
        cfg.models.retain(|m| m.is_trained());
        if cfg.models.is_empty() {
            return Err(config_err(anyhow!("no trainable model requested")));
        }
    }
    finish(&run_experiment(&cfg)?)
}

/// The run directory named by `--out`, else by the config's `out_dir`.
fn run_dir(args: &Common) -> Result<PathBuf, Failure> {
    if let Some(o) = &args.out {
        return Ok(o.clone());
    }
    match &args.config {
        Some(_) => Ok(load_config(args, false)?.out_dir),
        None => Err(config_err(anyhow!("name the run with `--out` or `--config`"))),
    }
}

fn evaluate(args: &Common) -> Result<(), Failure> {
    let dir = run_dir(args)?;
    let rows = evaluate_run(&dir)?;
    print_table(&rows);
    let read = |p: &Path| std::fs::read(p).map_err(Error::from);
    let same = read(&dir.join(METRICS_FILE))? == read(&dir.join(EVALUATION_FILE))?;
    println!(
        "wrote {} ({} the recorded metrics)",
        dir.join(EVALUATION_FILE).display(),
        if same { "identical to" } else { "differs from" }
    );
    Ok(())
}

fn plots(args: &Common) -> Result<(), Failure> {
    let dir = run_dir(args)?;
    let manifest = Manifest::load(&dir)?;
    let written = emit_plots(&dir)?;
    println!("{} plot series for {} objects", written.len(), manifest.objects.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => experiment(a, true),
        Command::Evaluate(a) => evaluate(a),
        Command::Run(a) => experiment(a, false),
        Command::Plots(a) => plots(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
