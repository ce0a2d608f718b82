//! Config-driven experiment runner. Each (t_h, held-out object, model)
//! cell trains on its own fold, forecasts the held-out windows and is
//! scored in metres.
//!
//! Run directory layout:
//!
//! ```text
//! manifest.json
//! metrics.csv
//! evaluation.csv                (after `evaluate_run`)
//! cells/th{t_h}/{object}/{model}/metrics.csv, trajectory.csv, snapshot.json
//! plots/{object}_th{t_h}.csv
//! ```

pub mod config;
pub mod plots;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    curve_forecasts, fit_curve, persistence_forecasts, step_examples, Protocol, RnnConfig, RnnModel, TcnConfig,
    TcnModel,
};
use crate::models::{LstmModel, TransformerModel};
use crate::dataset::{prepare_fold, Fold, ObjectSeries, PipelineConfig, SequenceExample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, write_metrics_csv, MetricsRow};
use crate::models::{InputLayout, LstmArch, LstmConfig, SeqArch, SeqModel, TransformerArch, TransformerConfig};
use crate::physics::{default_catalog, load_catalog, ObjectSpec, NUM_FEATURES};
use crate::simulator::{import_series, simulate_campaign, write_series_csv, DriftSeries};
use crate::snapshot::{config_hash, Snapshot};
use crate::tensor::Tensor;
use crate::text::{FileEncoder, HashingEncoder, TextEncoder, EMBEDDING_DIM};
use crate::train::{History, TrainConfig};

pub use config::{parse_horizons, parse_models, DataSource, ExperimentConfig, Hyperparameters, ModelKind, TextBackend, Tuned};
pub use plots::emit_plots;

pub const MANIFEST_FORMAT: &str = "driftcast-run";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const EVALUATION_FILE: &str = "evaluation.csv";
pub const TRAJECTORY_HEADER: [&str; 8] = ["model", "window", "step", "t", "truth_x", "truth_y", "pred_x", "pred_y"];

/// SHA-256 of one input series as written to CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub object: String,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellStatus {
    Ok,
    Failed,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub t_h: usize,
    pub object: String,
    pub model: ModelKind,
    /// Initialization seed; batching uses [`train_seed`] of it.
    pub seed: u64,
    /// Seed of the fold's augmentation noise.
    pub fold_seed: u64,
    pub status: CellStatus,
    pub error: Option<String>,
    /// Metrics rows produced, by model name.
    pub rows: Vec<String>,
    pub train_windows: usize,
    pub test_windows: usize,
    /// Hash of the standardized training windows the model saw.
    pub train_fingerprint: Option<String>,
    /// Hash of the held-out window starts and targets; identical for every
    /// model of a (t_h, object) pair.
    pub test_fingerprint: Option<String>,
    pub epochs: Option<usize>,
    pub steps: Option<usize>,
    pub best_loss: Option<f64>,
    pub elapsed_s: f64,
}

impl CellRecord {
    pub fn dir(&self) -> PathBuf {
        cell_dir(self.t_h, &self.object, self.model)
    }
}

/// Relative to the run directory.
pub fn cell_dir(t_h: usize, object: &str, model: ModelKind) -> PathBuf {
    PathBuf::from("cells").join(format!("th{t_h}")).join(object).join(model.name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub driftcast_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub text_backend: String,
    pub objects: Vec<String>,
    pub datasets: Vec<DatasetRecord>,
    pub cells: Vec<CellRecord>,
}

impl Manifest {
    pub fn load(run_dir: &Path) -> Result<Manifest> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::invalid(format!("no run manifest at {}", path.display())));
        }
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::Parse(format!("unsupported manifest {} v{}", m.format, m.version)));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub manifest: Manifest,
}

impl RunSummary {
    pub fn failed(&self) -> impl Iterator<Item = &CellRecord> {
        self.manifest.cells.iter().filter(|c| c.status != CellStatus::Ok)
    }

    pub fn diverged(&self) -> bool {
        self.manifest.cells.iter().any(|c| c.status == CellStatus::Diverged)
    }
}

/// Stable 64-bit seed from the root seed and a cell path.
pub fn derive_seed(root: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn train_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Hash of window starts and targets, plus inputs when `inputs` is set.
fn fingerprint(examples: &[SequenceExample], inputs: bool) -> String {
    let mut h = Sha256::new();
    for e in examples {
        h.update((e.start as u64).to_le_bytes());
        let parts = if inputs { vec![&e.x_e, &e.y_out] } else { vec![&e.y_out] };
        for t in parts {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// Catalog objects and their series, in catalog order.
pub fn load_series(cfg: &ExperimentConfig) -> Result<Vec<ObjectSeries>> {
    let catalog: Vec<ObjectSpec> = match &cfg.catalog {
        Some(p) => load_catalog(p)?,
        None => default_catalog(),
    };
    match &cfg.data {
        DataSource::Simulate { scenario } => simulate_campaign(scenario, &catalog)?
            .iter()
            .zip(&catalog)
            .map(|(t, o)| ObjectSeries::from_trajectory(t, o))
            .collect(),
        DataSource::Csv { dir } => catalog
            .iter()
            .map(|o| Ok(ObjectSeries::from_series(import_series(&dir.join(format!("{}.csv", o.id)))?, o)))
            .collect(),
    }
}

fn dataset_record(s: &ObjectSeries) -> Result<DatasetRecord> {
    let mut bytes = Vec::new();
    let series = DriftSeries { samples: s.samples.clone(), drift: s.drift.clone() };
    write_series_csv(&series, &mut bytes)?;
    Ok(DatasetRecord { object: s.object.id.clone(), rows: s.len(), sha256: hex::encode(Sha256::digest(&bytes)) })
}

fn encoder(cfg: &ExperimentConfig) -> Result<Box<dyn TextEncoder>> {
    Ok(match &cfg.text {
        TextBackend::Hashing => Box::new(HashingEncoder),
        TextBackend::File { path } => Box::new(FileEncoder::open(path)?),
    })
}

fn fold_seed(cfg: &ExperimentConfig, t_h: usize, object: &str) -> u64 {
    derive_seed(cfg.seed, &["fold", &t_h.to_string(), object])
}

/// Folds of one (t_h, object) pair, built on first use. The text-free
/// fold serves every model that ignores the embedding.
struct Folds<'a> {
    series: &'a [ObjectSeries],
    encoder: &'a dyn TextEncoder,
    pipeline: PipelineConfig,
    object: &'a str,
    plain: Option<(Fold, String, String)>,
    fused: Option<(Fold, String, String)>,
}

impl<'a> Folds<'a> {
    fn new(series: &'a [ObjectSeries], encoder: &'a dyn TextEncoder, cfg: &ExperimentConfig, t_h: usize, object: &'a str) -> Self {
        let pipeline = PipelineConfig {
            t_h,
            enc_len: cfg.enc_len,
            dec_len: cfg.dec_len,
            fuse_text: false,
            anchor_targets: true,
            augment_factor: cfg.augment_factor,
            seed: fold_seed(cfg, t_h, object),
        };
        Folds { series, encoder, pipeline, object, plain: None, fused: None }
    }

    fn get(&mut self, text: bool) -> Result<&(Fold, String, String)> {
        let slot = if text { &mut self.fused } else { &mut self.plain };
        if slot.is_none() {
            let p = PipelineConfig { fuse_text: text, ..self.pipeline.clone() };
            let fold = prepare_fold(self.series, self.encoder, &p, self.object)?;
            let (tr, te) = (fingerprint(&fold.train, true), fingerprint(&fold.test, false));
            *slot = Some((fold, tr, te));
        }
        Ok(slot.as_ref().expect("filled above"))
    }
}

struct CellOutput {
    /// `(row name, dec_len x 2 positions per test window)`.
    forecasts: Vec<(String, Vec<Tensor>)>,
    history: Option<History>,
    snapshot: Option<Snapshot>,
    extra_file: Option<(&'static str, String)>,
}

fn seq_forecasts<A: SeqArch>(model: &SeqModel<A>, fold: &Fold) -> Result<Vec<Tensor>> {
    let out = model.forecast_all(&fold.test)?;
    fold.test.iter().zip(&out).map(|(e, y)| fold.to_positions(e, y)).collect()
}

fn train_seq<A: SeqArch>(
    tuned: &Tuned<A::Config>,
    config: A::Config,
    fold: &Fold,
    layout: InputLayout,
    seed: u64,
    name: &str,
) -> Result<CellOutput> {
    let mut model = SeqModel::<A>::new(&config, layout)?;
    let train = TrainConfig { seed: train_seed(seed), ..tuned.train.clone() };
    let history = model.fit(&fold.train, &train)?;
    Ok(CellOutput {
        forecasts: vec![(name.to_string(), seq_forecasts(&model, fold)?)],
        history: Some(history),
        snapshot: Some(model.snapshot()?),
        extra_file: None,
    })
}

fn run_cell(kind: ModelKind, fold: &Fold, cfg: &ExperimentConfig, seed: u64) -> Result<CellOutput> {
    let h = &cfg.hyper;
    let name = kind.name();
    let one_step = |rolled: Vec<Tensor>, stepped: Option<Vec<Tensor>>| {
        let mut v = vec![(name.to_string(), rolled)];
        if let Some(s) = stepped {
            v.push((format!("{name}-onestep"), s));
        }
        v
    };
    let want_one_step = cfg.one_step_rows;
    match kind {
        ModelKind::Persistence => Ok(CellOutput {
            forecasts: vec![(name.to_string(), persistence_forecasts(fold)?)],
            history: None,
            snapshot: None,
            extra_file: None,
        }),
        ModelKind::Curvefit => {
            let fit = fit_curve(fold)?;
            let rolled = curve_forecasts(&fit, fold, Protocol::Rolled)?;
            let stepped = want_one_step.then(|| curve_forecasts(&fit, fold, Protocol::OneStep)).transpose()?;
            Ok(CellOutput {
                forecasts: one_step(rolled, stepped),
                history: None,
                snapshot: None,
                extra_file: Some(("coefficients.json", serde_json::to_string_pretty(&fit)?)),
            })
        }
        ModelKind::Rnn | ModelKind::Tcn => {
            let (xs, ys) = step_examples(fold)?;
            let (history, rolled, stepped, snapshot) = if kind == ModelKind::Rnn {
                let mut m = RnnModel::new(&RnnConfig { seed, ..h.rnn.model.clone() }, NUM_FEATURES)?;
                let hist = m.fit(&xs, &ys, &TrainConfig { seed: train_seed(seed), ..h.rnn.train.clone() })?;
                let r = m.forecast_fold(fold, Protocol::Rolled)?;
                let s = want_one_step.then(|| m.forecast_fold(fold, Protocol::OneStep)).transpose()?;
                (hist, r, s, m.snapshot()?)
            } else {
                let mut m = TcnModel::new(&TcnConfig { seed, ..h.tcn.model.clone() }, NUM_FEATURES)?;
                let hist = m.fit(&xs, &ys, &TrainConfig { seed: train_seed(seed), ..h.tcn.train.clone() })?;
                let r = m.forecast_fold(fold, Protocol::Rolled)?;
                let s = want_one_step.then(|| m.forecast_fold(fold, Protocol::OneStep)).transpose()?;
                (hist, r, s, m.snapshot()?)
            };
            Ok(CellOutput { forecasts: one_step(rolled, stepped), history: Some(history), snapshot: Some(snapshot), extra_file: None })
        }
        ModelKind::StsLstm => {
            let c = LstmConfig { seed, ..h.sts_lstm.model.clone() };
            train_seq::<LstmArch>(&h.sts_lstm, c, fold, InputLayout::new(NUM_FEATURES, 0), seed, name)
        }
        ModelKind::MmLstm => {
            let c = LstmConfig { seed, ..h.mm_lstm.model.clone() };
            train_seq::<LstmArch>(&h.mm_lstm, c, fold, InputLayout::new(NUM_FEATURES, EMBEDDING_DIM), seed, name)
        }
        ModelKind::MmTransformer => {
            let c = TransformerConfig { seed, ..h.mm_transformer.model.clone() };
            let layout = InputLayout::new(NUM_FEATURES, EMBEDDING_DIM);
            train_seq::<TransformerArch>(&h.mm_transformer, c, fold, layout, seed, name)
        }
    }
}

/// Ground-truth positions of every test window, `dec_len x 2` each.
fn truth(fold: &Fold) -> Vec<Tensor> {
    let s = fold.test_series();
    let (le, ld) = (fold.config.enc_len, fold.config.dec_len);
    fold.test
        .iter()
        .map(|e| {
            let data = (0..ld).flat_map(|k| s.drift[e.start + le + k]).collect();
            Tensor::new(vec![ld, 2], data).expect("dec_len rows of two")
        })
        .collect()
}

fn write_trajectory(path: &Path, fold: &Fold, truth: &[Tensor], forecasts: &[(String, Vec<Tensor>)]) -> Result<()> {
    let s = fold.test_series();
    let le = fold.config.enc_len;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRAJECTORY_HEADER)?;
    for (name, preds) in forecasts {
        for ((e, y), p) in fold.test.iter().zip(truth).zip(preds) {
            for k in 0..y.rows() {
                let (yr, pr) = (y.row(k), p.row(k));
                w.write_record([
                    name.clone(),
                    e.start.to_string(),
                    k.to_string(),
                    s.samples[e.start + le + k].t.to_string(),
                    yr[0].to_string(),
                    yr[1].to_string(),
                    pr[0].to_string(),
                    pr[1].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn flat(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn score(object: &str, t_h: usize, truth: &[Tensor], forecasts: &[(String, Vec<Tensor>)]) -> Result<Vec<MetricsRow>> {
    let y = flat(truth);
    forecasts
        .iter()
        .map(|(name, p)| Ok(MetricsRow { object: object.into(), model: name.clone(), t_h, metrics: evaluate(&flat(p), &y)? }))
        .collect()
}

/// Trains, forecasts and scores one cell, writing its files under `dir`.
fn execute(
    kind: ModelKind,
    folds: &mut Folds,
    cfg: &ExperimentConfig,
    record: &mut CellRecord,
    dir: &Path,
) -> Result<Vec<MetricsRow>> {
    let (fold, train_fp, test_fp) = folds.get(kind.uses_text())?;
    record.train_windows = fold.train.len();
    record.test_windows = fold.test.len();
    if kind.is_trained() {
        record.train_fingerprint = Some(train_fp.clone());
    }
    record.test_fingerprint = Some(test_fp.clone());
    let out = run_cell(kind, fold, cfg, record.seed)?;
    if let Some(h) = &out.history {
        record.epochs = Some(h.train_loss.len());
        record.steps = Some(h.steps);
        record.best_loss = Some(h.best_loss);
    }
    let truth = truth(fold);
    let rows = score(&record.object, record.t_h, &truth, &out.forecasts)?;
    std::fs::create_dir_all(dir)?;
    write_metrics_csv(&rows, std::fs::File::create(dir.join(METRICS_FILE))?)?;
    write_trajectory(&dir.join(TRAJECTORY_FILE), fold, &truth, &out.forecasts)?;
    if let (true, Some(s)) = (cfg.snapshots, &out.snapshot) {
        s.save(&dir.join(SNAPSHOT_FILE))?;
    }
    if let Some((file, body)) = &out.extra_file {
        std::fs::write(dir.join(file), body)?;
    }
    record.rows = rows.iter().map(|r| r.model.clone()).collect();
    Ok(rows)
}

fn write_manifest(out_dir: &Path, manifest: &Manifest) -> Result<()> {
    std::fs::write(out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

/// Runs every requested cell, then writes the metrics table, the manifest
/// and the plot series. A failing cell is recorded and skipped unless
/// `fail_fast` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let series = load_series(cfg)?;
    let ids: Vec<String> = series.iter().map(|s| s.object.id.clone()).collect();
    let holdout = cfg.holdout.clone().unwrap_or_else(|| ids.clone());
    if let Some(bad) = holdout.iter().find(|h| !ids.contains(h)) {
        return Err(Error::UnknownObject(bad.clone()));
    }
    let enc = encoder(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        driftcast_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: config_hash(cfg)?,
        config: cfg.clone(),
        text_backend: enc.name().into(),
        objects: ids,
        datasets: series.iter().map(dataset_record).collect::<Result<_>>()?,
        cells: Vec::new(),
    };
    let mut rows = Vec::new();
    for &t_h in &cfg.t_h {
        for object in &holdout {
            let mut folds = Folds::new(&series, enc.as_ref(), cfg, t_h, object);
            for &kind in &cfg.models {
                let started = Instant::now();
                let mut record = CellRecord {
                    t_h,
                    object: object.clone(),
                    model: kind,
                    seed: derive_seed(cfg.seed, &["model", &t_h.to_string(), object, kind.name()]),
                    fold_seed: folds.pipeline.seed,
                    status: CellStatus::Ok,
                    error: None,
                    rows: Vec::new(),
                    train_windows: 0,
                    test_windows: 0,
                    train_fingerprint: None,
                    test_fingerprint: None,
                    epochs: None,
                    steps: None,
                    best_loss: None,
                    elapsed_s: 0.0,
                };
                let dir = cfg.out_dir.join(record.dir());
                let result = execute(kind, &mut folds, cfg, &mut record, &dir);
                record.elapsed_s = started.elapsed().as_secs_f64();
                match result {
                    Ok(r) => {
                        log::info!("t_h={t_h} {object} {kind}: done in {:.1}s", record.elapsed_s);
                        rows.extend(r);
                        manifest.cells.push(record);
                    }
                    Err(e) => {
                        log::warn!("t_h={t_h} {object} {kind}: {e}");
                        record.status =
                            if matches!(e, Error::Diverged { .. }) { CellStatus::Diverged } else { CellStatus::Failed };
                        record.error = Some(e.to_string());
                        manifest.cells.push(record);
                        if cfg.fail_fast {
                            write_manifest(&cfg.out_dir, &manifest)?;
                            return Err(e);
                        }
                    }
                }
            }
        }
    }
    write_metrics_csv(&rows, std::fs::File::create(cfg.out_dir.join(METRICS_FILE))?)?;
    write_manifest(&cfg.out_dir, &manifest)?;
    emit_plots(&cfg.out_dir)?;
    Ok(RunSummary { out_dir: cfg.out_dir.clone(), rows, manifest })
}

/// Forecasts of a finished cell from its saved snapshot; the untrained
/// baselines are simply refitted.
fn replay(kind: ModelKind, fold: &Fold, cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<(String, Vec<Tensor>)>> {
    let path = dir.join(SNAPSHOT_FILE);
    if kind.is_trained() && !path.exists() {
        return Err(Error::invalid(format!("{} is missing; was the run made without snapshots?", path.display())));
    }
    let name = kind.name().to_string();
    let stepped = |rolled: Vec<Tensor>, one: Option<Vec<Tensor>>| {
        let mut v = vec![(name.clone(), rolled)];
        v.extend(one.map(|s| (format!("{name}-onestep"), s)));
        v
    };
    let want = cfg.one_step_rows;
    Ok(match kind {
        ModelKind::Persistence | ModelKind::Curvefit => run_cell(kind, fold, cfg, 0)?.forecasts,
        ModelKind::Rnn => {
            let m = RnnModel::from_snapshot(&Snapshot::load(&path)?)?;
            stepped(m.forecast_fold(fold, Protocol::Rolled)?, want.then(|| m.forecast_fold(fold, Protocol::OneStep)).transpose()?)
        }
        ModelKind::Tcn => {
            let m = TcnModel::from_snapshot(&Snapshot::load(&path)?)?;
            stepped(m.forecast_fold(fold, Protocol::Rolled)?, want.then(|| m.forecast_fold(fold, Protocol::OneStep)).transpose()?)
        }
        ModelKind::StsLstm | ModelKind::MmLstm => {
            vec![(name, seq_forecasts(&LstmModel::from_snapshot(&Snapshot::load(&path)?)?, fold)?)]
        }
        ModelKind::MmTransformer => {
            vec![(name, seq_forecasts(&TransformerModel::from_snapshot(&Snapshot::load(&path)?)?, fold)?)]
        }
    })
}

/// Re-scores every completed cell of a finished run from its snapshots,
/// without training, and writes the table to `evaluation.csv`. The data
/// must hash to what the manifest recorded.
pub fn evaluate_run(run_dir: &Path) -> Result<Vec<MetricsRow>> {
    let manifest = Manifest::load(run_dir)?;
    let cfg = &manifest.config;
    let series = load_series(cfg)?;
    let datasets = series.iter().map(dataset_record).collect::<Result<Vec<_>>>()?;
    if datasets != manifest.datasets {
        return Err(Error::invalid("the data source no longer matches the series recorded in the manifest"));
    }
    let enc = encoder(cfg)?;
    let mut rows = Vec::new();
    let mut current: Option<Folds> = None;
    for cell in manifest.cells.iter().filter(|c| c.status == CellStatus::Ok) {
        if !current.as_ref().is_some_and(|f| f.pipeline.t_h == cell.t_h && f.object == cell.object) {
            current = Some(Folds::new(&series, enc.as_ref(), cfg, cell.t_h, &cell.object));
        }
        let folds = current.as_mut().expect("set above");
        let (fold, _, test_fp) = folds.get(cell.model.uses_text())?;
        if cell.test_fingerprint.as_ref() != Some(test_fp) {
            return Err(Error::invalid(format!("held-out windows of {} at t_h={} changed", cell.object, cell.t_h)));
        }
        let forecasts = replay(cell.model, fold, cfg, &run_dir.join(cell.dir()))?;
        rows.extend(score(&cell.object, cell.t_h, &truth(fold), &forecasts)?);
    }
    write_metrics_csv(&rows, std::fs::File::create(run_dir.join(EVALUATION_FILE))?)?;
    Ok(rows)
}
