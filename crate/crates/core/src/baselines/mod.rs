//! Reference forecasters: constant-velocity persistence, the integral curve
//! fit, and two one-step networks (RNN, TCN) chained over the horizon.

pub mod curvefit;
pub mod rnn;
pub mod tcn;

use std::cell::RefCell;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use curvefit::{CurveFit, CurveFitCoeffs};
pub use rnn::{RnnArch, RnnConfig};
pub use tcn::{TcnArch, TcnConfig};

use crate::dataset::{Fold, ObjectSeries, SequenceExample, Standardizer};
use crate::error::{Error, Result};
use crate::physics::{Vec2, NUM_FEATURES};
use crate::snapshot::Snapshot;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::train::{fit, History, Objective, TrainConfig};

pub type RnnModel = StepModel<RnnArch>;
pub type TcnModel = StepModel<TcnArch>;

/// `dec_len x 2` positions extrapolated at the last observed velocity.
/// The window's last observed row is `start + enc_len - 1`.
pub fn persistence(drift: &[Vec2], start: usize, enc_len: usize, dec_len: usize) -> Result<Tensor> {
    if enc_len == 0 {
        return Err(Error::invalid("persistence needs at least one observed row"));
    }
    let a = start + enc_len - 1;
    let last = *drift.get(a).ok_or_else(|| Error::invalid(format!("row {a} beyond series of {}", drift.len())))?;
    let vel = if a == 0 { [0.0, 0.0] } else { [last[0] - drift[a - 1][0], last[1] - drift[a - 1][1]] };
    let data = (1..=dec_len).flat_map(|k| [last[0] + k as f64 * vel[0], last[1] + k as f64 * vel[1]]).collect();
    Tensor::new(vec![dec_len, 2], data)
}

/// Curve fit on every row of the training objects plus the held-out
/// object's rows up to its first forecast anchor.
pub fn fit_curve(fold: &Fold) -> Result<CurveFit> {
    let first = fold.test.iter().map(|e| e.start).min().unwrap_or(0) + fold.config.enc_len;
    let rows = fold.series.iter().map(|s| {
        let n = if s.object.id == fold.test_object { first.min(s.len()) } else { s.len() };
        (&s.samples[..n], &s.drift[..n])
    });
    CurveFit::fit(rows)
}

/// Curve-fit forecasts for the test windows. The fitted model gives the
/// displacement between consecutive rows, chained like the one-step
/// networks; rolled forecasts equal the fit re-anchored at the last
/// observed position.
pub fn curve_forecasts(fit: &CurveFit, fold: &Fold, protocol: Protocol) -> Result<Vec<Tensor>> {
    let s = fold.test_series();
    let le = fold.config.enc_len;
    let d = fit.predict(&s.samples, [0.0, 0.0]);
    let disp: Vec<Vec2> = (le..d.len()).map(|r| [d[r][0] - d[r - 1][0], d[r][1] - d[r - 1][1]]).collect();
    let starts: Vec<usize> = fold.test.iter().map(|e| e.start).collect();
    compose(&disp, &s.drift, &starts, le, fold.config.dec_len, protocol)
}

pub fn persistence_forecasts(fold: &Fold) -> Result<Vec<Tensor>> {
    let s = fold.test_series();
    let (le, ld) = (fold.config.enc_len, fold.config.dec_len);
    fold.test.iter().map(|e| persistence(&s.drift, e.start, le, ld)).collect()
}

/// Batch statistics of one normalization layer, to be folded into its
/// running estimates after the optimizer step.
#[derive(Debug, Clone)]
pub struct RunningStat {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

pub type BatchStats = Vec<RunningStat>;

impl RunningStat {
    pub fn apply(&self, store: &mut ParamStore) {
        let m = self.momentum;
        for (r, b) in store.get_mut(self.mean_id).data_mut().iter_mut().zip(&self.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in store.get_mut(self.var_id).data_mut().iter_mut().zip(&self.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Network mapping an input window `[B, T, C]` to one displacement `[B, 2]`.
pub trait StepArch: Sized {
    type Config: Serialize + DeserializeOwned + Clone + PartialEq + std::fmt::Debug;

    const KIND: &'static str;

    fn build(config: &Self::Config, input_cols: usize, store: &mut ParamStore) -> Result<Self>;

    fn config(&self) -> &Self::Config;

    fn seed(&self) -> u64;

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, training: bool) -> Result<(Var, BatchStats)>;
}

/// How chained one-step predictions become a multi-step forecast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Predicted displacements are accumulated from the last observed
    /// position.
    Rolled,
    /// Every step starts from the true previous position.
    OneStep,
}

#[derive(Debug, Clone)]
pub struct StepModel<A: StepArch> {
    pub arch: A,
    pub store: ParamStore,
    pub input_cols: usize,
    /// Target scaling, fitted on the training displacements.
    pub y_scaler: Standardizer,
}

#[derive(Serialize, Deserialize)]
struct StepExtra {
    input_cols: usize,
    y_scaler: Standardizer,
}

const PREDICT_CHUNK: usize = 256;

/// `[B, T, C]` from equally shaped `T x C` windows.
pub fn stack_windows(xs: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = xs.first() else {
        return Err(Error::invalid("no windows to stack"));
    };
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(xs.len() * first.numel());
    for x in xs {
        if x.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch { op: "stack_windows", left: shape, right: x.shape().to_vec() });
        }
        data.extend_from_slice(x.data());
    }
    let mut full = vec![xs.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

struct StepObjective<'a, A: StepArch> {
    arch: &'a A,
    xs: &'a [Tensor],
    ys: &'a [Vec2],
    pending: RefCell<BatchStats>,
}

impl<A: StepArch> Objective for StepObjective<'_, A> {
    fn loss(&self, g: &mut Graph, store: &ParamStore, idx: &[usize], training: bool) -> Result<Var> {
        let picked: Vec<&Tensor> = idx.iter().map(|&i| &self.xs[i]).collect();
        let x = g.constant(stack_windows(&picked)?);
        let (pred, stats) = self.arch.forward(g, store, x, training)?;
        if training {
            *self.pending.borrow_mut() = stats;
        }
        let y: Vec<f64> = idx.iter().flat_map(|&i| self.ys[i]).collect();
        let y = g.constant(Tensor::new(vec![idx.len(), 2], y)?);
        g.mse(pred, y)
    }

    fn after_step(&self, store: &mut ParamStore) -> Result<()> {
        for s in self.pending.borrow_mut().drain(..) {
            s.apply(store);
        }
        Ok(())
    }
}

impl<A: StepArch> StepModel<A> {
    pub fn new(config: &A::Config, input_cols: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = A::build(config, input_cols, &mut store)?;
        Ok(StepModel { arch, store, input_cols, y_scaler: Standardizer::default() })
    }

    /// Fits the target scaler, then trains on standardized displacements.
    pub fn fit(&mut self, xs: &[Tensor], ys: &[Vec2], cfg: &TrainConfig) -> Result<History> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::invalid(format!("{} windows for {} targets", xs.len(), ys.len())));
        }
        self.y_scaler = Standardizer::fit(ys.iter().map(|y| y.as_slice()))?;
        let (m, s) = (self.y_scaler.mean(), self.y_scaler.std());
        let scaled: Vec<Vec2> = ys.iter().map(|y| [(y[0] - m[0]) / s[0], (y[1] - m[1]) / s[1]]).collect();
        let obj = StepObjective { arch: &self.arch, xs, ys: &scaled, pending: RefCell::new(Vec::new()) };
        fit(&mut self.store, xs.len(), &obj, cfg)
    }

    /// Displacements in metres, one per window.
    pub fn predict(&self, xs: &[Tensor]) -> Result<Vec<Vec2>> {
        if !self.store.is_trained() {
            return Err(Error::Untrained(A::KIND));
        }
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(PREDICT_CHUNK) {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let mut g = Graph::new();
            let x = g.constant(stack_windows(&refs)?);
            let (p, _) = self.arch.forward(&mut g, &self.store, x, false)?;
            let p = self.y_scaler.invert(g.value(p))?;
            out.extend(p.data().chunks(2).map(|r| [r[0], r[1]]));
        }
        Ok(out)
    }

    /// Multi-step forecasts for the fold's test windows.
    pub fn forecast_fold(&self, fold: &Fold, protocol: Protocol) -> Result<Vec<Tensor>> {
        let series = fold.test_series();
        let windows = series_windows(fold, series)?;
        let disp = self.predict(&windows)?;
        let starts: Vec<usize> = fold.test.iter().map(|e| e.start).collect();
        compose(&disp, &series.drift, &starts, fold.config.enc_len, fold.config.dec_len, protocol)
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        let extra = StepExtra { input_cols: self.input_cols, y_scaler: self.y_scaler.clone() };
        Snapshot::capture(A::KIND, self.arch.seed(), self.arch.config(), &self.store, serde_json::to_value(extra)?)
    }

    pub fn from_snapshot(snap: &Snapshot) -> Result<Self> {
        if snap.model != A::KIND {
            return Err(Error::invalid(format!("snapshot holds a `{}`, not a `{}`", snap.model, A::KIND)));
        }
        let config: A::Config = serde_json::from_value(snap.config.clone())?;
        let extra: StepExtra = serde_json::from_value(snap.extra.clone())?;
        let mut model = Self::new(&config, extra.input_cols)?;
        model.y_scaler = extra.y_scaler;
        snap.restore(&mut model.store)?;
        Ok(model)
    }
}

/// Training pairs: the numeric columns of each encoder window and the
/// displacement to the first forecast row, in metres.
pub fn step_examples(fold: &Fold) -> Result<(Vec<Tensor>, Vec<Vec2>)> {
    step_pairs(fold, &fold.train)
}

pub fn step_pairs(fold: &Fold, examples: &[SequenceExample]) -> Result<(Vec<Tensor>, Vec<Vec2>)> {
    if !fold.config.anchor_targets {
        return Err(Error::invalid("one-step targets need anchored windows"));
    }
    let mut xs = Vec::with_capacity(examples.len());
    let mut ys = Vec::with_capacity(examples.len());
    for e in examples {
        xs.push(numeric_columns(&e.x_e)?);
        let first = Tensor::new(vec![1, 2], e.y_out.row(0).to_vec())?;
        let d = fold.y_scaler.invert(&first)?;
        ys.push([d.data()[0], d.data()[1]]);
    }
    Ok((xs, ys))
}

fn numeric_columns(x: &Tensor) -> Result<Tensor> {
    let p = x.last_dim();
    if p < NUM_FEATURES {
        return Err(Error::Dimension { row: 0, expected: NUM_FEATURES, found: p });
    }
    let data = x.data().chunks(p).flat_map(|r| r[..NUM_FEATURES].iter().copied()).collect();
    Tensor::new(vec![x.rows(), NUM_FEATURES], data)
}

/// Every encoder-length window of `series`, standardized with the fold's
/// input scaler, in order of start row.
pub fn series_windows(fold: &Fold, series: &ObjectSeries) -> Result<Vec<Tensor>> {
    let le = fold.config.enc_len;
    let feats = series.features()?;
    let (m, s) = (&fold.x_scaler.mean()[..NUM_FEATURES], &fold.x_scaler.std()[..NUM_FEATURES]);
    let mut scaled = feats.into_data();
    for row in scaled.chunks_mut(NUM_FEATURES) {
        for ((x, m), s) in row.iter_mut().zip(m).zip(s) {
            *x = (*x - m) / s;
        }
    }
    let n = series.len();
    if n < le {
        return Ok(Vec::new());
    }
    (0..=n - le)
        .map(|j| Tensor::new(vec![le, NUM_FEATURES], scaled[j * NUM_FEATURES..(j + le) * NUM_FEATURES].to_vec()))
        .collect()
}

/// Chains per-window displacements (`disp[j]` moves from row `j+le-1` to
/// `j+le`) into `dec_len x 2` position forecasts for each start.
pub fn compose(
    disp: &[Vec2],
    drift: &[Vec2],
    starts: &[usize],
    enc_len: usize,
    dec_len: usize,
    protocol: Protocol,
) -> Result<Vec<Tensor>> {
    starts
        .iter()
        .map(|&i| {
            if i + dec_len > disp.len() || i + enc_len + dec_len > drift.len() + 1 {
                return Err(Error::invalid(format!("window at {i} runs past the series")));
            }
            let mut p = drift[i + enc_len - 1];
            let mut data = Vec::with_capacity(dec_len * 2);
            for k in 0..dec_len {
                if protocol == Protocol::OneStep {
                    p = drift[i + k + enc_len - 1];
                }
                p = [p[0] + disp[i + k][0], p[1] + disp[i + k][1]];
                data.extend(p);
            }
            Tensor::new(vec![dec_len, 2], data)
        })
        .collect()
}
