//! Down-sampling, embedding fusion, windowing, augmentation, the
//! object-holdout split and standardization.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::{feature_row, EnvSample, ObjectSpec, Vec2, NUM_FEATURES};
use crate::simulator::{finite_difference_velocity, DriftSeries, Trajectory};
use crate::tensor::Tensor;
use crate::text::{TextEncoder, EMBEDDING_DIM};

pub const FUSED_WIDTH: usize = NUM_FEATURES + EMBEDDING_DIM;
const STD_FLOOR: f64 = 1e-8;

/// One object's 1 Hz record.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSeries {
    pub object: ObjectSpec,
    pub samples: Vec<EnvSample>,
    /// Recorded (possibly noisy) positions.
    pub drift: Vec<Vec2>,
    /// Object velocity used for the relative-velocity features.
    pub velocity: Vec<Vec2>,
}

impl ObjectSeries {
    /// Synthetic data: velocities come from the simulator state.
    pub fn from_trajectory(traj: &Trajectory, object: &ObjectSpec) -> Result<Self> {
        if traj.object_id != object.id {
            return Err(Error::invalid(format!(
                "trajectory is for `{}`, object is `{}`",
                traj.object_id, object.id
            )));
        }
        Ok(ObjectSeries {
            object: object.clone(),
            samples: traj.steps.iter().map(|s| s.env).collect(),
            drift: traj.steps.iter().map(|s| s.observed).collect(),
            velocity: traj.steps.iter().map(|s| s.velocity).collect(),
        })
    }

    /// Recorded data: velocities by finite differences of position.
    pub fn from_series(series: DriftSeries, object: &ObjectSpec) -> Self {
        let velocity = finite_difference_velocity(&series);
        ObjectSeries {
            object: object.clone(),
            samples: series.samples,
            drift: series.drift,
            velocity,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn downsample(&self, t_h: usize) -> Result<Self> {
        Ok(ObjectSeries {
            object: self.object.clone(),
            samples: downsample(&self.samples, t_h)?,
            drift: downsample(&self.drift, t_h)?,
            velocity: downsample(&self.velocity, t_h)?,
        })
    }

    /// `N x 15` numeric features.
    pub fn features(&self) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.len() * NUM_FEATURES);
        for (s, v) in self.samples.iter().zip(&self.velocity) {
            data.extend_from_slice(&feature_row(s, &self.object, *v)?);
        }
        Tensor::new(vec![self.len(), NUM_FEATURES], data)
    }

    /// `N x 2` drift.
    pub fn targets(&self) -> Tensor {
        let data = self.drift.iter().flat_map(|d| *d).collect();
        Tensor::new(vec![self.len(), 2], data).expect("drift rows have two columns")
    }
}

/// Keeps rows `0, t_h, 2 t_h, ...`.
pub fn downsample<T: Clone>(rows: &[T], t_h: usize) -> Result<Vec<T>> {
    if t_h < 1 {
        return Err(Error::invalid("time horizon must be at least 1"));
    }
    Ok(rows.iter().step_by(t_h).cloned().collect())
}

/// Appends the same embedding to every row.
pub fn fuse_embedding(rows: &Tensor, embedding: &[f64]) -> Result<Tensor> {
    if rows.shape().len() != 2 || rows.shape()[1] != NUM_FEATURES || embedding.len() != EMBEDDING_DIM {
        return Err(Error::ShapeMismatch {
            op: "fuse_embedding",
            left: rows.shape().to_vec(),
            right: vec![embedding.len()],
        });
    }
    let n = rows.shape()[0];
    let mut data = Vec::with_capacity(n * FUSED_WIDTH);
    for i in 0..n {
        data.extend_from_slice(rows.row(i));
        data.extend_from_slice(embedding);
    }
    Tensor::new(vec![n, FUSED_WIDTH], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceExample {
    /// `enc_len x p`
    pub x_e: Tensor,
    /// `dec_len x 2`, zero start token followed by shifted targets.
    pub y_d: Tensor,
    /// `dec_len x 2`
    pub y_out: Tensor,
    /// Window offset in the (down-sampled) series.
    pub start: usize,
    /// Position the targets are expressed relative to.
    pub anchor: Vec2,
}

/// `[0; y_out[0..n-1]]`
pub fn teacher_forcing_input(y_out: &Tensor) -> Tensor {
    let w = y_out.last_dim();
    let n = y_out.numel();
    let mut data = vec![0.0; n];
    if n > w {
        data[w..].copy_from_slice(&y_out.data()[..n - w]);
    }
    Tensor::new(y_out.shape().to_vec(), data).expect("same shape")
}

impl SequenceExample {
    /// Re-expresses the targets as displacement from `anchor`.
    pub fn anchor_to(&mut self, anchor: Vec2) {
        for r in self.y_out.data_mut().chunks_mut(2) {
            r[0] -= anchor[0] - self.anchor[0];
            r[1] -= anchor[1] - self.anchor[1];
        }
        self.anchor = anchor;
        self.y_d = teacher_forcing_input(&self.y_out);
    }

    pub fn enc_len(&self) -> usize {
        self.x_e.shape()[0]
    }

    pub fn dec_len(&self) -> usize {
        self.y_out.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.x_e.last_dim()
    }
}

/// All `T - (enc_len + dec_len) + 1` windows of a single series.
pub fn make_windows(x: &Tensor, y: &Tensor, enc_len: usize, dec_len: usize) -> Result<Vec<SequenceExample>> {
    if x.shape().len() != 2 || y.shape().len() != 2 || y.shape()[1] != 2 || x.shape()[0] != y.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "make_windows",
            left: x.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    if enc_len == 0 || dec_len == 0 {
        return Err(Error::invalid("window lengths must be positive"));
    }
    let t = x.shape()[0];
    let p = x.shape()[1];
    if t < enc_len + dec_len {
        return Err(Error::invalid(format!(
            "series of length {t} is shorter than the {} steps a window needs",
            enc_len + dec_len
        )));
    }
    let count = t - (enc_len + dec_len) + 1;
    (0..count)
        .map(|i| {
            let x_e = Tensor::new(vec![enc_len, p], x.data()[i * p..(i + enc_len) * p].to_vec())?;
            let lo = (i + enc_len) * 2;
            let y_out = Tensor::new(vec![dec_len, 2], y.data()[lo..lo + dec_len * 2].to_vec())?;
            Ok(SequenceExample {
                y_d: teacher_forcing_input(&y_out),
                x_e,
                y_out,
                start: i,
                anchor: [0.0, 0.0],
            })
        })
        .collect()
}

/// Appends one copy of every example with the first `numeric_cols`
/// feature columns scaled by independent `Uniform[1-f, 1+f]` factors.
/// Remaining columns and targets are copied unchanged.
pub fn augment_noise(
    examples: &[SequenceExample],
    factor: f64,
    numeric_cols: usize,
    seed: u64,
) -> Result<Vec<SequenceExample>> {
    if !(0.0..1.0).contains(&factor) {
        return Err(Error::invalid(format!("augmentation factor {factor} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = examples.to_vec();
    for ex in examples {
        let mut noisy = ex.clone();
        let p = noisy.width();
        let cols = numeric_cols.min(p);
        for row in noisy.x_e.data_mut().chunks_mut(p) {
            for v in &mut row[..cols] {
                let m = if factor > 0.0 { rng.random_range(1.0 - factor..=1.0 + factor) } else { 1.0 };
                *v *= m;
            }
        }
        out.push(noisy);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<SequenceExample>,
    pub test: Vec<SequenceExample>,
}

/// Training gets every other object plus the first half (chronological)
/// of the held-out object's windows; the test set is the second half.
pub fn holdout_split(per_object: &[(String, Vec<SequenceExample>)], test_id: &str) -> Result<Split> {
    if per_object.len() < 2 {
        return Err(Error::invalid("holdout needs at least two objects"));
    }
    if !per_object.iter().any(|(id, _)| id == test_id) {
        return Err(Error::UnknownObject(test_id.to_string()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (id, examples) in per_object {
        if id == test_id {
            let mut sorted = examples.clone();
            sorted.sort_by_key(|e| e.start);
            let half = sorted.len() / 2;
            test.extend(sorted.split_off(half));
            train.extend(sorted);
        } else {
            train.extend(examples.iter().cloned());
        }
    }
    Ok(Split { train, test })
}

/// Per-column mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub fn is_fitted(&self) -> bool {
        !self.mean.is_empty()
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    /// Population statistics over the rows of a flat row-major buffer;
    /// standard deviations are floored at 1e-8.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut buffered: Vec<&[f64]> = Vec::new();
        for r in rows {
            if sum.is_empty() {
                sum = vec![0.0; r.len()];
            } else if r.len() != sum.len() {
                return Err(Error::Dimension { row: n, expected: sum.len(), found: r.len() });
            }
            sum.iter_mut().zip(r).for_each(|(s, x)| *s += x);
            buffered.push(r);
            n += 1;
        }
        if n == 0 || sum.is_empty() {
            return Err(Error::invalid("cannot fit a standardizer on no data"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0; mean.len()];
        for r in buffered {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Standardizer { mean, std })
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if !self.is_fitted() {
            return Err(Error::NotFitted("standardizer"));
        }
        if t.last_dim() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "standardize",
                left: t.shape().to_vec(),
                right: vec![self.mean.len()],
            });
        }
        Ok(())
    }

    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(self.mean.len()) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        Ok(out)
    }

    pub fn invert(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(self.mean.len()) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = *x * s + m;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub t_h: usize,
    pub enc_len: usize,
    pub dec_len: usize,
    /// Append the 384-d description embedding to every row.
    pub fuse_text: bool,
    /// Express targets relative to the last observed position.
    pub anchor_targets: bool,
    /// Multiplicative augmentation half-width; 0 disables it.
    pub augment_factor: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            t_h: 1,
            enc_len: 10,
            dec_len: 10,
            fuse_text: true,
            anchor_targets: true,
            augment_factor: 0.05,
            seed: 0,
        }
    }
}

/// One holdout fold, standardized and ready for training.
#[derive(Debug, Clone)]
pub struct Fold {
    pub test_object: String,
    pub config: PipelineConfig,
    pub train: Vec<SequenceExample>,
    pub test: Vec<SequenceExample>,
    pub x_scaler: Standardizer,
    pub y_scaler: Standardizer,
    /// Down-sampled series per object, in input order.
    pub series: Vec<ObjectSeries>,
}

impl Fold {
    /// Absolute positions (m) for standardized anchored targets.
    pub fn to_positions(&self, example: &SequenceExample, y_std: &Tensor) -> Result<Tensor> {
        let mut y = self.y_scaler.invert(y_std)?;
        for r in y.data_mut().chunks_mut(2) {
            r[0] += example.anchor[0];
            r[1] += example.anchor[1];
        }
        Ok(y)
    }

    pub fn test_series(&self) -> &ObjectSeries {
        self.series
            .iter()
            .find(|s| s.object.id == self.test_object)
            .expect("test object is part of the fold")
    }
}

/// Windows of one object, before scaling.
pub fn object_windows(
    series: &ObjectSeries,
    encoder: Option<&dyn TextEncoder>,
    cfg: &PipelineConfig,
) -> Result<Vec<SequenceExample>> {
    let mut x = series.features()?;
    if let Some(enc) = encoder {
        let e = enc.encode(&series.object.id, &series.object.description)?;
        x = fuse_embedding(&x, &e.vector)?;
    }
    let y = series.targets();
    let mut windows = make_windows(&x, &y, cfg.enc_len, cfg.dec_len)?;
    if cfg.anchor_targets {
        for w in &mut windows {
            w.anchor_to(series.drift[w.start + cfg.enc_len - 1]);
        }
    }
    Ok(windows)
}

/// Down-sample, window, split on `test_object`, augment the training
/// part, then fit both standardizers on training data only.
pub fn prepare_fold(
    objects: &[ObjectSeries],
    encoder: &dyn TextEncoder,
    cfg: &PipelineConfig,
    test_object: &str,
) -> Result<Fold> {
    let series: Vec<ObjectSeries> = objects.iter().map(|s| s.downsample(cfg.t_h)).collect::<Result<_>>()?;
    let per_object = series
        .iter()
        .map(|s| {
            let enc = cfg.fuse_text.then_some(encoder);
            Ok((s.object.id.clone(), object_windows(s, enc, cfg)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let Split { mut train, test } = holdout_split(&per_object, test_object)?;
    if cfg.augment_factor > 0.0 {
        train = augment_noise(&train, cfg.augment_factor, NUM_FEATURES, cfg.seed)?;
    }
    let x_scaler = Standardizer::fit(train.iter().flat_map(|e| e.x_e.data().chunks(e.width())))?;
    let y_scaler = Standardizer::fit(train.iter().flat_map(|e| e.y_out.data().chunks(2)))?;
    let scale = |examples: Vec<SequenceExample>| -> Result<Vec<SequenceExample>> {
        examples
            .into_iter()
            .map(|mut e| {
                e.x_e = x_scaler.apply(&e.x_e)?;
                e.y_out = y_scaler.apply(&e.y_out)?;
                e.y_d = teacher_forcing_input(&e.y_out);
                Ok(e)
            })
            .collect()
    };
    Ok(Fold {
        test_object: test_object.to_string(),
        config: cfg.clone(),
        train: scale(train)?,
        test: scale(test)?,
        x_scaler,
        y_scaler,
        series,
    })
}

#[derive(Serialize)]
struct DumpRow<'a> {
    split: &'a str,
    start: usize,
    anchor: Vec2,
    enc_len: usize,
    width: usize,
    x_e: &'a [f64],
    y_d: &'a [f64],
    y_out: &'a [f64],
}

/// JSON lines, one flattened example per line, train before test.
pub fn write_fold_jsonl<W: Write>(fold: &Fold, mut out: W) -> Result<()> {
    for (split, examples) in [("train", &fold.train), ("test", &fold.test)] {
        for e in examples {
            let row = DumpRow {
                split,
                start: e.start,
                anchor: e.anchor,
                enc_len: e.enc_len(),
                width: e.width(),
                x_e: e.x_e.data(),
                y_d: e.y_d.data(),
                y_out: e.y_out.data(),
            };
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize, p: usize) -> (Tensor, Tensor) {
        let x = Tensor::new(vec![t, p], (0..t * p).map(|i| i as f64).collect()).unwrap();
        let y = Tensor::new(vec![t, 2], (0..t * 2).map(|i| i as f64 * 0.5).collect()).unwrap();
        (x, y)
    }

    #[test]
    fn downsample_examples() {
        let rows: Vec<usize> = (0..10).collect();
        assert_eq!(downsample(&rows, 1).unwrap(), rows);
        assert_eq!(downsample(&rows, 3).unwrap(), vec![0, 3, 6, 9]);
        assert!(downsample(&rows, 0).is_err());
    }

    #[test]
    fn window_boundaries() {
        let (x, y) = ramp(20, 3);
        let w = make_windows(&x, &y, 10, 10).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].y_out.row(0), &[20.0 * 0.5, 21.0 * 0.5]);
        let (x, y) = ramp(19, 3);
        assert!(make_windows(&x, &y, 10, 10).is_err());
    }

    #[test]
    fn anchoring_shifts_targets() {
        let (x, y) = ramp(12, 1);
        let mut w = make_windows(&x, &y, 4, 3).unwrap().remove(2);
        // window 2: encoder rows 2..6, targets rows 6..9, anchor row 5
        w.anchor_to([5.0, 5.5]);
        assert_eq!(w.y_out.data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert_eq!(w.y_d.data(), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn standardizer_requires_fit() {
        let s = Standardizer::default();
        assert!(matches!(s.apply(&Tensor::zeros(&[2, 2])), Err(Error::NotFitted(_))));
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let rows = [vec![3.0, 1.0], vec![3.0, 2.0], vec![3.0, 6.0]];
        let s = Standardizer::fit(rows.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(s.std()[0], 1e-8);
        let t = s.apply(&Tensor::from_rows(&rows).unwrap()).unwrap();
        assert!(t.data().iter().step_by(2).all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_rejects_bad_width() {
        assert!(fuse_embedding(&Tensor::zeros(&[3, 15]), &[0.0; 10]).is_err());
        assert!(fuse_embedding(&Tensor::zeros(&[3, 14]), &[0.0; 384]).is_err());
    }
}
