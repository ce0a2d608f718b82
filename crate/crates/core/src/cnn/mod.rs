//! Lightweight CNN estimating `(C_D, C_L)` from a grayscale silhouette.
//!
//! Each stage is a valid convolution with ReLU followed by 2x2 max
//! pooling; the flattened map feeds a ReLU dense layer and a linear
//! two-unit output.

pub mod corpus;
pub mod shapes;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::layers::Dense;
use crate::physics::ObjectSpec;
use crate::snapshot::Snapshot;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::train::{fit, History, Objective, TrainConfig};

pub const KIND: &str = "cnn";
const PREDICT_CHUNK: usize = 64;

/// Row-major grayscale pixels in [0, 1] with an optional `(C_D, C_L)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub label: Option<[f64; 2]>,
}

impl GeometryImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, label: Option<[f64; 2]>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Dimension { row: 0, expected: height * width, found: pixels.len() });
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(GeometryImage { height, width, pixels, label })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub dense: usize,
    pub seed: u64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig { image_size: 128, channels: vec![64, 32, 32], kernels: vec![5, 3, 3], dense: 32, seed: 0 }
    }
}

impl CnnConfig {
    /// 16x16 miniature used for gradient checks.
    pub fn mini(seed: u64) -> Self {
        CnnConfig { image_size: 16, channels: vec![3, 2, 2], kernels: vec![3, 2, 2], dense: 3, seed }
    }

    /// `[H, W, C]` after every convolution and every pooling, starting
    /// with the input.
    pub fn trace(&self) -> Result<Vec<[usize; 3]>> {
        if self.channels.len() != self.kernels.len() || self.channels.is_empty() {
            return Err(Error::invalid("need one kernel size per convolution stage"));
        }
        let mut s = self.image_size;
        let mut out = vec![[s, s, 1]];
        for (&c, &k) in self.channels.iter().zip(&self.kernels) {
            if k == 0 || c == 0 || s < k || (s - k + 1) < 2 {
                return Err(Error::invalid(format!(
                    "a {k}x{k} convolution and 2x2 pooling do not fit a {s}x{s} map"
                )));
            }
            s = s - k + 1;
            out.push([s, s, c]);
            s /= 2;
            out.push([s, s, c]);
        }
        Ok(out)
    }

    pub fn flat_len(&self) -> Result<usize> {
        let last = *self.trace()?.last().expect("trace starts with the input");
        Ok(last.iter().product())
    }
}

#[derive(Debug, Clone)]
pub struct ConvStage {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
}

#[derive(Debug, Clone)]
pub struct CnnArch {
    config: CnnConfig,
    pub stages: Vec<ConvStage>,
    pub hidden: Dense,
    pub output: Dense,
}

impl CnnArch {
    pub fn build(config: &CnnConfig, store: &mut ParamStore) -> Result<Self> {
        let flat = config.flat_len()?;
        if config.dense == 0 {
            return Err(Error::invalid("dense layer needs at least one unit"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut cin = 1;
        let mut stages = Vec::new();
        for (i, (&c, &k)) in config.channels.iter().zip(&config.kernels).enumerate() {
            let fan_in = k * k * cin;
            stages.push(ConvStage {
                w: store.add(format!("conv{}.w", i + 1), Tensor::he_normal(&[fan_in, c], fan_in, &mut rng)),
                b: store.add(format!("conv{}.b", i + 1), Tensor::zeros(&[c])),
                kernel: k,
            });
            cin = c;
        }
        let hidden = Dense::new(store, "dense", flat, config.dense, true, &mut rng);
        let output = Dense::new(store, "out", config.dense, 2, true, &mut rng);
        Ok(CnnArch { config: config.clone(), stages, hidden, output })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    /// `[B, H, W, 1]` input for equally sized images.
    pub fn batch(&self, images: &[&GeometryImage]) -> Result<Tensor> {
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * s * s);
        for img in images {
            if img.height != s || img.width != s {
                return Err(Error::ShapeMismatch {
                    op: "cnn input",
                    left: vec![s, s],
                    right: vec![img.height, img.width],
                });
            }
            data.extend_from_slice(&img.pixels);
        }
        Tensor::new(vec![images.len(), s, s, 1], data)
    }

    /// `[B, 2]` coefficient estimates.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut x = x;
        for st in &self.stages {
            let patches = g.unfold2d(x, st.kernel, st.kernel)?;
            let w = g.param(store, st.w);
            let b = g.param(store, st.b);
            let z = g.matmul(patches, w)?;
            let z = g.add(z, b)?;
            let a = g.relu(z);
            x = g.maxpool2(a)?;
        }
        let b = g.shape(x)[0];
        let flat = g.reshape(x, &[b, self.config.flat_len()?])?;
        let h = self.hidden.forward(g, store, flat)?;
        let h = g.relu(h);
        self.output.forward(g, store, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnnScores {
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone)]
pub struct CnnModel {
    pub arch: CnnArch,
    pub store: ParamStore,
}

struct CnnObjective<'a> {
    arch: &'a CnnArch,
    images: &'a [&'a GeometryImage],
}

fn labels(images: &[&GeometryImage]) -> Result<Tensor> {
    let mut y = Vec::with_capacity(images.len() * 2);
    for (i, img) in images.iter().enumerate() {
        y.extend(img.label.ok_or_else(|| Error::invalid(format!("image {i} has no label")))?);
    }
    Tensor::new(vec![images.len(), 2], y)
}

impl Objective for CnnObjective<'_> {
    fn loss(&self, g: &mut Graph, store: &ParamStore, idx: &[usize], _training: bool) -> Result<Var> {
        let picked: Vec<&GeometryImage> = idx.iter().map(|&i| self.images[i]).collect();
        let x = g.constant(self.arch.batch(&picked)?);
        let y = g.constant(labels(&picked)?);
        let p = self.arch.forward(g, store, x)?;
        g.mse(p, y)
    }
}

impl CnnModel {
    pub fn new(config: &CnnConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = CnnArch::build(config, &mut store)?;
        Ok(CnnModel { arch, store })
    }

    /// Batch 32, Adam at 1e-3, up to 200 epochs, patience 30, 10% held out.
    pub fn default_training(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 30,
            val_fraction: 0.1,
            seed,
            ..Default::default()
        }
    }

    /// MSE training on labelled images with early stopping.
    pub fn fit(&mut self, images: &[&GeometryImage], cfg: &TrainConfig) -> Result<History> {
        if images.is_empty() {
            return Err(Error::invalid("empty image set"));
        }
        labels(images)?;
        let obj = CnnObjective { arch: &self.arch, images };
        fit(&mut self.store, images.len(), &obj, cfg)
    }

    /// Raw network outputs, `(C_D, C_L)` per image.
    pub fn predict(&self, images: &[&GeometryImage]) -> Result<Vec<[f64; 2]>> {
        if !self.store.is_trained() {
            return Err(Error::Untrained(KIND));
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(PREDICT_CHUNK) {
            let mut g = Graph::new();
            let x = g.constant(self.arch.batch(chunk)?);
            let p = self.arch.forward(&mut g, &self.store, x)?;
            out.extend(g.value(p).data().chunks(2).map(|r| [r[0], r[1]]));
        }
        Ok(out)
    }

    pub fn evaluate(&self, images: &[&GeometryImage]) -> Result<CnnScores> {
        let pred = self.predict(images)?;
        let truth = labels(images)?;
        let n = truth.numel() as f64;
        let (mut se, mut ae) = (0.0, 0.0);
        for (p, y) in pred.iter().flatten().zip(truth.data()) {
            se += (p - y) * (p - y);
            ae += (p - y).abs();
        }
        Ok(CnnScores { mse: se / n, mae: ae / n })
    }

    /// Physical estimates for object silhouettes: outputs clamped at zero.
    pub fn estimate_coefficients(&self, images: &[&GeometryImage]) -> Result<Vec<[f64; 2]>> {
        Ok(self.predict(images)?.into_iter().map(|p| [p[0].max(0.0), p[1].max(0.0)]).collect())
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        let cfg = self.arch.config();
        Snapshot::capture(KIND, cfg.seed, cfg, &self.store, serde_json::Value::Null)
    }

    pub fn from_snapshot(snap: &Snapshot) -> Result<Self> {
        if snap.model != KIND {
            return Err(Error::invalid(format!("snapshot holds a `{}`, not a `{KIND}`", snap.model)));
        }
        let config: CnnConfig = serde_json::from_value(snap.config.clone())?;
        let mut model = Self::new(&config)?;
        snap.restore(&mut model.store)?;
        Ok(model)
    }
}

/// Writes estimated coefficients into the catalog entry with the same id;
/// the pair is used for both air and water.
pub fn apply_coefficients(catalog: &mut [ObjectSpec], estimates: &[(String, [f64; 2])]) -> Result<()> {
    for (id, [cd, cl]) in estimates {
        let obj = catalog.iter_mut().find(|o| &o.id == id).ok_or_else(|| Error::UnknownObject(id.clone()))?;
        if !(cd.is_finite() && cl.is_finite()) {
            return Err(Error::NonFinite(format!("coefficients for {id}")));
        }
        obj.c_d_air = *cd;
        obj.c_d_water = *cd;
        obj.c_l_air = *cl;
        obj.c_l_water = *cl;
    }
    Ok(())
}
