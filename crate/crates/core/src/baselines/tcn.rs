//! Dilated causal convolutions with batch normalization, predicting the
//! next displacement from the last time step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BatchStats, RunningStat, StepArch};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var, BATCH_NORM_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcnConfig {
    pub filters: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    /// Weight of the old running statistics in each update.
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig { filters: 64, kernel: 11, dilations: vec![32, 16, 8], momentum: 0.9, seed: 0 }
    }
}

/// Convolution without bias: batch norm removes any per-channel offset and
/// `beta` supplies it again.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub w: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dilation: usize,
}

#[derive(Debug, Clone)]
pub struct TcnArch {
    config: TcnConfig,
    pub blocks: Vec<ConvBlock>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl TcnArch {
    /// Per-position features `[B, T, F]`. In training mode batch norm uses
    /// the batch statistics and reports them; otherwise the running ones.
    pub fn sequence(&self, g: &mut Graph, store: &ParamStore, x: Var, training: bool) -> Result<(Var, BatchStats)> {
        let mut stats = Vec::new();
        let mut x = x;
        for blk in &self.blocks {
            let patches = g.causal_unfold(x, self.config.kernel, blk.dilation)?;
            let w = g.param(store, blk.w);
            let z = g.matmul(patches, w)?;
            let n = if training {
                let (n, mean, var) = g.batch_norm(z);
                stats.push(RunningStat {
                    mean_id: blk.running_mean,
                    var_id: blk.running_var,
                    mean,
                    var,
                    momentum: self.config.momentum,
                });
                n
            } else {
                let neg: Vec<f64> = store.get(blk.running_mean).data().iter().map(|m| -m).collect();
                let inv_std: Vec<f64> =
                    store.get(blk.running_var).data().iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
                let shift = g.constant(Tensor::new(vec![neg.len()], neg)?);
                let scale = g.constant(Tensor::new(vec![inv_std.len()], inv_std)?);
                let c = g.add(z, shift)?;
                g.mul(c, scale)?
            };
            let gamma = g.param(store, blk.gamma);
            let beta = g.param(store, blk.beta);
            let y = g.mul(n, gamma)?;
            let y = g.add(y, beta)?;
            x = g.relu(y);
        }
        Ok((x, stats))
    }
}

impl StepArch for TcnArch {
    type Config = TcnConfig;

    const KIND: &'static str = "tcn";

    fn build(config: &TcnConfig, input_cols: usize, store: &mut ParamStore) -> Result<Self> {
        if config.filters == 0 || config.kernel == 0 || config.dilations.is_empty() || config.dilations.contains(&0) {
            return Err(Error::invalid("TCN needs positive filters, kernel and dilations"));
        }
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", config.momentum)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (f, k) = (config.filters, config.kernel);
        let mut channels = input_cols;
        let mut blocks = Vec::new();
        for (i, &dilation) in config.dilations.iter().enumerate() {
            let name = format!("conv{}", i + 1);
            let fan_in = k * channels;
            blocks.push(ConvBlock {
                w: store.add(format!("{name}.w"), Tensor::he_normal(&[fan_in, f], fan_in, &mut rng)),
                gamma: store.add(format!("{name}.gamma"), Tensor::full(&[f], 1.0)),
                beta: store.add(format!("{name}.beta"), Tensor::zeros(&[f])),
                running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[f])),
                running_var: store.add(format!("{name}.running_var"), Tensor::full(&[f], 1.0)),
                dilation,
            });
            channels = f;
        }
        let head_w = store.add("head.w", Tensor::he_normal(&[f, 2], f, &mut rng));
        let head_b = store.add("head.b", Tensor::zeros(&[2]));
        Ok(TcnArch { config: config.clone(), blocks, head_w, head_b })
    }

    fn config(&self) -> &TcnConfig {
        &self.config
    }

    fn seed(&self) -> u64 {
        self.config.seed
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, training: bool) -> Result<(Var, BatchStats)> {
        let (seq, stats) = self.sequence(g, store, x, training)?;
        let last = g.shape(seq)[1] - 1;
        let h = g.select_step(seq, last)?;
        let w = g.param(store, self.head_w);
        let b = g.param(store, self.head_b);
        let y = g.matmul(h, w)?;
        Ok((g.add(y, b)?, stats))
    }
}
