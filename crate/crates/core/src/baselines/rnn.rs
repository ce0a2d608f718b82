//! Stacked Elman network predicting the next displacement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BatchStats, StepArch};
use crate::error::{Error, Result};
use crate::models::layers::{Dense, InputProjection};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RnnConfig {
    pub units: Vec<usize>,
    pub seed: u64,
}

impl Default for RnnConfig {
    fn default() -> Self {
        RnnConfig { units: vec![128, 64], seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct RnnLayer {
    pub input: InputProjection,
    pub u: ParamId,
    pub units: usize,
}

#[derive(Debug, Clone)]
pub struct RnnArch {
    config: RnnConfig,
    pub layers: Vec<RnnLayer>,
    pub head: Dense,
}

impl RnnArch {
    /// Hidden states of the last layer, `[B, T, H]`.
    pub fn states(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (b, steps) = (g.shape(x)[0], g.shape(x)[1]);
        let mut x = x;
        for layer in &self.layers {
            let pre = layer.input.forward_var(g, store, x)?;
            let u = g.param(store, layer.u);
            let mut h = g.constant(Tensor::zeros(&[b, layer.units]));
            let mut hs = Vec::with_capacity(steps);
            for t in 0..steps {
                let p = g.select_step(pre, t)?;
                let r = g.matmul(h, u)?;
                let z = g.add(p, r)?;
                h = g.tanh(z);
                hs.push(h);
            }
            x = g.stack_steps(&hs)?;
        }
        Ok(x)
    }
}

impl StepArch for RnnArch {
    type Config = RnnConfig;

    const KIND: &'static str = "rnn";

    fn build(config: &RnnConfig, input_cols: usize, store: &mut ParamStore) -> Result<Self> {
        if config.units.is_empty() || config.units.contains(&0) {
            return Err(Error::invalid("RNN needs at least one non-empty layer"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut width = input_cols;
        let mut layers = Vec::new();
        for (i, &units) in config.units.iter().enumerate() {
            let name = format!("rnn{}", i + 1);
            let input = InputProjection::new(store, &name, width, 0, units, &mut rng);
            let u = store.add(format!("{name}.u"), Tensor::glorot(units, units, &mut rng));
            layers.push(RnnLayer { input, u, units });
            width = units;
        }
        let head = Dense::new(store, "head", width, 2, true, &mut rng);
        Ok(RnnArch { config: config.clone(), layers, head })
    }

    fn config(&self) -> &RnnConfig {
        &self.config
    }

    fn seed(&self) -> u64 {
        self.config.seed
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, _training: bool) -> Result<(Var, BatchStats)> {
        let hs = self.states(g, store, x)?;
        let last = g.shape(hs)[1] - 1;
        let h = g.select_step(hs, last)?;
        Ok((self.head.forward(g, store, h)?, Vec::new()))
    }
}
