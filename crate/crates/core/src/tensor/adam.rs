use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update. Clears the gradient afterwards.
pub fn adam_step(param: &mut Tensor, state: &mut AdamState) -> Result<()> {
    let grad = param
        .take_grad()
        .ok_or_else(|| Error::MissingGradient(format!("{:?}", param.shape())))?;
    if state.m.len() != param.numel() || state.v.len() != param.numel() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            left: param.shape().to_vec(),
            right: vec![state.m.len()],
        });
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(&grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors plus their optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    pub(crate) states: Vec<AdamState>,
    trained: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.states
            .push(AdamState::new(tensor.numel(), AdamConfig::default()));
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.clear_grad();
        }
    }

    pub fn set_optimizer(&mut self, config: AdamConfig) {
        for (s, t) in self.states.iter_mut().zip(&self.tensors) {
            *s = AdamState::new(t.numel(), config);
        }
    }

    /// Changes the step size and keeps the moment estimates.
    pub fn set_learning_rate(&mut self, learning_rate: f64) {
        for s in &mut self.states {
            s.config.learning_rate = learning_rate;
        }
    }

    /// Applies Adam to every parameter that received a gradient.
    pub fn step(&mut self) -> Result<()> {
        for (t, s) in self.tensors.iter_mut().zip(self.states.iter_mut()) {
            if t.grad().is_some() {
                adam_step(t, s)?;
            }
        }
        Ok(())
    }

    /// Copies values only (no optimizer state), used to restore the best
    /// early-stopping checkpoint.
    pub fn values(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.data().to_vec()).collect()
    }

    pub fn load_values(&mut self, values: &[Vec<f64>]) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                values.len()
            )));
        }
        for (t, v) in self.tensors.iter_mut().zip(values) {
            if v.len() != t.numel() {
                return Err(Error::ShapeMismatch {
                    op: "load_values",
                    left: t.shape().to_vec(),
                    right: vec![v.len()],
                });
            }
            t.data_mut().copy_from_slice(v);
        }
        Ok(())
    }

    /// Replaces a tensor by name, checking the shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self.id_of(name).ok_or_else(|| Error::invalid(format!("no parameter `{name}`")))?;
        if self.tensors[id.0].shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "set",
                left: self.tensors[id.0].shape().to_vec(),
                right: tensor.shape().to_vec(),
            });
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }
}
