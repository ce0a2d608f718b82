//! Sequence-to-sequence forecasters and the batching they share.

pub mod layers;
pub mod lstm;
pub mod transformer;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::SequenceExample;
use crate::error::{Error, Result};
use crate::snapshot::Snapshot;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::train::{fit, History, Objective, TrainConfig};

pub use lstm::{LstmArch, LstmConfig, LstmModel};
pub use transformer::{TransformerArch, TransformerConfig, TransformerModel};

/// Column layout of encoder rows: `dyn_cols` time-varying features
/// followed by `static_cols` columns that repeat on every row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub dyn_cols: usize,
    pub static_cols: usize,
}

impl InputLayout {
    pub fn new(dyn_cols: usize, static_cols: usize) -> Self {
        InputLayout { dyn_cols, static_cols }
    }

    pub fn width(&self) -> usize {
        self.dyn_cols + self.static_cols
    }
}

/// Encoder input for a batch: `x_dyn` is `[B, T, dyn]`, `x_static` is
/// `[B, static]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqInput {
    pub x_dyn: Tensor,
    pub x_static: Option<Tensor>,
}

impl SeqInput {
    pub fn batch(&self) -> usize {
        self.x_dyn.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.x_dyn.shape()[1]
    }

    pub fn dyn_cols(&self) -> usize {
        self.x_dyn.shape()[2]
    }

    pub fn static_cols(&self) -> usize {
        self.x_static.as_ref().map_or(0, |s| s.shape()[1])
    }

    /// Splits `enc_len x width` matrices according to `layout`. Static
    /// columns must be identical on every row of a sequence.
    pub fn gather(xs: &[&Tensor], layout: InputLayout) -> Result<SeqInput> {
        let first = xs.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let steps = first.shape()[0];
        let w = layout.width();
        let mut dyn_data = Vec::with_capacity(xs.len() * steps * layout.dyn_cols);
        let mut static_data = Vec::with_capacity(xs.len() * layout.static_cols);
        for x in xs {
            if x.shape() != [steps, w] {
                return Err(Error::ShapeMismatch {
                    op: "gather",
                    left: vec![steps, w],
                    right: x.shape().to_vec(),
                });
            }
            for r in 0..steps {
                let row = x.row(r);
                dyn_data.extend_from_slice(&row[..layout.dyn_cols]);
                if r > 0 && row[layout.dyn_cols..] != x.row(0)[layout.dyn_cols..] {
                    return Err(Error::invalid(format!("static columns change at step {r}")));
                }
            }
            static_data.extend_from_slice(&x.row(0)[layout.dyn_cols..]);
        }
        Ok(SeqInput {
            x_dyn: Tensor::new(vec![xs.len(), steps, layout.dyn_cols], dyn_data)?,
            x_static: (layout.static_cols > 0)
                .then(|| Tensor::new(vec![xs.len(), layout.static_cols], static_data))
                .transpose()?,
        })
    }
}

/// A gathered training batch.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    pub input: SeqInput,
    /// `[B, dec_len, 2]`
    pub y_d: Tensor,
    /// `[B, dec_len, 2]`
    pub y_out: Tensor,
}

fn stack(ts: &[&Tensor]) -> Result<Tensor> {
    let first = ts.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let mut data = Vec::with_capacity(ts.len() * first.numel());
    for t in ts {
        if t.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "stack",
                left: first.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![ts.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

impl SeqBatch {
    pub fn gather(examples: &[&SequenceExample], layout: InputLayout) -> Result<SeqBatch> {
        let xs: Vec<&Tensor> = examples.iter().map(|e| &e.x_e).collect();
        let yd: Vec<&Tensor> = examples.iter().map(|e| &e.y_d).collect();
        let yo: Vec<&Tensor> = examples.iter().map(|e| &e.y_out).collect();
        Ok(SeqBatch {
            input: SeqInput::gather(&xs, layout)?,
            y_d: stack(&yd)?,
            y_out: stack(&yo)?,
        })
    }
}

/// Splits a `[B, U, 2]` prediction tensor into per-example `U x 2`.
pub fn unstack(t: &Tensor) -> Vec<Tensor> {
    let s = t.shape();
    let per = s[1..].iter().product::<usize>();
    t.data()
        .chunks(per)
        .map(|c| Tensor::new(s[1..].to_vec(), c.to_vec()).expect("consistent shape"))
        .collect()
}

/// Architecture of a sequence model, kept apart from its parameters so a
/// trainer can borrow both at once.
pub trait SeqArch: Sized {
    type Config: Serialize + DeserializeOwned + Clone + PartialEq + std::fmt::Debug;

    const KIND: &'static str;

    fn build(config: &Self::Config, layout: InputLayout, store: &mut ParamStore) -> Result<Self>;

    fn config(&self) -> &Self::Config;

    fn layout(&self) -> InputLayout;

    fn seed(&self) -> u64;

    /// Predictions `[B, dec_len, 2]` given the ground-truth decoder input.
    fn teacher_forced(&self, g: &mut Graph, store: &ParamStore, batch: &SeqBatch) -> Result<Var>;

    /// Autoregressive predictions `[B, dec_len, 2]` starting from a zero token.
    fn generate(&self, store: &ParamStore, input: &SeqInput, dec_len: usize) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct SeqModel<A: SeqArch> {
    pub arch: A,
    pub store: ParamStore,
}

const PREDICT_CHUNK: usize = 256;

struct SeqObjective<'a, A: SeqArch> {
    arch: &'a A,
    examples: &'a [SequenceExample],
}

impl<A: SeqArch> Objective for SeqObjective<'_, A> {
    fn loss(&self, g: &mut Graph, store: &ParamStore, idx: &[usize], _training: bool) -> Result<Var> {
        let picked: Vec<&SequenceExample> = idx.iter().map(|&i| &self.examples[i]).collect();
        let batch = SeqBatch::gather(&picked, self.arch.layout())?;
        let pred = self.arch.teacher_forced(g, store, &batch)?;
        let target = g.constant(batch.y_out);
        g.mse(pred, target)
    }
}

impl<A: SeqArch> SeqModel<A> {
    pub fn new(config: &A::Config, layout: InputLayout) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = A::build(config, layout, &mut store)?;
        Ok(SeqModel { arch, store })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Teacher-forced MSE training with early stopping.
    pub fn fit(&mut self, train: &[SequenceExample], cfg: &TrainConfig) -> Result<History> {
        if train.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let obj = SeqObjective { arch: &self.arch, examples: train };
        fit(&mut self.store, train.len(), &obj, cfg)
    }

    /// Mean teacher-forced MSE over `examples` in standardized units.
    pub fn loss(&self, examples: &[SequenceExample]) -> Result<f64> {
        let obj = SeqObjective { arch: &self.arch, examples };
        let idx: Vec<usize> = (0..examples.len()).collect();
        let mut total = 0.0;
        for chunk in idx.chunks(PREDICT_CHUNK) {
            let mut g = Graph::new();
            let l = obj.loss(&mut g, &self.store, chunk, false)?;
            total += g.value(l).data()[0] * chunk.len() as f64;
        }
        Ok(total / examples.len().max(1) as f64)
    }

    fn check_trained(&self) -> Result<()> {
        if self.store.is_trained() {
            Ok(())
        } else {
            Err(Error::Untrained(A::KIND))
        }
    }

    /// Autoregressive `dec_len x 2` forecast for one `enc_len x p` input.
    pub fn forecast(&self, x_e: &Tensor, dec_len: usize) -> Result<Tensor> {
        self.check_trained()?;
        let input = SeqInput::gather(&[x_e], self.arch.layout())?;
        let out = self.arch.generate(&self.store, &input, dec_len)?;
        Ok(unstack(&out).remove(0))
    }

    pub fn forecast_all(&self, examples: &[SequenceExample]) -> Result<Vec<Tensor>> {
        self.check_trained()?;
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(PREDICT_CHUNK) {
            let xs: Vec<&Tensor> = chunk.iter().map(|e| &e.x_e).collect();
            let input = SeqInput::gather(&xs, self.arch.layout())?;
            let dec_len = chunk[0].dec_len();
            out.extend(unstack(&self.arch.generate(&self.store, &input, dec_len)?));
        }
        Ok(out)
    }

    /// Diagnostic decode fed with the ground-truth decoder inputs.
    pub fn teacher_forced_all(&self, examples: &[SequenceExample]) -> Result<Vec<Tensor>> {
        self.check_trained()?;
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(PREDICT_CHUNK) {
            let refs: Vec<&SequenceExample> = chunk.iter().collect();
            let batch = SeqBatch::gather(&refs, self.arch.layout())?;
            let mut g = Graph::new();
            let p = self.arch.teacher_forced(&mut g, &self.store, &batch)?;
            out.extend(unstack(g.value(p)));
        }
        Ok(out)
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        Snapshot::capture(A::KIND, self.arch.seed(), self.arch.config(), &self.store, serde_json::to_value(self.arch.layout())?)
    }

    pub fn from_snapshot(snap: &Snapshot) -> Result<Self> {
        if snap.model != A::KIND {
            return Err(Error::invalid(format!("snapshot holds a `{}`, not a `{}`", snap.model, A::KIND)));
        }
        let config: A::Config = serde_json::from_value(snap.config.clone())?;
        let layout: InputLayout = serde_json::from_value(snap.extra.clone())?;
        let mut model = Self::new(&config, layout)?;
        snap.restore(&mut model.store)?;
        Ok(model)
    }
}
