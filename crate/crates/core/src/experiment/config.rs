//! Experiment configuration. Files are partial JSON objects merged over
//! [`ExperimentConfig::default`], so only the changed keys need to appear.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{RnnConfig, TcnConfig};
use crate::error::{Error, Result};
use crate::models::{LstmConfig, TransformerConfig};
use crate::simulator::ScenarioConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Persistence,
    Curvefit,
    Rnn,
    Tcn,
    StsLstm,
    MmLstm,
    MmTransformer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Persistence,
        ModelKind::Curvefit,
        ModelKind::Rnn,
        ModelKind::Tcn,
        ModelKind::StsLstm,
        ModelKind::MmLstm,
        ModelKind::MmTransformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Persistence => "persistence",
            ModelKind::Curvefit => "curvefit",
            ModelKind::Rnn => "rnn",
            ModelKind::Tcn => "tcn",
            ModelKind::StsLstm => "sts-lstm",
            ModelKind::MmLstm => "mm-lstm",
            ModelKind::MmTransformer => "mm-transformer",
        }
    }

    /// Consumes the fused text embedding.
    pub fn uses_text(self) -> bool {
        matches!(self, ModelKind::MmLstm | ModelKind::MmTransformer)
    }

    /// Runs the tensor engine (everything except the two closed-form baselines).
    pub fn is_trained(self) -> bool {
        !matches!(self, ModelKind::Persistence | ModelKind::Curvefit)
    }

    /// One-step models, which also get a `-onestep` metrics row.
    pub fn is_one_step(self) -> bool {
        matches!(self, ModelKind::Curvefit | ModelKind::Rnn | ModelKind::Tcn)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL.into_iter().find(|m| m.name() == s.trim()).ok_or_else(|| {
            let known: Vec<&str> = ModelKind::ALL.iter().map(|m| m.name()).collect();
            Error::invalid(format!("unknown model `{s}` (known: {})", known.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// Simulated campaign: every catalog object drifts through one shared
    /// environment.
    Simulate {
        #[serde(default)]
        scenario: ScenarioConfig,
    },
    /// Recorded series, one `<object id>.csv` per catalog object.
    Csv { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TextBackend {
    Hashing,
    /// Precomputed embeddings table.
    File { path: PathBuf },
}

/// Architecture plus training settings for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tuned<C> {
    pub model: C,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparameters {
    pub rnn: Tuned<RnnConfig>,
    pub tcn: Tuned<TcnConfig>,
    pub sts_lstm: Tuned<LstmConfig>,
    pub mm_lstm: Tuned<LstmConfig>,
    pub mm_transformer: Tuned<TransformerConfig>,
}

/// Adam at 1e-3 with the given batch size. Epochs are capped at 1000 but
/// each epoch is a random 50-batch slice and the step budget usually ends
/// training well before that.
fn budget(batch_size: usize, max_steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size,
        learning_rate: 1e-3,
        max_epochs: 1000,
        patience: 30,
        val_fraction: 0.1,
        batches_per_epoch: Some(50),
        max_val_examples: Some(512),
        max_steps: Some(max_steps),
        cosine_decay: false,
        seed: 0,
    }
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            rnn: Tuned { model: RnnConfig::default(), train: budget(64, 1500) },
            tcn: Tuned { model: TcnConfig::default(), train: budget(64, 1500) },
            sts_lstm: Tuned {
                model: LstmConfig { decoder_layers: 2, ..LstmConfig::plain() },
                train: budget(32, 1500),
            },
            mm_lstm: Tuned { model: LstmConfig::default(), train: budget(16, 1500) },
            mm_transformer: Tuned { model: TransformerConfig::default(), train: budget(32, 1500) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Object catalog JSON; the built-in five boats when absent.
    pub catalog: Option<PathBuf>,
    pub text: TextBackend,
    pub t_h: Vec<usize>,
    pub enc_len: usize,
    pub dec_len: usize,
    pub augment_factor: f64,
    pub models: Vec<ModelKind>,
    /// Objects to hold out in turn; every catalog object when absent.
    pub holdout: Option<Vec<String>>,
    /// Root of every derived seed (folds, initialization, batching).
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Also score one-step models with the true previous position.
    pub one_step_rows: bool,
    pub fail_fast: bool,
    pub snapshots: bool,
    pub hyper: Hyperparameters,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Simulate { scenario: ScenarioConfig::default() },
            catalog: None,
            text: TextBackend::Hashing,
            t_h: vec![1, 3, 5, 10],
            enc_len: 10,
            dec_len: 10,
            augment_factor: 0.05,
            models: ModelKind::ALL.to_vec(),
            holdout: None,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            one_step_rows: true,
            fail_fast: false,
            snapshots: true,
            hyper: Hyperparameters::default(),
        }
    }
}

/// Recursive object merge; a tagged object whose `kind` changes is
/// replaced as a whole.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) if b.get("kind").is_none() || b.get("kind") == o.get("kind") || o.get("kind").is_none() => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

impl ExperimentConfig {
    /// Parses a partial config (or a run manifest, whose embedded config is
    /// used) on top of the defaults.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut user: Value = serde_json::from_str(text)?;
        if user.get("format").and_then(Value::as_str) == Some(super::MANIFEST_FORMAT) {
            user = user.get_mut("config").map(Value::take).ok_or_else(|| Error::Parse("manifest has no config".into()))?;
        }
        if !user.is_object() {
            return Err(Error::Parse("experiment config must be a JSON object".into()));
        }
        let mut merged = serde_json::to_value(ExperimentConfig::default())?;
        merge(&mut merged, user);
        Ok(serde_json::from_value(merged)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_len == 0 || self.dec_len == 0 {
            return Err(Error::invalid("enc_len and dec_len must be at least 1"));
        }
        if self.t_h.is_empty() || self.t_h.contains(&0) {
            return Err(Error::invalid("t_h needs one or more positive integers"));
        }
        if has_duplicates(&self.t_h) || has_duplicates(&self.models) {
            return Err(Error::invalid("t_h and models must not repeat"));
        }
        if self.models.is_empty() {
            return Err(Error::invalid("no models requested"));
        }
        if !(self.augment_factor >= 0.0 && self.augment_factor < 1.0) {
            return Err(Error::invalid(format!("augment_factor {} outside [0, 1)", self.augment_factor)));
        }
        if let Some(h) = &self.holdout {
            if h.is_empty() || has_duplicates(h) {
                return Err(Error::invalid("holdout list must be non-empty without repeats"));
            }
        }
        let mut paths: Vec<&Path> = self.catalog.iter().map(PathBuf::as_path).collect();
        if let DataSource::Csv { dir } = &self.data {
            paths.push(dir);
        }
        if let TextBackend::File { path } = &self.text {
            paths.push(path);
        }
        if let Some(missing) = paths.iter().find(|p| !p.exists()) {
            return Err(Error::invalid(format!("{} does not exist", missing.display())));
        }
        let h = &self.hyper;
        for t in [&h.rnn.train, &h.tcn.train, &h.sts_lstm.train, &h.mm_lstm.train, &h.mm_transformer.train] {
            t.validate()?;
        }
        h.sts_lstm.model.validate()?;
        h.mm_lstm.model.validate()?;
        h.mm_transformer.model.validate()
    }
}

fn has_duplicates<T: PartialEq>(xs: &[T]) -> bool {
    xs.iter().enumerate().any(|(i, x)| xs[..i].contains(x))
}

/// Comma-separated model names.
pub fn parse_models(list: &str) -> Result<Vec<ModelKind>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

/// Comma-separated positive integers.
pub fn parse_horizons(list: &str) -> Result<Vec<usize>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<usize>().map_err(|_| Error::invalid(format!("bad time horizon `{s}`"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_keep_defaults() {
        let c = ExperimentConfig::from_json_str(r#"{"t_h": [1, 5], "hyper": {"mm_lstm": {"train": {"max_steps": 7}}}}"#)
            .unwrap();
        assert_eq!(c.t_h, [1, 5]);
        assert_eq!(c.hyper.mm_lstm.train.max_steps, Some(7));
        assert_eq!(c.hyper.mm_lstm.train.batch_size, 16);
        assert_eq!(c.hyper.sts_lstm.model.decoder_layers, 2);
        assert_eq!(c.models.len(), 7);
    }

    #[test]
    fn switching_data_source_replaces_it() {
        let c = ExperimentConfig::from_json_str(r#"{"data": {"kind": "csv", "dir": "x"}}"#).unwrap();
        assert_eq!(c.data, DataSource::Csv { dir: "x".into() });
        let c = ExperimentConfig::from_json_str(r#"{"data": {"scenario": {"duration": 60}}}"#).unwrap();
        let DataSource::Simulate { scenario } = c.data else { panic!() };
        assert_eq!((scenario.duration, scenario.timestep), (60.0, 1.0));
    }

    #[test]
    fn typos_and_bad_values_rejected() {
        assert!(ExperimentConfig::from_json_str(r#"{"t_hh": [1]}"#).is_err());
        assert!(ExperimentConfig::from_json_str(r#"{"models": ["gpr"]}"#).is_err());
        assert!(ExperimentConfig::from_json_str("[1]").is_err());
        for bad in [r#"{"t_h": [0]}"#, r#"{"enc_len": 0}"#, r#"{"models": []}"#, r#"{"t_h": [1, 1]}"#, r#"{"catalog": "/nope.json"}"#] {
            assert!(ExperimentConfig::from_json_str(bad).unwrap().validate().is_err(), "{bad}");
        }
    }

    #[test]
    fn list_parsing() {
        assert_eq!(parse_models("curvefit, mm-lstm").unwrap(), [ModelKind::Curvefit, ModelKind::MmLstm]);
        assert!(parse_models("curvefit,lstm").is_err());
        assert_eq!(parse_horizons("1,3,5").unwrap(), [1, 3, 5]);
        assert!(parse_horizons("1,x").is_err());
    }
}
