//! JSON container for trained parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const FORMAT: &str = "driftcast-snapshot";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub format: String,
    pub version: u32,
    pub model: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Hex SHA-256 of the compact JSON encoding.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Snapshot {
    pub fn capture<C: Serialize>(
        model: &str,
        seed: u64,
        config: &C,
        store: &ParamStore,
        extra: serde_json::Value,
    ) -> Result<Snapshot> {
        if !store.is_trained() {
            return Err(Error::invalid(format!("refusing to snapshot an untrained {model}")));
        }
        // hash the value form so restore() can recompute it
        let config = serde_json::to_value(config)?;
        Ok(Snapshot {
            format: FORMAT.into(),
            version: VERSION,
            model: model.into(),
            seed,
            config_hash: config_hash(&config)?,
            config,
            tensors: store
                .iter()
                .map(|(name, t)| NamedTensor { name: name.into(), shape: t.shape().to_vec(), data: t.data().to_vec() })
                .collect(),
            extra,
        })
    }

    /// Copies every stored tensor into a freshly built store with the same
    /// parameter names and shapes.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Parse(format!("unsupported snapshot {} v{}", self.format, self.version)));
        }
        if config_hash(&self.config)? != self.config_hash {
            return Err(Error::Parse("snapshot config hash does not match its config".into()));
        }
        if self.tensors.len() != store.len() {
            return Err(Error::invalid(format!(
                "snapshot has {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for t in &self.tensors {
            store.set(&t.name, Tensor::new(t.shape.clone(), t.data.clone())?)?;
        }
        store.mark_trained();
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Snapshot> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}
