//! Fixed-width description embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_DIM: usize = 384;
const NGRAM: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub id: String,
    pub vector: Vec<f64>,
}

pub trait TextEncoder {
    fn encode(&self, id: &str, description: &str) -> Result<Embedding>;

    fn name(&self) -> &'static str;
}

/// Signed hashing of lowercase character trigrams into 384 buckets,
/// L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashingEncoder;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Lowercase character trigrams; shorter texts yield themselves.
pub fn trigrams(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    if chars.len() < NGRAM {
        return vec![chars.into_iter().collect()];
    }
    chars.windows(NGRAM).map(|w| w.iter().collect()).collect()
}

impl HashingEncoder {
    pub fn embed(&self, description: &str) -> Result<Vec<f64>> {
        if description.trim().is_empty() {
            return Err(Error::invalid("empty description"));
        }
        let mut v = vec![0.0; EMBEDDING_DIM];
        for g in trigrams(description) {
            let h = fnv1a(g.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % EMBEDDING_DIM as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // every trigram cancelled out; fall back to a single bucket
            v[(fnv1a(description.as_bytes()) % EMBEDDING_DIM as u64) as usize] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

impl TextEncoder for HashingEncoder {
    fn encode(&self, id: &str, description: &str) -> Result<Embedding> {
        Ok(Embedding { id: id.to_string(), vector: self.embed(description)? })
    }

    fn name(&self) -> &'static str {
        "builtin"
    }
}

/// Vectors precomputed elsewhere, looked up by object id and returned as
/// stored.
#[derive(Debug, Clone, Default)]
pub struct FileEncoder {
    table: BTreeMap<String, Vec<f64>>,
}

impl FileEncoder {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(FileEncoder { table: load_embedding_file(path)? })
    }

    pub fn from_table(table: BTreeMap<String, Vec<f64>>) -> Self {
        FileEncoder { table }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl TextEncoder for FileEncoder {
    fn encode(&self, id: &str, description: &str) -> Result<Embedding> {
        if description.trim().is_empty() {
            return Err(Error::invalid("empty description"));
        }
        let vector = self.table.get(id).ok_or_else(|| Error::UnknownObject(id.to_string()))?;
        Ok(Embedding { id: id.to_string(), vector: vector.clone() })
    }

    fn name(&self) -> &'static str {
        "file"
    }
}

pub fn embedding_header() -> Vec<String> {
    std::iter::once("id".to_string())
        .chain((0..EMBEDDING_DIM).map(|i| format!("e_{i}")))
        .collect()
}

pub fn read_embeddings<R: std::io::Read>(input: R) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header = r.headers()?.clone();
    if header.len() != EMBEDDING_DIM + 1 || &header[0] != "id" {
        return Err(Error::Parse(format!(
            "embedding header must be id,e_0..e_{} ({} columns found)",
            EMBEDDING_DIM - 1,
            header.len()
        )));
    }
    let mut table = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        if rec.len() != EMBEDDING_DIM + 1 {
            return Err(Error::Dimension { row, expected: EMBEDDING_DIM, found: rec.len().saturating_sub(1) });
        }
        let vector = rec
            .iter()
            .skip(1)
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::Parse(format!("row {row}: bad value `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        table.insert(rec[0].to_string(), vector);
    }
    Ok(table)
}

pub fn load_embedding_file(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    read_embeddings(std::fs::File::open(path)?)
}

pub fn write_embeddings<W: std::io::Write>(embeddings: &[Embedding], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(embedding_header())?;
    for e in embeddings {
        if e.vector.len() != EMBEDDING_DIM {
            return Err(Error::Dimension { row: 0, expected: EMBEDDING_DIM, found: e.vector.len() });
        }
        w.write_record(std::iter::once(e.id.clone()).chain(e.vector.iter().map(|x| format!("{x:.16e}"))))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_embedding_file(path: &Path, embeddings: &[Embedding]) -> Result<()> {
    write_embeddings(embeddings, std::fs::File::create(path)?)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
