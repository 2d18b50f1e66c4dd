//! JSON parameter checkpoints.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "model_kind": "screener" | "generator",
//!   "config": { ... },
//!   "vocab": ["<pad>", "<unk>", "<bos>", "<eos>", ...],
//!   "tensors": [{"name": "embedding.value", "shape": [rows, cols], "data": [...]}],
//!   "metadata": { ... }
//! }
//! ```
//!
//! `data` is row-major. Floats are written in shortest round-trip form, so a
//! save/load cycle is bit-exact.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::Parameters;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_kind: String,
    pub config: serde_json::Value,
    pub vocab: Vec<String>,
    pub tensors: Vec<TensorRecord>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn from_params<P: Parameters>(
        model_kind: &str,
        config: serde_json::Value,
        vocab: Vec<String>,
        params: &P,
        metadata: serde_json::Value,
    ) -> Self {
        let tensors = params
            .tensors()
            .into_iter()
            .map(|(name, t)| TensorRecord {
                name,
                shape: [t.rows(), t.cols()],
                data: t.data().to_vec(),
            })
            .collect();
        Checkpoint {
            format_version: FORMAT_VERSION,
            model_kind: model_kind.to_string(),
            config,
            vocab,
            tensors,
            metadata,
        }
    }

    /// Copies stored tensors into `params`, which must already have the
    /// matching architecture.
    pub fn load_into<P: Parameters>(&self, params: &mut P) -> Result<()> {
        let by_name: HashMap<&str, &TensorRecord> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                names.len(),
                self.tensors.len()
            )));
        }
        for (name, dst) in names.iter().zip(params.tensors_mut()) {
            let rec = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if rec.shape != [dst.rows(), dst.cols()] || rec.data.len() != dst.data().len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: stored shape {:?}, expected {:?}",
                    rec.shape,
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(&rec.data);
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, expected_kind: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                ckpt.format_version
            )));
        }
        if ckpt.model_kind != expected_kind {
            return Err(Error::Checkpoint(format!(
                "model_kind {:?}, expected {expected_kind:?}",
                ckpt.model_kind
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{FeedForward, Matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ffn = FeedForward::new(3, 4, &mut rng);
        let ckpt = Checkpoint::from_params("test", serde_json::json!({}), vec![], &ffn, serde_json::Value::Null);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path, "test").unwrap();
        let mut restored = ffn.zeros_like();
        loaded.load_into(&mut restored).unwrap();
        assert_eq!(restored, ffn);
        assert!(Checkpoint::load(&path, "other").is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = Matrix::zeros(2, 2);
        let ckpt = Checkpoint::from_params("t", serde_json::json!({}), vec![], &m, serde_json::Value::Null);
        let mut wrong = Matrix::zeros(2, 3);
        assert!(ckpt.load_into(&mut wrong).is_err());
    }
}
