//! Checkpoint files.
//!
//! Layout: the 7-byte magic `DLMWPO1`, a little-endian `u64` header length,
//! the JSON header, then every parameter as raw little-endian `f32` in
//! header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::DenoiserConfig;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"DLMWPO1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub tensors: Vec<TensorEntry>,
    pub dtype: String,
    pub step: u64,
    pub config_hash: String,
    pub model: DenoiserConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserConfig,
    pub params: ParamStore<f32>,
    pub step: u64,
    /// Hash of the resolved run configuration that produced the weights.
    pub config_hash: String,
}

/// Hex SHA-256 of arbitrary configuration text.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            dtype: "f32".into(),
            step: self.step,
            config_hash: self.config_hash.clone(),
            model: self.model.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing DLMWPO1 magic"));
        }
        let mut len_bytes = [0u8; 8];
        len_bytes.copy_from_slice(&bytes[7..15]);
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let body = &bytes[15..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        if header.dtype != "f32" {
            return Err(bad(&format!("unsupported dtype {}", header.dtype)));
        }
        let mut raw = &body[hlen..];
        let mut params = ParamStore::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            if raw.len() < 4 * n {
                return Err(bad(&format!("truncated data for {}", entry.name)));
            }
            let data = raw[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            raw = &raw[4 * n..];
            params.push(entry.name.clone(), Tensor::new(entry.shape.clone(), data));
        }
        if !raw.is_empty() {
            return Err(bad("trailing bytes after parameter data"));
        }
        header.model.check_layout(&params)?;
        Ok(Checkpoint {
            model: header.model,
            params,
            step: header.step,
            config_hash: header.config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let model = DenoiserConfig {
            vocab_size: 6,
            max_len: 5,
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            init_std: 0.5,
        };
        let params = model
            .init_params(&mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        Checkpoint {
            model,
            params,
            step: 17,
            config_hash: config_hash("a=1"),
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..7], b"DLMWPO1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let ck = sample();
        let mut bytes = ck.to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let mut bytes = ck.to_bytes().unwrap();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
