//! Binary checkpoint of a trained drift.
//!
//! ```text
//! offset  size      content
//! 0       8         magic "MMSBMCK\0"
//! 8       4         format version, u32 little-endian (currently 1)
//! 12      8         metadata length L, u64 little-endian
//! 20      L         metadata, UTF-8 JSON (see `CheckpointMeta`)
//! 20+L    8P        weights, P = meta.num_params f64 little-endian
//! 20+L+8P 8P        EMA shadow weights, same layout
//! end-32  32        SHA-256 of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::PinnedSet;
use crate::error::{Error, Result};
use crate::nn::{DriftNet, NetConfig, Normalization};

pub const MAGIC: &[u8; 8] = b"MMSBMCK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// The full run configuration the model was trained with.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub net: NetConfig,
    pub dim: usize,
    pub num_params: usize,
    pub outer_iteration: usize,
    pub normalization: Normalization,
    /// Raw times of the training marginals.
    pub train_times: Vec<f64>,
    /// `(x_0, v_0)` pairs the final coupling was simulated from.
    pub start_x0: Vec<Vec<f64>>,
    pub start_v0: Vec<Vec<f64>>,
    /// Final refreshed coupling, one list of positions per pinned set.
    pub coupling: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<f64>,
    pub shadow: Vec<f64>,
}

impl Checkpoint {
    pub fn net(&self) -> Result<DriftNet> {
        DriftNet::from_parts(
            self.meta.net,
            self.meta.dim,
            self.meta.normalization.clone(),
            self.params.clone(),
            self.shadow.clone(),
        )
    }

    pub fn coupling(&self) -> Result<Vec<PinnedSet>> {
        self.meta.coupling.iter().map(|p| PinnedSet::from_points(p.clone())).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 16 * self.params.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for w in self.params.iter().chain(&self.shadow) {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch; file is truncated or corrupted"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let json = body.get(20..20 + len).ok_or_else(|| bad("metadata length exceeds file"))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let weights = &body[20 + len..];
        if weights.len() != 16 * meta.num_params {
            return Err(Error::Checkpoint(format!(
                "expected {} weight bytes, found {}",
                16 * meta.num_params,
                weights.len()
            )));
        }
        let floats: Vec<f64> = weights
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (params, shadow) = floats.split_at(meta.num_params);
        Ok(Checkpoint {
            params: params.to_vec(),
            shadow: shadow.to_vec(),
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = NetConfig { width: 4, blocks: 1, frequencies: 1 };
        let mut net = DriftNet::new(cfg, 2, Normalization::identity(2, 3.0), &mut rng).unwrap();
        net.shadow[0] = 0.125;
        Checkpoint {
            meta: CheckpointMeta {
                config: serde_json::json!({"train": {"seed": 1}}),
                config_hash: "abc".into(),
                net: cfg,
                dim: 2,
                num_params: net.num_params(),
                outer_iteration: 7,
                normalization: net.norm.clone(),
                train_times: vec![0.0, 1.0, 2.0, 3.0],
                start_x0: vec![vec![0.1, 0.2]],
                start_v0: vec![vec![-0.3, 0.4]],
                coupling: vec![vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]],
            },
            params: net.params.clone(),
            shadow: net.shadow.clone(),
        }
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let net = back.net().unwrap();
        assert_eq!(net.shadow[0], 0.125);
        assert_eq!(back.coupling().unwrap().len(), 1);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
