//! Versioned checkpoint container: JSON metadata (config, epoch, metric
//! snapshot) followed by the raw parameter payload.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mimic_core::train::{TrainConfig, ValMetrics};
use serde::{Deserialize, Serialize};

const MAGIC: &[u8; 4] = b"MMCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub epoch: usize,
    pub val: ValMetrics,
}

pub fn save(path: &Path, meta: &CheckpointMeta, weights: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let json = serde_json::to_vec(meta)?;
    let mut buf = Vec::with_capacity(10 + json.len() + weights.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(weights);
    std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, Vec<u8>)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        bail!("{}: not a checkpoint file", path.display());
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        bail!("{}: unsupported checkpoint version {version}", path.display());
    }
    let json_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    if bytes.len() < 10 + json_len {
        bail!("{}: truncated checkpoint", path.display());
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[10..10 + json_len])
        .with_context(|| format!("parsing {} metadata", path.display()))?;
    Ok((meta, bytes[10 + json_len..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let meta = CheckpointMeta {
            config: TrainConfig::default(),
            epoch: 17,
            val: ValMetrics {
                dsc: 0.9,
                miou: 0.8,
                hd95: 1.5,
                asd: 0.2,
            },
        };
        save(&path, &meta, &[1, 2, 3, 4]).unwrap();
        let (back, weights) = load(&path).unwrap();
        assert_eq!(back.epoch, 17);
        assert_eq!(weights, vec![1, 2, 3, 4]);
    }
}
