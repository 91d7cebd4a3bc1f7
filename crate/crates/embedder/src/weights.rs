//! Weight file: 16-byte header (`FNET`, version, tensor count, parameter
//! count, all u32 LE), one u32 LE length per tensor, then every parameter as
//! f64 LE in canonical tensor order. A JSON sidecar next to it records the
//! configuration and the SHA-256 of the weight file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{AugmentStrategy, BackboneConfig, TrainConfig};
use crate::error::{EmbedError, Result};
use crate::network::{Network, Params};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"FNET";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub backbone: BackboneConfig,
    pub train: Option<TrainConfig>,
    pub augment: Option<AugmentStrategy>,
    pub sha256: String,
}

pub fn encode_weights(params: &Params) -> Vec<u8> {
    let tensors = params.tensors();
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(16 + 4 * tensors.len() + 8 * total);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    out.extend_from_slice(&(total as u32).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
    }
    for t in &tensors {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Hex SHA-256 of the encoded weights.
pub fn weights_checksum(params: &Params) -> String {
    hex::encode(Sha256::digest(encode_weights(params)))
}

/// Decodes into tensors shaped by `config`.
pub fn decode_weights(bytes: &[u8], config: &BackboneConfig, path: &Path) -> Result<Params> {
    let fail = |m: String| EmbedError::Weights { path: path.to_path_buf(), message: m };
    if bytes.len() < 16 || &bytes[0..4] != WEIGHTS_MAGIC {
        return Err(fail("missing FNET header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let version = u32_at(4) as u32;
    if version != WEIGHTS_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let count = u32_at(8);
    let total = u32_at(12);
    let mut params = Params {
        conv_w: Vec::new(),
        conv_b: Vec::new(),
        fc_w: ndarray::Array2::zeros((config.embedding_dim, config.feature_len())),
        fc_b: ndarray::Array1::zeros(config.embedding_dim),
    };
    let mut in_ch = 3;
    for b in 0..config.num_blocks {
        let out_ch = config.block_channels(b);
        params.conv_w.push(ndarray::Array2::zeros((out_ch, in_ch * config.kernel_size * config.kernel_size)));
        params.conv_b.push(ndarray::Array1::zeros(out_ch));
        in_ch = out_ch;
    }
    let expected: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    if count != expected.len() || total != expected.iter().sum::<usize>() {
        return Err(fail(format!(
            "file holds {count} tensors / {total} values, configuration needs {} / {}",
            expected.len(),
            expected.iter().sum::<usize>()
        )));
    }
    let body = 16 + 4 * count;
    if bytes.len() != body + 8 * total {
        return Err(fail(format!("expected {} bytes, found {}", body + 8 * total, bytes.len())));
    }
    for (i, &len) in expected.iter().enumerate() {
        if u32_at(16 + 4 * i) != len {
            return Err(fail(format!("tensor {i} length {} != {len}", u32_at(16 + 4 * i))));
        }
    }
    let mut offset = body;
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
            offset += 8;
        }
    }
    Ok(params)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the weight file and its sidecar; returns the checksum.
pub fn save_model(
    network: &Network,
    path: &Path,
    train: Option<&TrainConfig>,
    augment: Option<AugmentStrategy>,
) -> Result<String> {
    let bytes = encode_weights(&network.params);
    let sha256 = hex::encode(Sha256::digest(&bytes));
    let io = |p: &Path, e| EmbedError::Io { path: p.to_path_buf(), source: e };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    }
    fs::write(path, &bytes).map_err(|e| io(path, e))?;
    let sidecar = ModelSidecar {
        backbone: network.config.clone(),
        train: train.cloned(),
        augment,
        sha256: sha256.clone(),
    };
    let sp = sidecar_path(path);
    fs::write(&sp, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| io(&sp, e))?;
    Ok(sha256)
}

pub fn load_model(path: &Path) -> Result<(Network, ModelSidecar)> {
    let io = |p: &Path, e| EmbedError::Io { path: p.to_path_buf(), source: e };
    let sp = sidecar_path(path);
    let sidecar: ModelSidecar = serde_json::from_slice(&fs::read(&sp).map_err(|e| io(&sp, e))?)?;
    sidecar.backbone.validate()?;
    let bytes = fs::read(path).map_err(|e| io(path, e))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != sidecar.sha256 {
        return Err(EmbedError::Weights {
            path: path.to_path_buf(),
            message: format!("checksum {digest} does not match sidecar {}", sidecar.sha256),
        });
    }
    let params = decode_weights(&bytes, &sidecar.backbone, path)?;
    Ok((Network { config: sidecar.backbone.clone(), params }, sidecar))
}
