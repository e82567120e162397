//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IMPX" | version: u32 | metadata length: u32 | metadata (UTF-8 JSON) | f32 payload
//! ```
//!
//! The metadata holds the model configuration, the training step, optional
//! optimizer settings and the tensor manifest (name and shape, in payload
//! order). Optimizer accumulators follow the model tensors in the payload
//! under `optim.first.*` and `optim.second.*`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Mat, ModelConfig, ModelParams};
use crate::error::{CheckpointError, Error, Result};
use crate::optim::{Optimizer, OptimizerConfig};

pub const MAGIC: &[u8; 4] = b"IMPX";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<Optimizer>,
    /// Training steps completed.
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    config: ModelConfig,
    step: u64,
    optimizer: Option<OptimizerMeta>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerMeta {
    config: OptimizerConfig,
    steps: u64,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

fn manifest(ckpt: &Checkpoint) -> Vec<(String, &Mat)> {
    let names = ckpt.params.tensor_names();
    let mut out: Vec<(String, &Mat)> = names
        .iter()
        .cloned()
        .zip(ckpt.params.tensors())
        .collect();
    if let Some(opt) = &ckpt.optimizer {
        out.extend(
            names
                .iter()
                .map(|n| format!("optim.first.{n}"))
                .zip(opt.first.tensors()),
        );
        if let Some(second) = &opt.second {
            out.extend(
                names
                    .iter()
                    .map(|n| format!("optim.second.{n}"))
                    .zip(second.tensors()),
            );
        }
    }
    out
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let tensors = manifest(ckpt);
    let meta = Metadata {
        config: ckpt.params.config().clone(),
        step: ckpt.step,
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerMeta {
            config: o.config,
            steps: o.steps,
        }),
        tensors: tensors
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                shape: m.shape(),
            })
            .collect(),
    };
    let meta = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
    let values: usize = tensors.iter().map(|(_, m)| m.data().len()).sum();
    let mut out = Vec::with_capacity(12 + meta.len() + 4 * values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for (_, m) in &tensors {
        for &v in m.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, CheckpointError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| corrupt("truncated header"))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing IMPX magic"));
    }
    let version = read_u32(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let meta_len = read_u32(bytes, 8)? as usize;
    let meta_bytes = bytes
        .get(12..12 + meta_len)
        .ok_or_else(|| corrupt("truncated metadata"))?;
    let meta: Metadata =
        serde_json::from_slice(meta_bytes).map_err(|e| corrupt(format!("metadata: {e}")))?;
    meta.config
        .validate()
        .map_err(|e| CheckpointError::Shape(e.to_string()))?;

    let mut params =
        ModelParams::init(&meta.config).map_err(|e| CheckpointError::Shape(e.to_string()))?;
    let optimizer = meta.optimizer.as_ref().map(|o| {
        let mut opt = Optimizer::new(o.config, &params);
        opt.steps = o.steps;
        opt
    });
    let mut ckpt = Checkpoint {
        params: params.clone(),
        optimizer,
        step: meta.step,
    };
    let expected: Vec<TensorEntry> = manifest(&ckpt)
        .into_iter()
        .map(|(name, m)| TensorEntry {
            name,
            shape: m.shape(),
        })
        .collect();
    if expected.len() != meta.tensors.len() {
        return Err(CheckpointError::Shape(format!(
            "manifest lists {} tensors, configuration implies {}",
            meta.tensors.len(),
            expected.len()
        )));
    }
    if let Some((want, got)) = expected.iter().zip(&meta.tensors).find(|(a, b)| a != b) {
        return Err(CheckpointError::Shape(format!(
            "expected {} {:?}, found {} {:?}",
            want.name, want.shape, got.name, got.shape
        )));
    }

    let payload = &bytes[12 + meta_len..];
    let values: usize = expected.iter().map(|e| e.shape[0] * e.shape[1]).sum();
    if payload.len() != 4 * values {
        return Err(corrupt(format!(
            "payload has {} bytes, manifest needs {}",
            payload.len(),
            4 * values
        )));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64);
    let mut fill = |m: &mut Mat| {
        for v in m.data_mut() {
            *v = floats.next().expect("payload length checked");
        }
    };
    params.tensors_mut().into_iter().for_each(&mut fill);
    if let Some(opt) = &mut ckpt.optimizer {
        opt.first.tensors_mut().into_iter().for_each(&mut fill);
        if let Some(second) = &mut opt.second {
            second.tensors_mut().into_iter().for_each(&mut fill);
        }
    }
    if !params.is_finite() {
        return Err(corrupt("non-finite parameter values"));
    }
    ckpt.params = params;
    Ok(ckpt)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FeatureSeq;
    use crate::optim::OptimizerKind;
    use crate::types::PartialAlignment;

    fn config() -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            hidden: 8,
            heads: 2,
            layers: 1,
            ffn_dim: 8,
            kernel_width: 3,
            conv_stride: 1,
            num_tokens: 3,
            dropout: 0.1,
            seed: 5,
        }
    }

    fn checkpoint() -> Checkpoint {
        let params = ModelParams::init(&config()).unwrap();
        let mut opt = Optimizer::new(
            OptimizerConfig {
                kind: OptimizerKind::Adam,
                ..OptimizerConfig::default()
            },
            &params,
        );
        let mut p = params.clone();
        let mut grads = params.clone();
        grads.scale(0.5);
        opt.step(&mut p, &grads);
        Checkpoint {
            params: p,
            optimizer: Some(opt),
            step: 1,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = checkpoint();
        let back = decode_checkpoint(&encode_checkpoint(&ckpt)).unwrap();
        assert_eq!(back, ckpt);
        let x = FeatureSeq::new(4, 3, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let p = PartialAlignment::all_masked(4);
        assert_eq!(
            back.params.forward(&x, &p).unwrap(),
            ckpt.params.forward(&x, &p).unwrap()
        );
    }

    #[test]
    fn header_starts_with_magic_and_version() {
        let bytes = encode_checkpoint(&checkpoint());
        assert_eq!(&bytes[..4], b"IMPX");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = encode_checkpoint(&checkpoint());
        let err = decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
        assert_eq!(err.code(), 1);
        assert!(matches!(decode_checkpoint(&bytes[..6]), Err(CheckpointError::Corrupt(_))));
        assert!(matches!(decode_checkpoint(b"NOPE"), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn bumped_version_is_rejected() {
        let mut bytes = encode_checkpoint(&checkpoint());
        bytes[4] += 1;
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, CheckpointError::Version { found: 2, expected: 1 }));
        assert_eq!(err.code(), 2);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let bytes = encode_checkpoint(&checkpoint());
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut meta: serde_json::Value = serde_json::from_slice(&bytes[12..12 + meta_len]).unwrap();
        meta["tensors"][1]["shape"][1] = 9.into();
        let edited = serde_json::to_string(&meta).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(edited.len() as u32).to_le_bytes());
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&bytes[12 + meta_len..]);
        let err = decode_checkpoint(&out).unwrap_err();
        assert!(matches!(err, CheckpointError::Shape(_)), "{err}");
        assert_eq!(err.code(), 3);
    }
}
