//! Binary checkpoint container.
//!
//! ```text
//! "MFCK" | u32 version | u64 header length | JSON header | f64 payload | SHA-256 of everything before it
//! ```
//!
//! The header lists every tensor by name and shape in payload order. Optimizer
//! moments are stored as `opt.m.<name>` and `opt.v.<name>`.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{AdamW, AdamWConfig, ParamStore};

pub const MAGIC: &[u8; 4] = b"MFCK";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const FIXED_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    step: u64,
    optimizer: Option<OptimizerHeader>,
    extra: serde_json::Value,
    entries: Vec<Entry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    updates: u64,
}

/// Model parameters plus optional optimizer state and a free-form JSON echo.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    pub optimizer: Option<AdamW>,
    pub extra: serde_json::Value,
}

const M_PREFIX: &str = "opt.m.";
const V_PREFIX: &str = "opt.v.";

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &ndarray::Array2<f64>)> =
        ckpt.model.params.iter().map(|(k, v)| (k.clone(), v)).collect();
    if let Some(opt) = &ckpt.optimizer {
        tensors.extend(opt.first_moment.iter().map(|(k, v)| (format!("{M_PREFIX}{k}"), v)));
        tensors.extend(opt.second_moment.iter().map(|(k, v)| (format!("{V_PREFIX}{k}"), v)));
    }
    let header = Header {
        model: ckpt.model.config,
        step: ckpt.step,
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader {
            config: o.config,
            updates: o.updates,
        }),
        extra: ckpt.extra.clone(),
        entries: tensors
            .iter()
            .map(|(name, m)| Entry {
                name: name.clone(),
                rows: m.nrows(),
                cols: m.ncols(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, m) in &tensors {
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Parses and verifies a checkpoint. When `expected` is given, the stored
/// model configuration must match it.
pub fn decode(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    if bytes.len() < FIXED_LEN + DIGEST_LEN {
        return Err(Error::Integrity(format!("checkpoint too short ({} bytes)", bytes.len())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    if &body[..4] != MAGIC {
        return Err(Error::Integrity("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(FIXED_LEN))
        .filter(|&end| end <= body.len())
        .ok_or_else(|| Error::Integrity("header length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(&body[FIXED_LEN..header_end])
        .map_err(|e| Error::Integrity(format!("bad header: {e}")))?;
    if let Some(want) = expected {
        if want != &header.model {
            return Err(Error::Version(format!(
                "checkpoint model config {:?} does not match {:?}",
                header.model, want
            )));
        }
    }
    header
        .model
        .validate()
        .map_err(|e| Error::Version(format!("stored model config invalid: {e}")))?;
    let mut payload = &body[header_end..];
    let mut params = ParamStore::new();
    let mut first = ParamStore::new();
    let mut second = ParamStore::new();
    for e in &header.entries {
        let n = e
            .rows
            .checked_mul(e.cols)
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= payload.len()))
            .ok_or_else(|| Error::Integrity(format!("tensor `{}` overruns the payload", e.name)))?;
        let (chunk, rest) = payload.split_at(n * 8);
        payload = rest;
        let values = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Array2::from_shape_vec((e.rows, e.cols), values).map_err(|err| Error::Integrity(err.to_string()))?;
        if let Some(name) = e.name.strip_prefix(M_PREFIX) {
            first.insert(name, m);
        } else if let Some(name) = e.name.strip_prefix(V_PREFIX) {
            second.insert(name, m);
        } else {
            params.insert(e.name.clone(), m);
        }
    }
    if !payload.is_empty() {
        return Err(Error::Integrity(format!("{} trailing payload bytes", payload.len())));
    }
    let reference = Model::init(header.model, 0)?;
    for (name, m) in reference.params.iter() {
        match params.try_get(name) {
            Some(p) if p.dim() == m.dim() => {}
            Some(p) => {
                return Err(Error::Version(format!("`{name}` has shape {:?}, model expects {:?}", p.dim(), m.dim())))
            }
            None => return Err(Error::Version(format!("checkpoint lacks parameter `{name}`"))),
        }
    }
    if params.len() != reference.params.len() {
        return Err(Error::Version("checkpoint carries unknown parameters".into()));
    }
    let optimizer = match header.optimizer {
        Some(h) => {
            if first.names().ne(params.names()) || second.names().ne(params.names()) {
                return Err(Error::Integrity("optimizer moments do not cover the parameters".into()));
            }
            Some(AdamW {
                config: h.config,
                first_moment: first,
                second_moment: second,
                updates: h.updates,
            })
        }
        None if first.is_empty() && second.is_empty() => None,
        None => return Err(Error::Integrity("optimizer moments without optimizer header".into())),
    };
    Ok(Checkpoint {
        model: Model {
            config: header.model,
            params,
        },
        step: header.step,
        optimizer,
        extra: header.extra,
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ckpt)?)?;
    Ok(())
}

pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    decode(&fs::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            cka_layer_index: 0,
            extractor_hidden: 4,
            melody_dim: 3,
            ..ModelConfig::default()
        }
    }

    fn sample() -> Checkpoint {
        let model = Model::init(tiny(), 5).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &model.params);
        opt.updates = 3;
        opt.first_moment.get_mut("proj.b").unwrap().fill(0.25);
        Checkpoint {
            model,
            step: 42,
            optimizer: Some(opt),
            extra: serde_json::json!({"peak_lr": 0.001}),
        }
    }

    #[test]
    fn round_trip_is_lossless_and_stable() {
        let c = sample();
        let bytes = encode(&c).unwrap();
        let back = decode(&bytes, Some(&tiny())).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode(&back).unwrap(), bytes);
        let bare = Checkpoint { optimizer: None, ..c };
        assert_eq!(decode(&encode(&bare).unwrap(), None).unwrap(), bare);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&sample()).unwrap();
        for pos in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[pos] ^= 0x10;
            assert!(matches!(decode(&b, None), Err(Error::Integrity(_))), "byte {pos}");
        }
        assert!(matches!(decode(&bytes[..bytes.len() - 3], None), Err(Error::Integrity(_))));
    }

    #[test]
    fn config_mismatch_is_a_version_error() {
        let bytes = encode(&sample()).unwrap();
        let wrong = ModelConfig { feature_dim: 12, ..tiny() };
        assert!(matches!(decode(&bytes, Some(&wrong)), Err(Error::Version(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &sample()).unwrap();
        assert_eq!(load(&path, None).unwrap(), sample());
    }

    proptest! {
        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
            let _ = decode(&bytes, None);
        }
    }
}
