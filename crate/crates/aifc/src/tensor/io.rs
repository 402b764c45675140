//! Weight-file serialization: a JSON manifest (parameter names, shapes,
//! byte offsets, plus the full codec config) followed by flat little-endian
//! 32-bit-float data.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bytes::Reader;
use crate::config::CodecConfig;
use crate::error::CodecError;
use crate::tensor::graph::Param;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AIFW";
const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config_hash: String,
    config: String,
    params: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: usize,
    /// Byte length within the payload section.
    len: usize,
}

pub fn serialize_weights(config: &CodecConfig, params: &[&Param]) -> Vec<u8> {
    let mut entries = Vec::with_capacity(params.len());
    let mut payload: Vec<u8> = Vec::new();
    for p in params {
        let offset = payload.len();
        for &v in p.value().data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: p.name().to_string(),
            shape: p.value().shape().to_vec(),
            offset,
            len: payload.len() - offset,
        });
    }
    let manifest = Manifest {
        format: "aifc-weights".to_string(),
        config_hash: format!("{:016x}", config.hash()),
        config: config.to_key_values(),
        params: entries,
    };
    let manifest_json = serde_json::to_vec(&manifest).expect("manifest serialization");
    let mut out = Vec::with_capacity(4 + 1 + 4 + manifest_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&payload);
    out
}

pub fn deserialize_weights(bytes: &[u8]) -> Result<(CodecConfig, HashMap<String, Tensor>), CodecError> {
    let mut r = Reader::new(bytes, "weight file");
    if r.take(4)? != MAGIC {
        return Err(CodecError::InvalidInput(
            "not an AIFW weight file (bad magic)".into(),
        ));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(CodecError::InvalidInput(format!(
            "unsupported weight file version {version}"
        )));
    }
    let mlen = r.u32()? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(mlen)?)
        .map_err(|e| CodecError::InvalidInput(format!("weight manifest: {e}")))?;
    let config = CodecConfig::from_key_values(&manifest.config)?;
    let stated: u64 = u64::from_str_radix(&manifest.config_hash, 16)
        .map_err(|_| CodecError::InvalidInput("weight manifest: bad config_hash".into()))?;
    if stated != config.hash() {
        return Err(CodecError::ConfigMismatch {
            expected: stated,
            actual: config.hash(),
        });
    }
    let payload = r.take(r.remaining())?;
    let mut tensors = HashMap::with_capacity(manifest.params.len());
    for e in &manifest.params {
        let numel: usize = e.shape.iter().product();
        if e.len != numel * 4 || e.offset + e.len > payload.len() {
            return Err(CodecError::Truncated(format!(
                "weight payload: parameter {} out of bounds",
                e.name
            )));
        }
        let data: Vec<f64> = payload[e.offset..e.offset + e.len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, data));
    }
    Ok((config, tensors))
}

pub fn save_weights(
    path: &Path,
    config: &CodecConfig,
    params: &[&Param],
) -> Result<(), CodecError> {
    std::fs::write(path, serialize_weights(config, params))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(CodecConfig, HashMap<String, Tensor>), CodecError> {
    let bytes = std::fs::read(path)?;
    deserialize_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_roundtrip_is_f32_exact_and_idempotent() {
        let config = CodecConfig::tiny();
        let p1 = Param::new("a.weight", Tensor::from_vec(&[2, 2], vec![0.1, -0.2, 0.3, 1.0 / 3.0]));
        let p2 = Param::new("a.bias", Tensor::from_vec(&[2], vec![0.5, -0.5]));
        let bytes = serialize_weights(&config, &[&p1, &p2]);
        let (cfg2, tensors) = deserialize_weights(&bytes).unwrap();
        assert_eq!(config, cfg2);
        // values live through f32, so a second round-trip is bit-identical
        let q1 = Param::new("a.weight", tensors["a.weight"].clone());
        let q2 = Param::new("a.bias", tensors["a.bias"].clone());
        let bytes2 = serialize_weights(&config, &[&q1, &q2]);
        assert_eq!(bytes, bytes2);
        assert_eq!(tensors["a.weight"].data()[0], 0.1f32 as f64);
    }

    #[test]
    fn corrupt_magic_rejected() {
        let config = CodecConfig::tiny();
        let p = Param::new("w", Tensor::scalar(1.0));
        let mut bytes = serialize_weights(&config, &[&p]);
        bytes[0] = b'X';
        assert!(deserialize_weights(&bytes).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let config = CodecConfig::tiny();
        let p = Param::new("w", Tensor::from_vec(&[4], vec![1.0; 4]));
        let bytes = serialize_weights(&config, &[&p]);
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            deserialize_weights(cut),
            Err(CodecError::Truncated(_))
        ));
    }
}
