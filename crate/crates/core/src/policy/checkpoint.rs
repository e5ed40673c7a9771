//! Binary checkpoint format.
//!
//! Layout: the magic line `IPRCKPT1`, one JSON header line, then the
//! weights as little-endian `f64` in row-major order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PolicyParams;
use crate::env::store::{sha256_hex, write_atomic};
use crate::env::EnvId;
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"IPRCKPT1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub env: EnvId,
    pub d: usize,
    pub n_actions: usize,
    pub version: u64,
    /// Hash of the configuration that produced the weights; empty when
    /// written outside a configured run.
    pub config_hash: String,
}

pub fn encode(params: &PolicyParams, env: EnvId, config_hash: &str) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        env,
        d: params.d(),
        n_actions: params.n_actions(),
        version: params.version(),
        config_hash: config_hash.to_string(),
    };
    let mut bytes = MAGIC.to_vec();
    bytes.extend(serde_json::to_vec(&header).expect("header serializes"));
    bytes.push(b'\n');
    for w in params.weights() {
        bytes.extend_from_slice(&w.to_le_bytes());
    }
    bytes
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<(PolicyParams, CheckpointHeader)> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::format(origin, "not a policy checkpoint (bad magic)"))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(origin, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&rest[..nl])
        .map_err(|e| Error::format(origin, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(
            origin,
            format!("format version {} is not supported", header.format_version),
        ));
    }
    let body = &rest[nl + 1..];
    if body.len() != header.d * header.n_actions * 8 {
        return Err(Error::format(
            origin,
            format!(
                "expected {} weight bytes for shape {}x{}, found {}",
                header.d * header.n_actions * 8,
                header.d,
                header.n_actions,
                body.len()
            ),
        ));
    }
    let weights: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::format(origin, "non-finite weight"));
    }
    let params = PolicyParams::from_weights(header.d, header.n_actions, weights, header.version)?;
    Ok((params, header))
}

/// Writes a checkpoint and returns the SHA-256 of its bytes.
pub fn save(path: &Path, params: &PolicyParams, env: EnvId, config_hash: &str) -> Result<String> {
    let bytes = encode(params, env, config_hash);
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load(path: &Path) -> Result<(PolicyParams, CheckpointHeader)> {
    decode(&std::fs::read(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut p = PolicyParams::zeros(4, 3);
        for (i, w) in p.weights_mut().iter_mut().enumerate() {
            *w = (i as f64 * 0.37).sin() * 1e-3;
        }
        p.descend(&[1e-300; 12], 1.0);
        let bytes = encode(&p, EnvId::Toy, "abc");
        let (q, h) = decode(&bytes, "mem").unwrap();
        assert_eq!(p, q);
        assert_eq!(h.version, 1);
        assert_eq!(h.config_hash, "abc");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = PolicyParams::zeros(2, 2);
        let bytes = encode(&p, EnvId::Toy, "");
        assert!(decode(&bytes[..bytes.len() - 1], "mem").is_err());
        assert!(decode(b"garbage", "mem").is_err());
    }
}
