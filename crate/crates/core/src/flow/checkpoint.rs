//! Bundle layout: 8-byte magic, little-endian `u64` header length, UTF-8
//! JSON header, then the payload as little-endian `f64`s.

use thiserror::Error;

const MAGIC: &[u8; 8] = b"CIBNDL01";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("not a checkpoint bundle (bad magic)")]
    Magic,
    #[error("truncated checkpoint bundle")]
    Truncated,
    #[error("checkpoint header: {0}")]
    Header(String),
}

pub fn write_bundle(header: &serde_json::Value, payload: &[f64]) -> Vec<u8> {
    let head = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + head.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_bundle(bytes: &[u8]) -> Result<(serde_json::Value, Vec<f64>), BundleError> {
    if bytes.len() < 16 {
        return Err(BundleError::Truncated);
    }
    if &bytes[..8] != MAGIC {
        return Err(BundleError::Magic);
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len || (body.len() - len) % 8 != 0 {
        return Err(BundleError::Truncated);
    }
    let header = serde_json::from_slice(&body[..len]).map_err(|e| BundleError::Header(e.to_string()))?;
    let payload = body[len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, payload))
}
