//! The VOLF container: `"VOLF0001" | u32 header_len | JSON header | f32 payload`, all
//! little-endian with no padding.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FormatError, Result};
use crate::volume::{Volume3, VolumeKind};

pub const MAGIC: &[u8; 8] = b"VOLF0001";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    kind: VolumeKind,
    dtype: String,
    order: String,
}

pub fn encode_volume(vol: &Volume3) -> Vec<u8> {
    let header = Header {
        dims: vol.dims(),
        spacing_mm: vol.spacing(),
        kind: vol.kind(),
        dtype: "f32".into(),
        order: "x-fastest".into(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * vol.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume3> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(FormatError::TruncatedHeader.into());
    }
    let header_len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let rest = &rest[4..];
    if rest.len() < header_len {
        return Err(FormatError::TruncatedHeader.into());
    }
    let header: Header =
        serde_json::from_slice(&rest[..header_len]).map_err(|e| FormatError::BadHeader(e.to_string()))?;
    if header.dtype != "f32" || header.order != "x-fastest" {
        return Err(FormatError::BadHeader(format!(
            "unsupported dtype/order {}/{}",
            header.dtype, header.order
        ))
        .into());
    }
    let payload = &rest[header_len..];
    let expected = header
        .dims
        .iter()
        .try_fold(4usize, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| FormatError::BadHeader(format!("dims {:?} overflow", header.dims)))?;
    if payload.len() < expected {
        return Err(FormatError::TruncatedPayload { expected, found: payload.len() }.into());
    }
    if payload.len() > expected {
        return Err(FormatError::LengthMismatch { expected, found: payload.len() }.into());
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Volume3::new(header.dims, header.spacing_mm, header.kind, data)
}

pub fn write_volume(vol: &Volume3, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_volume(vol))?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3> {
    decode_volume(&fs::read(path)?)
}
