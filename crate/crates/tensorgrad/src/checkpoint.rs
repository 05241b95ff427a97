//! `CKPT0001` container: magic | u32 LE manifest length | JSON manifest | f32 LE parameter
//! payloads in manifest order | optional f32 LE Adam `m` then `v` payloads in the same order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::{AdamHyper, AdamState};
use crate::error::{GradError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CKPT0001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    #[serde(flatten)]
    pub hyper: AdamHyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: Vec<ManifestEntry>,
    pub optimizer_state: bool,
    pub optimizer: Option<OptimizerMeta>,
}

pub fn encode(store: &ParamStore<f32>, adam: Option<&AdamState<f32>>) -> Result<Vec<u8>> {
    let manifest = Manifest {
        params: store
            .entries()
            .iter()
            .map(|e| ManifestEntry {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                trainable: e.trainable,
            })
            .collect(),
        optimizer_state: adam.is_some(),
        optimizer: adam.map(|a| OptimizerMeta {
            step: a.step,
            hyper: a.hyper,
        }),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| GradError::Format(e.to_string()))?;
    let scalars = store.num_scalars() * if adam.is_some() { 3 } else { 1 };
    let mut out = Vec::with_capacity(12 + json.len() + 4 * scalars);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for e in store.entries() {
        put_f32s(&mut out, e.tensor.data());
    }
    if let Some(a) = adam {
        if a.m.len() != store.len() || a.v.len() != store.len() {
            return Err(GradError::Contract("optimizer state does not match the store".into()));
        }
        for m in &a.m {
            put_f32s(&mut out, m);
        }
        for v in &a.v {
            put_f32s(&mut out, v);
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore<f32>, Option<AdamState<f32>>)> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(GradError::Format("bad magic".into()));
    }
    if bytes.len() < 12 {
        return Err(GradError::Format("truncated manifest length".into()));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < mlen {
        return Err(GradError::Format("truncated manifest".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..mlen]).map_err(|e| GradError::Format(format!("manifest: {e}")))?;
    if manifest.optimizer_state != manifest.optimizer.is_some() {
        return Err(GradError::Format("optimizer flag disagrees with optimizer metadata".into()));
    }
    let counts: Vec<usize> = manifest.params.iter().map(|p| p.shape.iter().product()).collect();
    let total: usize = counts.iter().sum();
    let expect = total * if manifest.optimizer_state { 3 } else { 1 } * 4;
    let payload = &body[mlen..];
    if payload.len() != expect {
        return Err(GradError::Format(format!(
            "payload has {} bytes, manifest implies {expect}",
            payload.len()
        )));
    }
    let mut cursor = payload;
    let mut store = ParamStore::new();
    for (p, &n) in manifest.params.iter().zip(&counts) {
        let data = take_f32s(&mut cursor, n);
        store.add(p.name.clone(), Tensor::new(p.shape.clone(), data)?, p.trainable)?;
    }
    let adam = match manifest.optimizer {
        Some(meta) => {
            let m = counts.iter().map(|&n| take_f32s(&mut cursor, n)).collect();
            let v = counts.iter().map(|&n| take_f32s(&mut cursor, n)).collect();
            Some(AdamState {
                step: meta.step,
                m,
                v,
                hyper: meta.hyper,
            })
        }
        None => None,
    };
    Ok((store, adam))
}

pub fn save(path: &Path, store: &ParamStore<f32>, adam: Option<&AdamState<f32>>) -> Result<()> {
    let bytes = encode(store, adam)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore<f32>, Option<AdamState<f32>>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn take_f32s(cursor: &mut &[u8], n: usize) -> Vec<f32> {
    let (head, rest) = cursor.split_at(4 * n);
    *cursor = rest;
    head.chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}
