//! Model checkpoints: JSON manifest (kind, config, parameter table) plus a raw
//! f32le payload of all parameters back to back.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;
use crate::volume::io::{f32_to_bytes, read_f32_payload, read_json, write_bytes, write_json};
use crate::volume::payload_path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in values, not bytes.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest<C> {
    pub kind: String,
    pub config: C,
    pub dtype: String,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint<C: Serialize>(
    path: &Path,
    kind: &str,
    config: &C,
    params: &ParamStore<f32>,
) -> Result<()> {
    let mut offset = 0;
    let mut entries = Vec::with_capacity(params.len());
    let mut payload = Vec::with_capacity(params.numel());
    for p in params.iter() {
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset,
        });
        offset += p.value.len();
        payload.extend_from_slice(&p.value);
    }
    write_json(
        path,
        &CheckpointManifest {
            kind: kind.to_string(),
            config,
            dtype: "f32le".into(),
            params: entries,
        },
    )?;
    write_bytes(&payload_path(path), &f32_to_bytes(&payload))
}

pub fn load_checkpoint<C: DeserializeOwned>(
    path: &Path,
    kind: &str,
) -> Result<(C, ParamStore<f32>)> {
    let m: CheckpointManifest<C> = read_json(path)?;
    if m.kind != kind {
        return Err(Error::format(
            path,
            0,
            format!("checkpoint holds a {} model, expected {kind}", m.kind),
        ));
    }
    if m.dtype != "f32le" {
        return Err(Error::format(path, 0, format!("unsupported dtype {}", m.dtype)));
    }
    let total: usize = m.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let payload = read_f32_payload(&payload_path(path), total)?;
    let mut store = ParamStore::new();
    for e in m.params {
        let n: usize = e.shape.iter().product();
        let value = payload
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::format(path, 0, format!("parameter {} out of range", e.name)))?
            .to_vec();
        store.push(e.name, &e.shape, value);
    }
    Ok((m.config, store))
}
