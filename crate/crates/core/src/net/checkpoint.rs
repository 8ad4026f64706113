//! Checkpoint container.
//!
//! Layout: the line `MLCKPT 1`, a line holding the byte length of a JSON
//! header, the header itself (config, provenance, array table), then every
//! array as little-endian f32 in table order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::RfResNet;
use super::params::{ParamKind, ParamStore};
use super::RfResNetConfig;
use crate::error::{Error, Result};

const MAGIC: &str = "MLCKPT 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Baseline,
    Da,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: Stage,
    pub seed: u64,
    pub epoch: usize,
    pub validation_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub id: String,
    pub model: RfResNet,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
}

#[derive(Serialize, Deserialize)]
struct Header {
    id: String,
    config: RfResNetConfig,
    provenance: Provenance,
    arrays: Vec<ArrayEntry>,
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = &self.model.params;
        let header = Header {
            id: self.id.clone(),
            config: self.model.config().clone(),
            provenance: self.provenance.clone(),
            arrays: params
                .entries()
                .iter()
                .map(|e| ArrayEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    kind: e.kind,
                })
                .collect(),
        };
        let json = serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = format!("{MAGIC}\n{}\n{json}", json.len()).into_bytes();
        for e in params.entries() {
            for &v in &e.data {
                let f = v as f32;
                if f as f64 != v {
                    return Err(Error::Checkpoint(format!("array `{}` holds a value off the f32 grid", e.name)));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        if lines.next() != Some(MAGIC.as_bytes()) {
            return Err(bad("missing checkpoint magic"));
        }
        let len: usize = std::str::from_utf8(lines.next().ok_or_else(|| bad("missing header length"))?)
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad("bad header length"))?;
        let rest = lines.next().ok_or_else(|| bad("missing header"))?;
        if rest.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..len]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let body = &rest[len..];

        let mut store = ParamStore::new();
        let mut offset = 0;
        for a in &header.arrays {
            let count: usize = a.shape.iter().product();
            let end = offset + 4 * count;
            if end > body.len() {
                return Err(bad("truncated array data"));
            }
            let data = body[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.add(a.name.clone(), a.shape.clone(), a.kind, data);
            offset = end;
        }
        if offset != body.len() {
            return Err(bad("trailing bytes after array data"));
        }
        let model = RfResNet::from_params(&header.config, &store)?;
        Ok(Self {
            id: header.id,
            model,
            provenance: header.provenance,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::from_bytes(&bytes)
}
