//! Checkpoint container: 8-byte magic, little-endian `u64` manifest length,
//! JSON manifest, then every parameter as little-endian `f64` in manifest
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelConfig, TaskKind};
use crate::error::{Error, Result};
use crate::montage::RegionMap;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EEGFMCK1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadEntry {
    kind: TaskKind,
    channels: usize,
    segments: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    dtype: String,
    config: ModelConfig,
    region_map: RegionMap,
    head: Option<HeadEntry>,
    params: Vec<ParamEntry>,
}

impl Model {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dtype: "f64".into(),
            config: self.config.clone(),
            region_map: self.region_map.clone(),
            head: self.head.map(|h| HeadEntry {
                kind: h.kind,
                channels: h.channels,
                segments: h.segments,
            }),
            params: self
                .params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + self.params.numel() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::FormatError("not a checkpoint (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < len {
            return Err(Error::TruncatedPayload {
                expected: len,
                found: body.len(),
            });
        }
        let manifest: Manifest = serde_json::from_slice(&body[..len])?;
        if manifest.format_version != FORMAT_VERSION || manifest.dtype != "f64" {
            return Err(Error::FormatError(format!(
                "unsupported checkpoint version {} / dtype {}",
                manifest.format_version, manifest.dtype
            )));
        }
        let mut model = build_model(&manifest.config, &manifest.region_map, 0)?;
        if let Some(h) = &manifest.head {
            model.attach_head(h.kind, h.channels, h.segments, 0)?;
        }
        let layout_matches = model.params.len() == manifest.params.len()
            && model
                .params
                .iter()
                .zip(&manifest.params)
                .all(|(p, e)| p.name == e.name && p.value.shape() == e.shape.as_slice());
        if !layout_matches {
            return Err(Error::FormatError(
                "parameter list does not match the configuration".into(),
            ));
        }
        let payload = &body[len..];
        let expected = model.params.numel() * 8;
        if payload.len() != expected {
            return Err(Error::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        let mut chunks = payload.chunks_exact(8);
        for p in model.params.iter_mut() {
            for v in p.value.data_mut() {
                *v = f64::from_le_bytes(
                    chunks
                        .next()
                        .expect("length checked")
                        .try_into()
                        .expect("8 bytes"),
                );
            }
        }
        Ok(model)
    }
}

pub fn write_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model.to_bytes()?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    Model::from_bytes(&fs::read(path)?)
}
