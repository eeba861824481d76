//! Recording container: 8-byte magic, little-endian `u32` header length, a
//! JSON header, then `C·T` little-endian `f32` samples in channel-major order.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::Recording;
use crate::error::{Error, Result};
use crate::montage::ChannelLabel;

pub const RECORDING_MAGIC: &[u8; 8] = b"EEGREC01";
pub const RECORDING_VERSION: u32 = 1;
/// Headers larger than this are rejected before anything is allocated.
const MAX_HEADER_BYTES: u32 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordingHeader {
    pub version: u32,
    pub labels: Vec<ChannelLabel>,
    pub sample_rate: f64,
    pub num_samples: usize,
    pub units: String,
}

impl RecordingHeader {
    fn payload_bytes(&self) -> Result<usize> {
        self.labels
            .len()
            .checked_mul(self.num_samples)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::FormatError("declared payload size overflows".into()))
    }
}

/// Serializes `rec`; samples are stored as `f32`, so values that are not
/// exactly representable are rounded.
pub fn recording_to_bytes(rec: &Recording) -> Result<Vec<u8>> {
    rec.validate()?;
    let header = RecordingHeader {
        version: RECORDING_VERSION,
        labels: rec.labels.clone(),
        sample_rate: rec.sample_rate,
        num_samples: rec.num_samples(),
        units: "uV".into(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + header.payload_bytes()?);
    out.extend_from_slice(RECORDING_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for ch in &rec.samples {
        for &v in ch {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a recording from any reader. `available` is the number of bytes
/// left after the header if known (file size); it lets truncation be
/// reported before the payload buffer is allocated.
fn read_from(mut r: impl Read, total: Option<u64>) -> Result<Recording> {
    let mut prefix = [0u8; 12];
    r.read_exact(&mut prefix)
        .map_err(|_| Error::FormatError("file shorter than the fixed prefix".into()))?;
    if &prefix[..8] != RECORDING_MAGIC {
        return Err(Error::FormatError(
            "not a recording file (bad magic)".into(),
        ));
    }
    let hlen = u32::from_le_bytes(prefix[8..12].try_into().expect("4 bytes"));
    if hlen > MAX_HEADER_BYTES || total.is_some_and(|t| t < 12 + u64::from(hlen)) {
        return Err(Error::FormatError(format!(
            "header length {hlen} out of range"
        )));
    }
    let mut json = vec![0u8; hlen as usize];
    r.read_exact(&mut json)
        .map_err(|_| Error::FormatError("header truncated".into()))?;
    let version = serde_json::from_slice::<serde_json::Value>(&json)?
        .get("version")
        .and_then(serde_json::Value::as_u64);
    if version != Some(u64::from(RECORDING_VERSION)) {
        return Err(Error::FormatError(format!(
            "unsupported recording version {version:?}"
        )));
    }
    let header: RecordingHeader = serde_json::from_slice(&json)?;
    if header.units != "uV" {
        return Err(Error::FormatError(format!(
            "unsupported units {:?}",
            header.units
        )));
    }
    let expected = header.payload_bytes()?;
    if let Some(t) = total {
        let found = t - 12 - u64::from(hlen);
        if found < expected as u64 {
            return Err(Error::TruncatedPayload {
                expected,
                found: found as usize,
            });
        }
        if found > expected as u64 {
            return Err(Error::FormatError(format!(
                "{} trailing bytes after payload",
                found - expected as u64
            )));
        }
    }
    let mut payload = Vec::new();
    r.by_ref().take(expected as u64).read_to_end(&mut payload)?;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::FormatError("trailing bytes after payload".into()));
    }
    let t = header.num_samples;
    let samples = payload
        .chunks_exact(4 * t.max(1))
        .map(|ch| {
            ch.chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .collect()
        })
        .collect();
    Recording::new(samples, header.sample_rate, header.labels)
        .map_err(|e| Error::FormatError(e.to_string()))
}

pub fn recording_from_bytes(bytes: &[u8]) -> Result<Recording> {
    read_from(bytes, Some(bytes.len() as u64))
}

pub fn write_recording(rec: &Recording, path: impl AsRef<Path>) -> Result<()> {
    let bytes = recording_to_bytes(rec)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_recording(path: impl AsRef<Path>) -> Result<Recording> {
    let file = File::open(path)?;
    let total = file.metadata()?.len();
    read_from(std::io::BufReader::new(file), Some(total))
}
