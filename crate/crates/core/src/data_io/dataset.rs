//! Manifest-driven dataset index and sample assembly.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::format::{read_recording, write_recording};
use super::synthetic::{generate_synthetic, SyntheticSpec};
use crate::dsp::{
    filter_signal, normalize_amplitude, preprocess, resample, segment, PatchedSignal,
    PreprocessConfig,
};
use crate::error::{Error, Result};
use crate::montage::{build_region_map, ChannelLabel, RegionMap};
use crate::numeric::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
/// Marks a directory written by [`prepare_dataset`] and records the settings
/// its recordings were filtered and resampled with.
pub const PREPARED_FILE: &str = "preprocess.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::FormatError(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub label: f64,
}

/// Entries per split, in manifest order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetIndex {
    pub train: Vec<DatasetEntry>,
    pub val: Vec<DatasetEntry>,
    pub test: Vec<DatasetEntry>,
}

impl DatasetIndex {
    pub fn split(&self, s: Split) -> &[DatasetEntry] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    label: Option<String>,
    split: String,
}

/// Reads `dir/manifest.csv` (columns `path,label,split`; paths relative to
/// `dir`). A path may appear only once across the whole manifest.
pub fn build_dataset(dir: impl AsRef<Path>) -> Result<DatasetIndex> {
    let dir = dir.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Io(e.to_string()))?;
    let mut seen: HashMap<String, Split> = HashMap::new();
    let mut index = DatasetIndex::default();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| Error::FormatError(format!("manifest: {e}")))?;
        let split: Split = row.split.parse()?;
        let label = match row.label.as_deref().map(str::trim) {
            None | Some("") => return Err(Error::MissingLabel(row.path)),
            Some(l) => l
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::FormatError(format!("label {l:?} for {:?} is not a number", row.path))
                })?,
        };
        if seen.insert(row.path.clone(), split).is_some() {
            return Err(Error::SplitOverlap(row.path));
        }
        let entry = DatasetEntry {
            path: dir.join(&row.path),
            label,
        };
        match split {
            Split::Train => index.train.push(entry),
            Split::Val => index.val.push(entry),
            Split::Test => index.test.push(entry),
        }
    }
    Ok(index)
}

/// Writes a manifest for `rows` of `(relative path, label, split)`.
pub fn write_manifest(dir: impl AsRef<Path>, rows: &[(String, f64, Split)]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.as_ref().join(MANIFEST_FILE))
        .map_err(|e| Error::Io(e.to_string()))?;
    w.write_record(["path", "label", "split"])
        .map_err(|e| Error::Io(e.to_string()))?;
    for (path, label, split) in rows {
        w.write_record([path.clone(), label.to_string(), split.to_string()])
            .map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// One model input: `C × n × t` patches and its target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub signal: PatchedSignal,
    pub label: f64,
}

/// Cuts a patched recording into consecutive windows of `segments` patches;
/// a trailing partial window is dropped.
pub fn split_segments(signal: &PatchedSignal, segments: usize) -> Result<Vec<PatchedSignal>> {
    if segments == 0 {
        return Err(Error::ConfigInvalid(
            "segments per sample must be at least 1".into(),
        ));
    }
    let (c, n, t) = (
        signal.num_channels(),
        signal.num_segments(),
        signal.patches.shape()[2],
    );
    (0..n / segments)
        .map(|w| {
            let mut data = Vec::with_capacity(c * segments * t);
            for ch in 0..c {
                for i in w * segments..(w + 1) * segments {
                    data.extend_from_slice(signal.patch(ch, i));
                }
            }
            PatchedSignal::new(Tensor::new(vec![c, segments, t], data)?)
        })
        .collect()
}

/// Samples of a labeled corpus sharing one montage.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub labels: Vec<ChannelLabel>,
    pub region_map: RegionMap,
    pub samples: Vec<Sample>,
}

fn push_recording(
    corpus: &mut Option<Corpus>,
    labels: &[ChannelLabel],
    windows: Vec<PatchedSignal>,
    label: f64,
) -> Result<()> {
    let c = corpus.get_or_insert(Corpus {
        labels: labels.to_vec(),
        region_map: build_region_map(labels)?,
        samples: Vec::new(),
    });
    if c.labels != labels {
        return Err(Error::FormatError(format!(
            "montage {:?} differs from the corpus montage {:?}",
            labels, c.labels
        )));
    }
    c.samples
        .extend(windows.into_iter().map(|signal| Sample { signal, label }));
    Ok(())
}

/// Reads, preprocesses and windows every entry. All recordings must share
/// one montage.
pub fn load_samples(
    entries: &[DatasetEntry],
    cfg: &PreprocessConfig,
    segments: usize,
) -> Result<Corpus> {
    let mut corpus = None;
    for e in entries {
        let rec = read_recording(&e.path)?;
        let windows = split_segments(&preprocess(&rec, cfg)?, segments)?;
        push_recording(&mut corpus, &rec.labels, windows, e.label)?;
    }
    corpus.ok_or_else(|| Error::EmptyInput("no recordings to load".into()))
}

/// Filters and resamples every recording listed in `src`'s manifest into
/// `dst` under the same relative path, still in microvolts, then copies the
/// manifest and writes [`PREPARED_FILE`]. Returns the number of recordings.
pub fn prepare_dataset(
    src: impl AsRef<Path>,
    dst: impl AsRef<Path>,
    cfg: &PreprocessConfig,
) -> Result<usize> {
    let (src, dst) = (src.as_ref(), dst.as_ref());
    let index = build_dataset(src)?;
    let mut rows = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for e in index.split(split) {
            let rel = e
                .path
                .strip_prefix(src)
                .map_err(|_| Error::FormatError(format!("{:?} is outside {:?}", e.path, src)))?;
            let rec = read_recording(&e.path)?;
            let out = resample(
                &filter_signal(&rec, cfg.band_lo, cfg.band_hi, cfg.notch)?,
                cfg.rate,
            )?;
            let target = dst.join(rel);
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent)?;
            }
            write_recording(&out, &target)?;
            rows.push((rel.to_string_lossy().into_owned(), e.label, split));
        }
    }
    write_manifest(dst, &rows)?;
    std::fs::write(dst.join(PREPARED_FILE), serde_json::to_vec_pretty(cfg)?)?;
    Ok(rows.len())
}

/// Loads one split of `dir`. Raw directories go through the full
/// preprocessing; directories written by [`prepare_dataset`] only get
/// amplitude scaling and segmentation, after checking that their filter and
/// rate settings match `cfg`.
pub fn load_split(
    dir: impl AsRef<Path>,
    split: Split,
    cfg: &PreprocessConfig,
    segments: usize,
) -> Result<Corpus> {
    let dir = dir.as_ref();
    let index = build_dataset(dir)?;
    let entries = index.split(split);
    let marker = dir.join(PREPARED_FILE);
    if !marker.exists() {
        return load_samples(entries, cfg, segments);
    }
    let prepared: PreprocessConfig = serde_json::from_slice(&std::fs::read(&marker)?)?;
    if (
        prepared.band_lo,
        prepared.band_hi,
        prepared.notch,
        prepared.rate,
    ) != (cfg.band_lo, cfg.band_hi, cfg.notch, cfg.rate)
    {
        return Err(Error::ConfigInvalid(format!(
            "{dir:?} was prepared with band {}-{} Hz, notch {:?}, rate {} Hz; the run asks for {}-{} Hz, notch {:?}, rate {} Hz",
            prepared.band_lo, prepared.band_hi, prepared.notch, prepared.rate, cfg.band_lo, cfg.band_hi, cfg.notch, cfg.rate
        )));
    }
    let mut corpus = None;
    for e in entries {
        let rec = read_recording(&e.path)?;
        if rec.sample_rate != cfg.rate {
            return Err(Error::FormatError(format!(
                "{:?} is at {} Hz, expected {}",
                e.path, rec.sample_rate, cfg.rate
            )));
        }
        let windows = split_segments(
            &segment(&normalize_amplitude(&rec), cfg.patch_len)?,
            segments,
        )?;
        push_recording(&mut corpus, &rec.labels, windows, e.label)?;
    }
    corpus.ok_or_else(|| Error::EmptyInput(format!("no {split} recordings in {dir:?}")))
}

/// In-memory corpus of recordings `first..first + count` from `spec`, passed
/// through the same preprocessing as files on disk.
pub fn synthetic_corpus(
    spec: &SyntheticSpec,
    first: u64,
    count: usize,
    cfg: &PreprocessConfig,
    segments: usize,
) -> Result<Corpus> {
    let mut corpus = None;
    for i in first..first + count as u64 {
        let (rec, label) = generate_synthetic(spec, i)?;
        let windows = split_segments(&preprocess(&rec, cfg)?, segments)?;
        push_recording(&mut corpus, &rec.labels, windows, label as f64)?;
    }
    corpus.ok_or_else(|| Error::EmptyInput("synthetic corpus of size zero".into()))
}
