//! Run settings: defaults, a flat dotted-key TOML file on top, command-line
//! overrides on top of that.

use std::fmt::Write as _;
use std::path::Path;

use eegfm::bench::{AttnKind, BenchSize};
use eegfm::data_io::SyntheticSpec;
use eegfm::dsp::PreprocessConfig;
use eegfm::model::{LayerUnit, MaskToken, ModelConfig, TaskKind};
use eegfm::montage::{build_region_map, labels, ChannelLabel, STANDARD_19};
use eegfm::numeric::Stencil;
use eegfm::train::{AdamWConfig, FinetuneConfig, PretrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct Settings {
    /// Drives model initialization, shuffling, masks and synthetic data.
    pub seed: u64,
    pub data: DataSettings,
    pub preprocess: PreprocessSettings,
    pub model: ModelSettings,
    pub cst: CstSettings,
    pub ssa: SsaSettings,
    pub pretrain: PretrainSettings,
    pub finetune: FinetuneSettings,
    pub synthetic: SyntheticSettings,
    pub gradcheck: GradcheckSettings,
    pub bench: BenchSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSettings {
    /// Patches per model input; longer recordings are cut into windows.
    pub segments: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self { segments: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSettings {
    pub band_lo: f64,
    pub band_hi: f64,
    /// Mains frequency to notch out; 0 disables the notch.
    pub notch: f64,
    pub rate: f64,
    pub patch_len: usize,
}

impl Default for PreprocessSettings {
    fn default() -> Self {
        let d = PreprocessConfig::default();
        Self {
            band_lo: d.band_lo,
            band_hi: d.band_hi,
            notch: d.notch.unwrap_or(0.0),
            rate: d.rate,
            patch_len: d.patch_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub layers: usize,
    pub dim: usize,
    pub dropout: f64,
    pub mask_ratio: f64,
    pub layer_unit: LayerUnit,
    pub mask_token: MaskToken,
    pub conv_channels: usize,
    pub norm_groups: usize,
    pub max_channels: usize,
    pub max_segments: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            layers: d.layers,
            dim: d.dim,
            dropout: d.dropout,
            mask_ratio: d.mask_ratio,
            layer_unit: d.layer_unit,
            mask_token: d.mask_token,
            conv_channels: d.conv_channels,
            norm_groups: d.norm_groups,
            max_channels: d.max_channels,
            max_segments: d.max_segments,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CstSettings {
    pub kernels: Vec<usize>,
    /// Per-scale widths; empty means allocate automatically.
    pub scale_dims: Vec<usize>,
}

impl Default for CstSettings {
    fn default() -> Self {
        Self {
            kernels: ModelConfig::default().kernels,
            scale_dims: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsaSettings {
    pub window: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for SsaSettings {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            window: d.window,
            heads: d.heads,
            ffn_dim: d.ffn_dim,
        }
    }
}

fn adamw(beta1: f64, beta2: f64, eps: f64, weight_decay: f64, clip_norm: f64) -> AdamWConfig {
    AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
        clip_norm: (clip_norm > 0.0).then_some(clip_norm),
    }
}

fn nonzero(v: usize) -> Option<usize> {
    (v > 0).then_some(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSettings {
    pub epochs: usize,
    /// Total optimizer steps; 0 runs `epochs` full epochs instead.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    /// Cosine cycle in epochs; 0 means the length of the run.
    pub cycle_epochs: usize,
    pub shuffle: bool,
    pub fixed_masks: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            epochs: d.epochs,
            steps: d.steps.unwrap_or(0),
            batch_size: d.batch_size,
            lr: d.lr,
            min_lr: d.min_lr,
            cycle_epochs: d.cycle_epochs.unwrap_or(0),
            shuffle: d.shuffle,
            fixed_masks: d.fixed_masks,
            beta1: d.optim.beta1,
            beta2: d.optim.beta2,
            eps: d.optim.eps,
            weight_decay: d.optim.weight_decay,
            clip_norm: d.optim.clip_norm.unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSettings {
    pub task: TaskName,
    /// Class count for classification.
    pub classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    /// Cosine cycle in epochs; 0 means the length of the run.
    pub cycle_epochs: usize,
    pub label_smoothing: f64,
    pub shuffle: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        let d = FinetuneConfig::default();
        Self {
            task: TaskName::Classification,
            classes: 2,
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            min_lr: d.min_lr,
            cycle_epochs: d.cycle_epochs.unwrap_or(0),
            label_smoothing: d.label_smoothing,
            shuffle: d.shuffle,
            beta1: d.optim.beta1,
            beta2: d.optim.beta2,
            eps: d.optim.eps,
            weight_decay: d.optim.weight_decay,
            clip_norm: d.optim.clip_norm.unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSettings {
    pub channels: Vec<String>,
    pub duration_s: f64,
    pub sample_rate: f64,
    pub classes: usize,
    pub amplitude_uv: f64,
    pub noise_uv: f64,
    /// Unlabeled recordings for pretraining when no `--data` is given.
    pub pretrain_count: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        Self {
            channels: STANDARD_19.iter().map(|s| s.to_string()).collect(),
            duration_s: 30.0,
            sample_rate: 200.0,
            classes: 2,
            amplitude_uv: 50.0,
            noise_uv: 10.0,
            pretrain_count: 256,
            train: 128,
            val: 64,
            test: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StencilName {
    Central,
    FivePoint,
}

impl From<StencilName> for Stencil {
    fn from(s: StencilName) -> Self {
        match s {
            StencilName::Central => Stencil::Central,
            StencilName::FivePoint => Stencil::FivePoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSettings {
    pub eps: f64,
    pub stencil: StencilName,
    pub tolerance: f64,
    pub batch: usize,
    /// Refuse models with more parameter elements than this; every element
    /// costs two (central) or four (five-point) forward passes.
    pub max_elements: usize,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            stencil: StencilName::FivePoint,
            tolerance: 1e-4,
            batch: 2,
            max_elements: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    /// `CxN` sizes (channels x segments), strictly increasing in C·N.
    pub sizes: Vec<String>,
    pub variants: Vec<String>,
    pub d: usize,
    pub window: usize,
    pub repeats: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            sizes: ["19x15", "19x30", "19x60", "64x30"]
                .map(String::from)
                .to_vec(),
            variants: AttnKind::ALL.iter().map(|k| k.to_string()).collect(),
            d: 200,
            window: 5,
            repeats: 5,
        }
    }
}

/// Synthetic recordings are drawn from disjoint index ranges so the
/// pretraining corpus and the three labeled splits never share a recording.
pub const PRETRAIN_BASE: u64 = 0;
pub const TRAIN_BASE: u64 = 1_000_000;
pub const VAL_BASE: u64 = 2_000_000;
pub const TEST_BASE: u64 = 3_000_000;

impl Settings {
    /// Defaults, then `file`, then `overrides` (dotted key, value) in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", path.display()))
                })?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        for (key, value) in overrides {
            set_dotted(&mut table, key, value.clone())?;
        }
        let settings: Settings = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| {
                CliError::Usage(format!("configuration: {}", e.message()))
            })?;
        settings.validate()?;
        Ok(settings)
    }

    fn validate(&self) -> Result<(), CliError> {
        let usage = |e: eegfm::Error| CliError::Usage(e.to_string());
        self.model_config().validate().map_err(usage)?;
        self.synthetic_labels()?;
        self.bench_sizes()?;
        self.bench_variants()?;
        if self.data.segments == 0 || self.preprocess.patch_len == 0 {
            return Err(CliError::Usage(
                "data.segments and preprocess.patch_len must be positive".into(),
            ));
        }
        if self.finetune.task == TaskName::Classification && self.finetune.classes < 2 {
            return Err(CliError::Usage(
                "finetune.classes must be at least 2".into(),
            ));
        }
        Ok(())
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        let p = &self.preprocess;
        PreprocessConfig {
            band_lo: p.band_lo,
            band_hi: p.band_hi,
            notch: (p.notch > 0.0).then_some(p.notch),
            rate: p.rate,
            patch_len: p.patch_len,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            layers: m.layers,
            dim: m.dim,
            kernels: self.cst.kernels.clone(),
            scale_dims: (!self.cst.scale_dims.is_empty()).then(|| self.cst.scale_dims.clone()),
            window: self.ssa.window,
            heads: self.ssa.heads,
            ffn_dim: self.ssa.ffn_dim,
            dropout: m.dropout,
            patch_len: self.preprocess.patch_len,
            mask_ratio: m.mask_ratio,
            layer_unit: m.layer_unit,
            mask_token: m.mask_token,
            conv_channels: m.conv_channels,
            norm_groups: m.norm_groups,
            max_channels: m.max_channels,
            max_segments: m.max_segments,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            steps: nonzero(p.steps),
            batch_size: p.batch_size,
            lr: p.lr,
            min_lr: p.min_lr,
            cycle_epochs: nonzero(p.cycle_epochs),
            optim: adamw(p.beta1, p.beta2, p.eps, p.weight_decay, p.clip_norm),
            shuffle: p.shuffle,
            fixed_masks: p.fixed_masks,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            epochs: f.epochs,
            batch_size: f.batch_size,
            lr: f.lr,
            min_lr: f.min_lr,
            cycle_epochs: nonzero(f.cycle_epochs),
            optim: adamw(f.beta1, f.beta2, f.eps, f.weight_decay, f.clip_norm),
            label_smoothing: f.label_smoothing,
            shuffle: f.shuffle,
        }
    }

    pub fn task_kind(&self) -> TaskKind {
        match self.finetune.task {
            TaskName::Classification => TaskKind::Classification {
                classes: self.finetune.classes,
            },
            TaskName::Regression => TaskKind::Regression,
        }
    }

    pub fn synthetic_labels(&self) -> Result<Vec<ChannelLabel>, CliError> {
        let names: Vec<&str> = self.synthetic.channels.iter().map(String::as_str).collect();
        let usage = |e: eegfm::Error| CliError::Usage(format!("synthetic.channels: {e}"));
        let labels = labels(&names).map_err(usage)?;
        build_region_map(&labels).map_err(usage)?;
        Ok(labels)
    }

    /// Planted-class generator for this run's seed.
    pub fn synthetic_spec(&self) -> Result<SyntheticSpec, CliError> {
        let s = &self.synthetic;
        let mut spec = SyntheticSpec::planted(
            self.synthetic_labels()?,
            s.duration_s,
            s.sample_rate,
            s.classes,
            self.seed,
        )
        .map_err(|e| CliError::Usage(format!("synthetic: {e}")))?;
        spec.noise_uv = s.noise_uv;
        for class in &mut spec.classes {
            class.amplitude_uv = s.amplitude_uv;
        }
        spec.validate()
            .map_err(|e| CliError::Usage(format!("synthetic: {e}")))?;
        Ok(spec)
    }

    pub fn bench_sizes(&self) -> Result<Vec<BenchSize>, CliError> {
        self.bench
            .sizes
            .iter()
            .map(|s| {
                let parsed = s
                    .split_once(['x', 'X'])
                    .and_then(|(c, n)| Some((c.trim().parse().ok()?, n.trim().parse().ok()?)));
                match parsed {
                    Some((channels, segments)) if channels > 0 && segments > 0 => {
                        Ok(BenchSize { channels, segments })
                    }
                    _ => Err(CliError::Usage(format!(
                        "bench.sizes: {s:?} is not CxN with positive C and N"
                    ))),
                }
            })
            .collect()
    }

    pub fn bench_variants(&self) -> Result<Vec<AttnKind>, CliError> {
        self.bench
            .variants
            .iter()
            .map(|v| {
                v.parse()
                    .map_err(|e: eegfm::Error| CliError::Usage(format!("bench.variants: {e}")))
            })
            .collect()
    }

    /// Every setting as one `section.key = value` line, loadable with
    /// `--config`.
    pub fn to_dotted(&self) -> String {
        let value = Value::try_from(self).expect("settings serialize to TOML");
        let mut out = String::new();
        flatten(&mut out, "", &value);
        out
    }
}

fn flatten(out: &mut String, prefix: &str, value: &Value) {
    match value {
        Value::Table(t) => {
            // scalars before sections so `seed` leads the file
            let (sections, scalars): (Vec<_>, Vec<_>) = t.iter().partition(|(_, v)| v.is_table());
            for (k, v) in scalars.into_iter().chain(sections) {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(out, &key, v);
            }
        }
        other => {
            let _ = writeln!(out, "{prefix} = {other}");
        }
    }
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| CliError::Usage(format!("empty key in {key:?}")))?;
    let mut current = table;
    for part in parts {
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("{key}: {part} is a value, not a section")))?;
    }
    current.insert(last.to_string(), value);
    Ok(())
}

/// Parses the value half of `--set key=value` as a TOML value; bare words
/// that are not valid TOML are taken as strings.
pub fn parse_assignment(text: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {text:?}")))?;
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_mirror_library_defaults() {
        let s = Settings::resolve(None, &[]).unwrap();
        assert_eq!(s.model_config(), ModelConfig::default());
        assert_eq!(s.pretrain_config(), PretrainConfig::default());
        assert_eq!(s.finetune_config(), FinetuneConfig::default());
        assert_eq!(s.preprocess_config(), PreprocessConfig::default());
    }

    #[test]
    fn file_then_flags() {
        let f = file("seed = 3\nssa.window = 6\npretrain.lr = 0.01\n");
        let s = Settings::resolve(Some(f.path()), &[("pretrain.lr".into(), Value::Float(0.5))])
            .unwrap();
        assert_eq!(s.seed, 3);
        assert_eq!(s.ssa.window, 6);
        assert_eq!(s.pretrain.lr, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let f = file("ssa.windw = 6\n");
        let err = Settings::resolve(Some(f.path()), &[]).unwrap_err();
        assert!(
            matches!(&err, CliError::Usage(m) if m.contains("windw")),
            "{err:?}"
        );
        let err = Settings::resolve(None, &[("nosuch.key".into(), Value::Integer(1))]).unwrap_err();
        assert!(
            matches!(&err, CliError::Usage(m) if m.contains("nosuch")),
            "{err:?}"
        );
        let err =
            Settings::resolve(None, &[("pretrain.beta3".into(), Value::Float(0.1))]).unwrap_err();
        assert!(
            matches!(&err, CliError::Usage(m) if m.contains("beta3")),
            "{err:?}"
        );
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        for (k, v) in [
            ("model.dim", Value::Integer(15)),
            ("ssa.heads", Value::Integer(7)),
            ("seed", Value::String("x".into())),
            (
                "synthetic.channels",
                Value::Array(vec![Value::String("Q9".into())]),
            ),
        ] {
            assert!(
                matches!(
                    Settings::resolve(None, &[(k.into(), v)]),
                    Err(CliError::Usage(_))
                ),
                "{k}"
            );
        }
        let bad = file("this is not toml");
        assert!(matches!(
            Settings::resolve(Some(bad.path()), &[]),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn dotted_dump_round_trips() {
        let f = file(
            "seed = 9\ncst.kernels = [1, 3]\nmodel.dim = 16\nssa.heads = 2\npreprocess.notch = 0\n",
        );
        let s = Settings::resolve(Some(f.path()), &[]).unwrap();
        let dump = s.to_dotted();
        assert!(dump.starts_with("seed = 9\n"), "{dump}");
        assert!(dump.contains("\nssa.window = 5\n"));
        assert!(dump.lines().all(|l| !l.starts_with('[')));
        let again = Settings::resolve(Some(file(&dump).path()), &[]).unwrap();
        assert_eq!(again, s);
        assert_eq!(again.preprocess_config().notch, None);
    }

    #[test]
    fn assignments() {
        assert_eq!(
            parse_assignment("a.b=3").unwrap(),
            ("a.b".into(), Value::Integer(3))
        );
        assert_eq!(
            parse_assignment("a = [1, 2]").unwrap().1,
            Value::Array(vec![Value::Integer(1), Value::Integer(2)])
        );
        assert_eq!(
            parse_assignment("task=regression").unwrap().1,
            Value::String("regression".into())
        );
        assert!(parse_assignment("novalue").is_err());
    }

    #[test]
    fn bench_size_parsing() {
        let mut s = Settings::default();
        assert_eq!(
            s.bench_sizes().unwrap()[3],
            BenchSize {
                channels: 64,
                segments: 30
            }
        );
        s.bench.sizes = vec!["19by30".into()];
        assert!(s.bench_sizes().is_err());
    }
}
