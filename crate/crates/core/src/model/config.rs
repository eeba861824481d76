use serde::{Deserialize, Serialize};

use crate::cst::ScaleSpec;
use crate::embed::EmbedConfig;
use crate::error::{Error, Result};

/// How `layers` counts encoder blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerUnit {
    /// `layers` repetitions of one tokenization block plus one attention block.
    Pair,
    /// `layers` blocks in total, alternating and starting with tokenization.
    Single,
}

/// What replaces the content of masked segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskToken {
    Zero,
    Learnable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub kernels: Vec<usize>,
    /// Explicit per-scale widths; allocated automatically when absent.
    pub scale_dims: Option<Vec<usize>>,
    pub window: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub patch_len: usize,
    pub mask_ratio: f64,
    pub layer_unit: LayerUnit,
    pub mask_token: MaskToken,
    pub conv_channels: usize,
    pub norm_groups: usize,
    pub max_channels: usize,
    pub max_segments: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            dim: 200,
            kernels: vec![1, 3, 5],
            scale_dims: None,
            window: 5,
            heads: 8,
            ffn_dim: 800,
            dropout: 0.1,
            patch_len: 200,
            mask_ratio: 0.5,
            layer_unit: LayerUnit::Pair,
            mask_token: MaskToken::Zero,
            conv_channels: 8,
            norm_groups: 4,
            max_channels: 64,
            max_segments: 64,
        }
    }
}

impl ModelConfig {
    /// Two-layer, 16-wide configuration for 4 channels x 8 segments of 20
    /// samples; small enough to gradient-check every parameter.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            dim: 16,
            kernels: vec![1, 3],
            window: 4,
            heads: 2,
            ffn_dim: 32,
            patch_len: 20,
            conv_channels: 4,
            norm_groups: 2,
            max_channels: 8,
            max_segments: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return bad(format!(
                "embedding dim {} must be positive and even",
                self.dim
            ));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embedding dim {} not divisible by {} heads",
                self.dim, self.heads
            ));
        }
        if self.window == 0 || self.ffn_dim == 0 || self.patch_len == 0 {
            return bad("window, ffn_dim and patch_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask ratio {} outside [0, 1)", self.mask_ratio));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_channels == 0 || self.max_segments == 0 {
            return bad("positional tables must be non-empty".into());
        }
        self.scale_spec()?;
        Ok(())
    }

    pub fn scale_spec(&self) -> Result<ScaleSpec> {
        let spec = match &self.scale_dims {
            Some(dims) => ScaleSpec::new(self.kernels.clone(), dims.clone())?,
            None => ScaleSpec::allocate(self.dim, self.kernels.clone())?,
        };
        if spec.dim() != self.dim {
            return Err(Error::ConfigInvalid(format!(
                "scale widths {:?} do not sum to {}",
                spec.dims(),
                self.dim
            )));
        }
        Ok(spec)
    }

    pub(crate) fn embed_config(&self) -> EmbedConfig {
        EmbedConfig {
            dim: self.dim,
            patch_len: self.patch_len,
            conv_channels: self.conv_channels,
            norm_groups: self.norm_groups,
            max_channels: self.max_channels,
            max_segments: self.max_segments,
            learnable_mask_token: self.mask_token == MaskToken::Learnable,
        }
    }

    /// Number of (tokenization, attention) blocks in encoder order.
    pub fn block_count(&self) -> usize {
        match self.layer_unit {
            LayerUnit::Pair => 2 * self.layers,
            LayerUnit::Single => self.layers,
        }
    }
}
