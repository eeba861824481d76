//! Preliminary feature encoding: raw patches to the initial token grid.
//!
//! Each `t`-sample patch yields `d/2` features from a small temporal
//! convolution stack and `d/2` from a linear map of its rFFT magnitude. A
//! factorized learnable position code (channel row + segment row) is added.

use std::rc::Rc;

use rand::Rng;

use crate::dsp::PatchedSignal;
use crate::error::{Error, Result};
use crate::layers::{Conv1d, Linear};
use crate::montage::RegionMap;
use crate::numeric::{rfft_magnitude_rows, Graph, ParamId, ParamStore, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

/// Batch, channel and segment extents of a flattened token grid.
///
/// Tokens are stored as rows `[B * C * n, d]`; row `(b * C + j) * n + i`
/// holds channel `j`, segment `i` of sample `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub batch: usize,
    pub channels: usize,
    pub segments: usize,
}

impl GridShape {
    pub fn new(batch: usize, channels: usize, segments: usize) -> Self {
        Self {
            batch,
            channels,
            segments,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.channels * self.segments
    }

    pub fn row(&self, b: usize, j: usize, i: usize) -> usize {
        (b * self.channels + j) * self.segments + i
    }

    /// Channel-major sequences of segment rows, one per (sample, channel).
    pub fn channel_sequences(&self) -> Vec<Vec<usize>> {
        (0..self.batch * self.channels)
            .map(|bj| (bj * self.segments..(bj + 1) * self.segments).collect())
            .collect()
    }
}

/// The `C x n x d` representation of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub values: Tensor,
    pub region_map: RegionMap,
}

impl TokenGrid {
    pub fn new(values: Tensor, region_map: RegionMap) -> Result<Self> {
        match values.shape() {
            [c, _, _] if *c == region_map.num_channels() => Ok(Self { values, region_map }),
            s => Err(Error::ShapeMismatch(format!(
                "token grid {s:?} for {} channels",
                region_map.num_channels()
            ))),
        }
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn segments(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn grid_shape(&self) -> GridShape {
        GridShape::new(1, self.channels(), self.segments())
    }

    /// Row view `[C * n, d]`.
    pub fn rows(&self) -> Tensor {
        let (c, n, d) = (self.channels(), self.segments(), self.dim());
        self.values
            .clone()
            .reshape(&[c * n, d])
            .expect("same element count")
    }
}

/// Factorized additive position code: `channel_table[j] + time_table[i]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionalEncoding {
    pub channel_table: ParamId,
    pub time_table: ParamId,
}

impl PositionalEncoding {
    /// Zero-initialized tables for up to `max_channels` x `max_segments`.
    pub fn new(store: &mut ParamStore, max_channels: usize, max_segments: usize, d: usize) -> Self {
        Self {
            channel_table: store.add("embed.pos.channel", Tensor::zeros(&[max_channels, d])),
            time_table: store.add("embed.pos.time", Tensor::zeros(&[max_segments, d])),
        }
    }

    /// Position code of segment `i` on channel `j`.
    pub fn lookup(&self, store: &ParamStore, i: usize, j: usize) -> Result<Tensor> {
        let ct = store.value(self.channel_table);
        let tt = store.value(self.time_table);
        if j >= ct.rows() {
            return Err(Error::IndexOutOfRange {
                index: j,
                limit: ct.rows(),
            });
        }
        if i >= tt.rows() {
            return Err(Error::IndexOutOfRange {
                index: i,
                limit: tt.rows(),
            });
        }
        let v = ct
            .row(j)
            .iter()
            .zip(tt.row(i))
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(vec![ct.cols()], v)
    }

    /// Position codes for every row of `shape`, `[rows, d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, shape: GridShape) -> Result<Var> {
        let mut chan = Vec::with_capacity(shape.rows());
        let mut time = Vec::with_capacity(shape.rows());
        for _ in 0..shape.batch {
            for j in 0..shape.channels {
                for i in 0..shape.segments {
                    chan.push(j);
                    time.push(i);
                }
            }
        }
        let ct = g.param(store, self.channel_table);
        let tt = g.param(store, self.time_table);
        let c = g.gather_rows(ct, Rc::new(chan))?;
        let t = g.gather_rows(tt, Rc::new(time))?;
        g.add(c, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedConfig {
    pub dim: usize,
    pub patch_len: usize,
    pub conv_channels: usize,
    pub norm_groups: usize,
    pub max_channels: usize,
    pub max_segments: usize,
    pub learnable_mask_token: bool,
}

/// Temporal-convolution and spectral branches plus position code.
///
/// Every content map is bias-free, so an all-zero patch embeds to exactly the
/// zero vector and a masked token carries only its position code.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedding {
    pub config: EmbedConfig,
    conv1: Conv1d,
    norm1: ParamId,
    conv2: Conv1d,
    norm2: ParamId,
    temporal_proj: Linear,
    spectral_proj: Linear,
    pub positional: PositionalEncoding,
    pub mask_token: Option<ParamId>,
}

impl PatchEmbedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: EmbedConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let EmbedConfig {
            dim,
            patch_len,
            conv_channels,
            norm_groups,
            ..
        } = config;
        if dim % 2 != 0 {
            return Err(Error::OddEmbedDim(dim));
        }
        if patch_len == 0 || conv_channels == 0 || norm_groups == 0 {
            return Err(Error::ConfigInvalid(
                "embedding sizes must be positive".into(),
            ));
        }
        if conv_channels % norm_groups != 0 {
            return Err(Error::ConfigInvalid(format!(
                "{conv_channels} conv channels not divisible into {norm_groups} norm groups"
            )));
        }
        let half = dim / 2;
        let conv1 = Conv1d::new(store, "embed.conv1", 1, conv_channels, 7, false, rng);
        let norm1 = store.add("embed.norm1.gain", Tensor::full(&[conv_channels], 1.0));
        let conv2 = Conv1d::new(
            store,
            "embed.conv2",
            conv_channels,
            conv_channels,
            5,
            false,
            rng,
        );
        let norm2 = store.add("embed.norm2.gain", Tensor::full(&[conv_channels], 1.0));
        let temporal_proj = Linear::new(
            store,
            "embed.temporal_proj",
            patch_len * conv_channels,
            half,
            false,
            rng,
        );
        let spectral_proj = Linear::new(
            store,
            "embed.spectral_proj",
            patch_len / 2 + 1,
            half,
            false,
            rng,
        );
        let positional =
            PositionalEncoding::new(store, config.max_channels, config.max_segments, dim);
        let mask_token = config
            .learnable_mask_token
            .then(|| store.add("embed.mask_token", Tensor::zeros(&[1, dim])));
        Ok(Self {
            config,
            conv1,
            norm1,
            conv2,
            norm2,
            temporal_proj,
            spectral_proj,
            positional,
            mask_token,
        })
    }

    /// Content features (both branches, no position code) of `patches[rows, t]`.
    pub fn content(&self, g: &mut Graph, store: &ParamStore, patches: &Tensor) -> Result<Var> {
        let t = self.config.patch_len;
        if patches.shape().len() != 2 || patches.cols() != t {
            return Err(Error::ShapeMismatch(format!(
                "patches {:?}, expected [rows, {t}]",
                patches.shape()
            )));
        }
        let rows = patches.rows();
        let ch = self.config.conv_channels;
        let groups = self.config.norm_groups;

        let x = g.constant(patches.clone().reshape(&[rows, t, 1])?);
        let w1 = g.param(store, self.conv1.weight);
        let h = g.grouped_conv1d(x, w1, None)?;
        let n1 = g.param(store, self.norm1);
        let h = g.group_norm(h, n1, None, groups, NORM_EPS)?;
        let h = g.gelu(h);
        let w2 = g.param(store, self.conv2.weight);
        let h = g.grouped_conv1d(h, w2, None)?;
        let n2 = g.param(store, self.norm2);
        let h = g.group_norm(h, n2, None, groups, NORM_EPS)?;
        let h = g.gelu(h);
        let h = g.reshape(h, &[rows, t * ch])?;
        let temporal = self.temporal_proj.forward(g, store, h)?;

        let spectrum = g.constant(rfft_magnitude_rows(patches));
        let spectral = self.spectral_proj.forward(g, store, spectrum)?;
        g.concat(&[temporal, spectral])
    }

    /// Initial token rows `[rows, d]` for `patches[rows, t]` laid out as
    /// `shape`. Rows listed in `masked` get the mask token added (the zero
    /// vector unless the token is learnable); their patch content is expected
    /// to be zeroed already.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patches: &Tensor,
        shape: GridShape,
        masked: &[usize],
    ) -> Result<Var> {
        if patches.rows() != shape.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} patch rows for grid of {} tokens",
                patches.rows(),
                shape.rows()
            )));
        }
        let mut x = self.content(g, store, patches)?;
        if let (Some(token), false) = (self.mask_token, masked.is_empty()) {
            let tv = g.param(store, token);
            let copies = g.gather_rows(tv, Rc::new(vec![0; masked.len()]))?;
            let placed = g.scatter_add_rows(copies, Rc::new(masked.to_vec()), shape.rows())?;
            x = g.add(x, placed)?;
        }
        let pos = self.positional.forward(g, store, shape)?;
        g.add(x, pos)
    }

    /// Embeds one patched recording into a token grid.
    pub fn encode_patches(
        &self,
        store: &ParamStore,
        signal: &PatchedSignal,
        region_map: &RegionMap,
    ) -> Result<TokenGrid> {
        let [c, n, t] = signal.patches.shape() else {
            return Err(Error::ShapeMismatch("patched signal must be 3-D".into()));
        };
        let (c, n, t) = (*c, *n, *t);
        if t != self.config.patch_len {
            return Err(Error::ShapeMismatch(format!(
                "patch length {t}, embedding expects {}",
                self.config.patch_len
            )));
        }
        let rows = signal.patches.clone().reshape(&[c * n, t])?;
        let mut g = Graph::eval();
        let out = self.forward(&mut g, store, &rows, GridShape::new(1, c, n), &[])?;
        let values = g.value(out).clone().reshape(&[c, n, self.config.dim])?;
        TokenGrid::new(values, region_map.clone())
    }
}

/// Stand-alone position lookup: `channel_table[j] + time_table[i]`.
pub fn positional_encoding(
    store: &ParamStore,
    pe: &PositionalEncoding,
    i: usize,
    j: usize,
) -> Result<Tensor> {
    pe.lookup(store, i, j)
}
