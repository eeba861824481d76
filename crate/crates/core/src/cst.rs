//! Cross-scale spatiotemporal tokenization.
//!
//! A temporal stage convolves each channel's segment sequence at several
//! kernel sizes; a spatial stage does the same over the ordered electrodes of
//! each region, never crossing a region boundary. Each scale emits its own
//! share of the feature width, and a linear residual projection is added.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{GridShape, TokenGrid};
use crate::error::{Error, Result};
use crate::layers::{Conv1d, Linear};
use crate::montage::RegionMap;
use crate::numeric::{Graph, Groups, ParamStore, Var};

/// Splits `d` across `k` scales with weights `1/2^s`, `s = 1..=k`.
///
/// Each share is floored and the leftover units go one at a time to the
/// smallest kernels first, so the result is non-increasing and sums to `d`.
pub fn allocate_dims(d: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::ConfigInvalid(
            "at least one scale is required".into(),
        ));
    }
    let total = 1usize
        .checked_shl(k as u32)
        .filter(|_| k < usize::BITS as usize - 1)
        .map(|p| p - 1);
    let Some(total) = total.filter(|&t| d >= t) else {
        return Err(Error::InsufficientDim {
            dim: d,
            scales: k,
            min: total.unwrap_or(usize::MAX),
        });
    };
    // Share of scale s is d * 2^(k-s) / (2^k - 1); integer floors are exact.
    let mut dims: Vec<usize> = (1..=k)
        .map(|s| ((d as u128 * (1u128 << (k - s))) / total as u128) as usize)
        .collect();
    let leftover = d - dims.iter().sum::<usize>();
    for slot in dims.iter_mut().take(leftover) {
        *slot += 1;
    }
    Ok(dims)
}

/// Kernel sizes and per-scale output widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpec {
    kernels: Vec<usize>,
    dims: Vec<usize>,
}

impl ScaleSpec {
    pub fn new(kernels: Vec<usize>, dims: Vec<usize>) -> Result<Self> {
        if kernels.is_empty() || kernels.len() != dims.len() {
            return Err(Error::ConfigInvalid(format!(
                "{} kernels for {} scale widths",
                kernels.len(),
                dims.len()
            )));
        }
        if kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::ConfigInvalid(format!(
                "kernels must be odd: {kernels:?}"
            )));
        }
        if kernels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::ConfigInvalid(format!(
                "kernels must be strictly increasing: {kernels:?}"
            )));
        }
        if dims.contains(&0) || dims.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::ConfigInvalid(format!(
                "scale widths must be positive and non-increasing: {dims:?}"
            )));
        }
        Ok(Self { kernels, dims })
    }

    /// Widths from [`allocate_dims`].
    pub fn allocate(d: usize, kernels: Vec<usize>) -> Result<Self> {
        let dims = allocate_dims(d, kernels.len())?;
        Self::new(kernels, dims)
    }

    pub fn kernels(&self) -> &[usize] {
        &self.kernels
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn max_radius(&self) -> usize {
        self.kernels.last().map_or(0, |k| k / 2)
    }
}

/// Temporal convolution sequences: every (sample, channel) segment list.
pub fn temporal_sequences(shape: GridShape) -> Groups {
    Rc::new(shape.channel_sequences())
}

/// Spatial convolution sequences: for every (sample, segment, region) the
/// region's electrode rows in region-map order.
pub fn spatial_sequences(shape: GridShape, rm: &RegionMap) -> Result<Groups> {
    check_region_cover(shape.channels, rm)?;
    let mut seqs = Vec::with_capacity(shape.batch * shape.segments * rm.num_regions());
    for b in 0..shape.batch {
        for i in 0..shape.segments {
            for list in rm.channel_lists() {
                seqs.push(list.iter().map(|&j| shape.row(b, j, i)).collect());
            }
        }
    }
    Ok(Rc::new(seqs))
}

pub(crate) fn check_region_cover(channels: usize, rm: &RegionMap) -> Result<()> {
    if channels > rm.num_channels() {
        return Err(Error::ChannelNotInRegion(rm.num_channels()));
    }
    if channels < rm.num_channels() {
        return Err(Error::ShapeMismatch(format!(
            "region map covers {} channels, grid has {channels}",
            rm.num_channels()
        )));
    }
    Ok(())
}

/// Initialization gain of every convolution and projection in a stage. A
/// stage sums two unit-gain maps of its input, so each branch starts at
/// `1/sqrt(2)` and the sum keeps the input's variance.
pub const BRANCH_GAIN: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// One temporal stage followed by one spatial stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CstLayer {
    pub spec: ScaleSpec,
    pub temporal: Vec<Conv1d>,
    pub spatial: Vec<Conv1d>,
    pub proj_t: Linear,
    pub proj_s: Linear,
}

impl CstLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        spec: ScaleSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.dim() != d {
            return Err(Error::ConfigInvalid(format!(
                "scale widths sum to {}, embedding is {d}",
                spec.dim()
            )));
        }
        let mut convs = |stage: &str, rng: &mut R| -> Vec<Conv1d> {
            spec.kernels()
                .iter()
                .zip(spec.dims())
                .enumerate()
                .map(|(k, (&kernel, &dk))| {
                    Conv1d::with_gain(
                        store,
                        &format!("{name}.{stage}.conv{k}"),
                        d,
                        dk,
                        kernel,
                        true,
                        BRANCH_GAIN,
                        rng,
                    )
                })
                .collect()
        };
        let temporal = convs("temporal", rng);
        let spatial = convs("spatial", rng);
        let proj_t = Linear::with_gain(
            store,
            &format!("{name}.temporal.proj"),
            d,
            d,
            true,
            BRANCH_GAIN,
            rng,
        );
        let proj_s = Linear::with_gain(
            store,
            &format!("{name}.spatial.proj"),
            d,
            d,
            true,
            BRANCH_GAIN,
            rng,
        );
        Ok(Self {
            spec,
            temporal,
            spatial,
            proj_t,
            proj_s,
        })
    }

    fn stage(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        convs: &[Conv1d],
        proj: &Linear,
        seqs: &Groups,
    ) -> Result<Var> {
        let mut parts = Vec::with_capacity(convs.len());
        for conv in convs {
            let w = g.param(store, conv.weight);
            let b = conv.bias.map(|b| g.param(store, b));
            parts.push(g.seq_conv1d(x, w, b, seqs.clone())?);
        }
        let scales = g.concat(&parts)?;
        let residual = proj.forward(g, store, x)?;
        g.add(scales, residual)
    }

    /// Temporal stage on token rows; `seqs` from [`temporal_sequences`].
    pub fn temporal_stage(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        seqs: &Groups,
    ) -> Result<Var> {
        self.stage(g, store, x, &self.temporal, &self.proj_t, seqs)
    }

    /// Spatial stage on token rows; `seqs` from [`spatial_sequences`].
    pub fn spatial_stage(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        seqs: &Groups,
    ) -> Result<Var> {
        self.stage(g, store, x, &self.spatial, &self.proj_s, seqs)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        temporal: &Groups,
        spatial: &Groups,
    ) -> Result<Var> {
        let x = self.temporal_stage(g, store, x, temporal)?;
        self.spatial_stage(g, store, x, spatial)
    }

    pub fn temporal_tokenize(&self, store: &ParamStore, x: &TokenGrid) -> Result<TokenGrid> {
        let seqs = temporal_sequences(x.grid_shape());
        self.apply(x, |layer, g, v| layer.temporal_stage(g, store, v, &seqs))
    }

    pub fn spatial_tokenize(
        &self,
        store: &ParamStore,
        x: &TokenGrid,
        rm: &RegionMap,
    ) -> Result<TokenGrid> {
        let seqs = spatial_sequences(x.grid_shape(), rm)?;
        self.apply(x, |layer, g, v| layer.spatial_stage(g, store, v, &seqs))
    }

    fn apply(
        &self,
        x: &TokenGrid,
        f: impl Fn(&Self, &mut Graph, Var) -> Result<Var>,
    ) -> Result<TokenGrid> {
        if x.dim() != self.spec.dim() {
            return Err(Error::ShapeMismatch(format!(
                "grid width {} for layer width {}",
                x.dim(),
                self.spec.dim()
            )));
        }
        let mut g = Graph::eval();
        let v = g.constant(x.rows());
        let out = f(self, &mut g, v)?;
        let values = g.value(out).clone().reshape(x.values.shape())?;
        TokenGrid::new(values, x.region_map.clone())
    }
}
