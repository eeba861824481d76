//! Structured sparse attention.
//!
//! Inter-window attention lets each channel's tokens attend only to tokens at
//! the same relative position of other windows. Inter-region attention builds
//! one descriptor per region (a representative token plus a projection of the
//! region mean) and attends across regions; results are written back to the
//! representative positions. A pre-normalized feed-forward block follows.

use std::rc::Rc;

use rand::Rng;

use crate::cst::check_region_cover;
use crate::embed::{GridShape, TokenGrid};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::montage::RegionMap;
use crate::numeric::{Graph, Groups, ParamId, ParamStore, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Segment indices sharing a relative window position: group `g` holds
/// `{g, g + w, g + 2w, ...} ∩ [0, n)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalGroups {
    pub window: usize,
    pub segments: usize,
    pub groups: Vec<Vec<usize>>,
}

pub fn build_temporal_groups(n: usize, w: usize) -> Result<TemporalGroups> {
    if w == 0 || w > n {
        return Err(Error::InvalidWindow {
            window: w,
            segments: n,
        });
    }
    let groups = (0..w).map(|g| (g..n).step_by(w).collect()).collect();
    Ok(TemporalGroups {
        window: w,
        segments: n,
        groups,
    })
}

impl TemporalGroups {
    /// Token-row groups for every (sample, channel, relative position).
    pub fn row_groups(&self, shape: GridShape) -> Result<Groups> {
        if shape.segments != self.segments {
            return Err(Error::ShapeMismatch(format!(
                "groups built for {} segments, grid has {}",
                self.segments, shape.segments
            )));
        }
        let mut out = Vec::with_capacity(shape.batch * shape.channels * self.window);
        for b in 0..shape.batch {
            for j in 0..shape.channels {
                for grp in &self.groups {
                    out.push(grp.iter().map(|&i| shape.row(b, j, i)).collect());
                }
            }
        }
        Ok(Rc::new(out))
    }

    /// Query-key score entries per channel: sum of squared group sizes.
    pub fn score_entries_per_channel(&self) -> usize {
        self.groups.iter().map(|g| g.len() * g.len()).sum()
    }
}

/// Index structure of the inter-region stage for one grid shape.
///
/// Descriptor `((b * n + i) * G + g) * R + r` belongs to sample `b`, segment
/// `i`, spatial group `g` and region `r`; its representative is the region's
/// channel at position `g mod |R_r|`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGroups {
    pub group_count: usize,
    pub region_count: usize,
    /// Token row of each descriptor's representative.
    pub rep_rows: Rc<Vec<usize>>,
    /// Token rows of each (sample, segment, region) pool.
    pub pools: Groups,
    /// Pool index of each descriptor.
    pub pool_of: Rc<Vec<usize>>,
    /// Consecutive blocks of `R` descriptors that attend to each other.
    pub attention: Groups,
}

pub fn build_spatial_groups(shape: GridShape, rm: &RegionMap) -> Result<SpatialGroups> {
    if rm.num_regions() == 0 || rm.channel_lists().any(|l| l.is_empty()) {
        return Err(Error::EmptyRegion);
    }
    check_region_cover(shape.channels, rm)?;
    let big_g = rm.max_region_size();
    let big_r = rm.num_regions();
    let lists: Vec<&[usize]> = rm.channel_lists().collect();
    let mut pools = Vec::with_capacity(shape.batch * shape.segments * big_r);
    let mut rep_rows = Vec::with_capacity(shape.batch * shape.segments * big_g * big_r);
    let mut pool_of = Vec::with_capacity(rep_rows.capacity());
    for b in 0..shape.batch {
        for i in 0..shape.segments {
            let base = pools.len();
            for list in &lists {
                pools.push(list.iter().map(|&j| shape.row(b, j, i)).collect::<Vec<_>>());
            }
            for g in 0..big_g {
                for (r, list) in lists.iter().enumerate() {
                    rep_rows.push(shape.row(b, list[g % list.len()], i));
                    pool_of.push(base + r);
                }
            }
        }
    }
    let blocks = rep_rows.len() / big_r;
    let attention = (0..blocks)
        .map(|k| (k * big_r..(k + 1) * big_r).collect())
        .collect();
    Ok(SpatialGroups {
        group_count: big_g,
        region_count: big_r,
        rep_rows: Rc::new(rep_rows),
        pools: Rc::new(pools),
        pool_of: Rc::new(pool_of),
        attention: Rc::new(attention),
    })
}

/// Query/key/value/output maps of one multi-head attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self::with_output_gain(store, name, d, 1.0, rng)
    }

    /// As [`AttentionParams::new`] with the output map initialized at
    /// `output_gain`.
    pub fn with_output_gain<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        output_gain: f64,
        rng: &mut R,
    ) -> Self {
        // A key bias shifts every score of a query row equally, which the
        // softmax cancels; it would be a parameter with identically zero
        // gradient, so keys are bias-free.
        let mut lin = |s: &str, bias, gain| {
            Linear::with_gain(store, &format!("{name}.{s}"), d, d, bias, gain, rng)
        };
        Self {
            q: lin("q", true, 1.0),
            k: lin("k", false, 1.0),
            v: lin("v", true, 1.0),
            o: lin("o", true, output_gain),
        }
    }

    /// Projected attention output (no residual) within `groups` of rows of `x`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        heads: usize,
        groups: &Groups,
        dropout: f64,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let a = g.group_attention(q, k, v, heads, groups.clone(), dropout)?;
        self.o.forward(g, store, a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsaLayer {
    pub heads: usize,
    pub dropout: f64,
    pub window_attn: AttentionParams,
    pub region_attn: AttentionParams,
    pub phi: Linear,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub ff1: Linear,
    pub ff2: Linear,
}

/// Initialization gain for the last map of each residual branch (both
/// attention outputs and the second feed-forward layer) in a stack of
/// `blocks` sparse-attention blocks. The residual stream is never
/// normalized before attention, so every write adds variance; scaling the
/// `3·blocks` writes by `1/sqrt(3·blocks)` bounds the total growth at about
/// `e` regardless of depth.
pub fn residual_gain(blocks: usize) -> f64 {
    1.0 / ((3 * blocks.max(1)) as f64).sqrt()
}

impl SsaLayer {
    /// A block with unit-gain residual writes; see
    /// [`SsaLayer::with_residual_gain`] for stacks.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_residual_gain(store, name, d, heads, ffn_dim, dropout, 1.0, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_residual_gain<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::ConfigInvalid(format!(
                "embedding {d} not divisible by {heads} heads"
            )));
        }
        if ffn_dim == 0 {
            return Err(Error::ConfigInvalid(
                "feed-forward width must be positive".into(),
            ));
        }
        let window_attn =
            AttentionParams::with_output_gain(store, &format!("{name}.window"), d, gain, rng);
        let region_attn =
            AttentionParams::with_output_gain(store, &format!("{name}.region"), d, gain, rng);
        let phi = Linear::new(store, &format!("{name}.region.phi"), d, d, false, rng);
        let ln_gain = store.add(format!("{name}.ln.gain"), Tensor::full(&[d], 1.0));
        let ln_bias = store.add(format!("{name}.ln.bias"), Tensor::zeros(&[d]));
        let ff1 = Linear::new(store, &format!("{name}.ffn.fc1"), d, ffn_dim, true, rng);
        let ff2 = Linear::with_gain(
            store,
            &format!("{name}.ffn.fc2"),
            ffn_dim,
            d,
            true,
            gain,
            rng,
        );
        Ok(Self {
            heads,
            dropout,
            window_attn,
            region_attn,
            phi,
            ln_gain,
            ln_bias,
            ff1,
            ff2,
        })
    }

    /// Attention within each (channel, relative position) group plus residual.
    /// `groups` from [`TemporalGroups::row_groups`].
    pub fn inter_window(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        groups: &Groups,
    ) -> Result<Var> {
        let a = self
            .window_attn
            .forward(g, store, x, self.heads, groups, self.dropout)?;
        g.add(x, a)
    }

    /// Regional descriptors `x[rep] + phi(mean of region)`, one row each.
    pub fn descriptors(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        sg: &SpatialGroups,
    ) -> Result<Var> {
        let means = g.mean_rows(x, sg.pools.clone())?;
        let projected = self.phi.forward(g, store, means)?;
        let pooled = g.gather_rows(projected, sg.pool_of.clone())?;
        let reps = g.gather_rows(x, sg.rep_rows.clone())?;
        g.add(reps, pooled)
    }

    /// Attention across region descriptors; each output is added back at the
    /// row of the representative that sourced it.
    pub fn inter_region(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        sg: &SpatialGroups,
    ) -> Result<Var> {
        let desc = self.descriptors(g, store, x, sg)?;
        let a =
            self.region_attn
                .forward(g, store, desc, self.heads, &sg.attention, self.dropout)?;
        let rows = g.value(x).rows();
        let placed = g.scatter_add_rows(a, sg.rep_rows.clone(), rows)?;
        g.add(x, placed)
    }

    /// `x + FFN(LN(x))` with a GELU hidden layer.
    pub fn ffn_refine(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.ln_gain);
        let bias = g.param(store, self.ln_bias);
        let h = g.layer_norm(x, gain, bias, LN_EPS)?;
        let h = self.ff1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = g.dropout(h, self.dropout);
        let h = self.ff2.forward(g, store, h)?;
        g.add(x, h)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        temporal: &Groups,
        spatial: &SpatialGroups,
    ) -> Result<Var> {
        let x = self.inter_window(g, store, x, temporal)?;
        let x = self.inter_region(g, store, x, spatial)?;
        self.ffn_refine(g, store, x)
    }

    pub fn inter_window_attention(
        &self,
        store: &ParamStore,
        x: &TokenGrid,
        tg: &TemporalGroups,
    ) -> Result<TokenGrid> {
        let groups = tg.row_groups(x.grid_shape())?;
        apply(x, |g, v| self.inter_window(g, store, v, &groups))
    }

    pub fn inter_region_attention(&self, store: &ParamStore, x: &TokenGrid) -> Result<TokenGrid> {
        let sg = build_spatial_groups(x.grid_shape(), &x.region_map)?;
        apply(x, |g, v| self.inter_region(g, store, v, &sg))
    }

    pub fn ffn(&self, store: &ParamStore, x: &TokenGrid) -> Result<TokenGrid> {
        apply(x, |g, v| self.ffn_refine(g, store, v))
    }
}

fn apply(x: &TokenGrid, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> Result<TokenGrid> {
    let mut g = Graph::eval();
    let v = g.constant(x.rows());
    let out = f(&mut g, v)?;
    let values = g.value(out).clone().reshape(x.values.shape())?;
    TokenGrid::new(values, x.region_map.clone())
}
