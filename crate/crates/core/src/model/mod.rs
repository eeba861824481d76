//! The full encoder: patch embedding, alternating tokenization and sparse
//! attention blocks, a per-token reconstruction head for masked pretraining,
//! and optional task heads for fine-tuning.

mod checkpoint;
mod config;
mod mask;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::{LayerUnit, MaskToken, ModelConfig};
pub use mask::{mask_count, sample_mask, MaskSpec};

use crate::cst::{spatial_sequences, temporal_sequences, CstLayer};
use crate::dsp::PatchedSignal;
use crate::embed::{GridShape, PatchEmbedding};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::montage::RegionMap;
use crate::numeric::{Graph, Groups, ParamStore, Tensor, Var};
use crate::ssa::{
    build_spatial_groups, build_temporal_groups, residual_gain, SpatialGroups, SsaLayer,
};

/// A stack of equally shaped patched samples, flattened to token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B * C * n, t]` in token-row order.
    pub patches: Tensor,
    pub shape: GridShape,
    pub patch_len: usize,
}

impl Batch {
    pub fn new(signals: &[&PatchedSignal]) -> Result<Self> {
        let first = signals
            .first()
            .ok_or_else(|| Error::EmptyInput("batch of zero samples".into()))?;
        let dims = first.patches.shape().to_vec();
        let [c, n, t] = dims[..] else {
            return Err(Error::ShapeMismatch(format!("patched signal {dims:?}")));
        };
        let mut data = Vec::with_capacity(signals.len() * c * n * t);
        for s in signals {
            if s.patches.shape() != dims.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "batch mixes {:?} and {dims:?}",
                    s.patches.shape()
                )));
            }
            data.extend_from_slice(s.patches.data());
        }
        Ok(Self {
            patches: Tensor::new(vec![signals.len() * c * n, t], data)?,
            shape: GridShape::new(signals.len(), c, n),
            patch_len: t,
        })
    }

    /// Token rows of every masked segment, all channels, in row order.
    pub fn masked_rows(&self, masks: &[MaskSpec]) -> Result<Vec<usize>> {
        let s = self.shape;
        if masks.len() != s.batch {
            return Err(Error::MaskMismatch(format!(
                "{} masks for a batch of {}",
                masks.len(),
                s.batch
            )));
        }
        let mut rows = Vec::new();
        for (b, m) in masks.iter().enumerate() {
            if m.segments != s.segments || m.masked.iter().any(|&i| i >= s.segments) {
                return Err(Error::MaskMismatch(format!(
                    "mask over {} segments for input with {}",
                    m.segments, s.segments
                )));
            }
            for j in 0..s.channels {
                rows.extend(m.masked.iter().map(|&i| s.row(b, j, i)));
            }
        }
        rows.sort_unstable();
        Ok(rows)
    }
}

/// Index structures shared by every block for one grid shape.
#[derive(Debug, Clone)]
pub struct Plan {
    pub shape: GridShape,
    pub temporal_seqs: Groups,
    pub spatial_seqs: Groups,
    pub window_groups: Groups,
    pub spatial: SpatialGroups,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Cst(CstLayer),
    Ssa(SsaLayer),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Two classes use one logit with binary cross-entropy; more use one
    /// logit per class with (smoothed) cross-entropy.
    Classification {
        classes: usize,
    },
    Regression,
}

impl TaskKind {
    pub fn outputs(&self) -> usize {
        match *self {
            TaskKind::Classification { classes: 2 } => 1,
            TaskKind::Classification { classes } => classes,
            TaskKind::Regression => 1,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskKind::Classification { .. })
    }
}

/// Flatten `C * n * d` -> `d` -> GELU -> outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskHead {
    pub kind: TaskKind,
    pub channels: usize,
    pub segments: usize,
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub region_map: RegionMap,
    pub params: ParamStore,
    pub embed: PatchEmbedding,
    pub blocks: Vec<Block>,
    pub recon: Linear,
    pub head: Option<TaskHead>,
}

/// Builds a model with fan-in scaled normal weights, zero biases and zero
/// positional tables; deterministic for a given seed. Weight gains follow
/// the block topology so activations keep their scale through depth.
pub fn build_model(cfg: &ModelConfig, rm: &RegionMap, seed: u64) -> Result<Model> {
    cfg.validate()?;
    if rm.num_channels() > cfg.max_channels {
        return Err(Error::ConfigInvalid(format!(
            "{} channels exceed the positional table of {}",
            rm.num_channels(),
            cfg.max_channels
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let embed = PatchEmbedding::new(&mut store, cfg.embed_config(), &mut rng)?;
    let spec = cfg.scale_spec()?;
    let mut blocks = Vec::with_capacity(cfg.block_count());
    let gain = residual_gain(cfg.block_count() / 2);
    for b in 0..cfg.block_count() {
        let layer = b / 2;
        blocks.push(if b % 2 == 0 {
            Block::Cst(CstLayer::new(
                &mut store,
                &format!("layer{layer}.cst"),
                cfg.dim,
                spec.clone(),
                &mut rng,
            )?)
        } else {
            Block::Ssa(SsaLayer::with_residual_gain(
                &mut store,
                &format!("layer{layer}.ssa"),
                cfg.dim,
                cfg.heads,
                cfg.ffn_dim,
                cfg.dropout,
                gain,
                &mut rng,
            )?)
        });
    }
    let recon = Linear::new(&mut store, "recon", cfg.dim, cfg.patch_len, true, &mut rng);
    Ok(Model {
        config: cfg.clone(),
        region_map: rm.clone(),
        params: store,
        embed,
        blocks,
        recon,
        head: None,
    })
}

impl Model {
    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    pub fn plan(&self, shape: GridShape) -> Result<Plan> {
        if shape.segments > self.config.max_segments {
            return Err(Error::ConfigInvalid(format!(
                "{} segments exceed the positional table of {}",
                shape.segments, self.config.max_segments
            )));
        }
        let tg = build_temporal_groups(shape.segments, self.config.window)?;
        Ok(Plan {
            shape,
            temporal_seqs: temporal_sequences(shape),
            spatial_seqs: spatial_sequences(shape, &self.region_map)?,
            window_groups: tg.row_groups(shape)?,
            spatial: build_spatial_groups(shape, &self.region_map)?,
        })
    }

    /// Runs embedding and every block. Rows in `masked` must already have
    /// zeroed patch content. When `trace` is given, the output of every block
    /// is appended to it.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patches: &Tensor,
        plan: &Plan,
        masked: &[usize],
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let mut x = self.embed.forward(g, store, patches, plan.shape, masked)?;
        for block in &self.blocks {
            x = match block {
                Block::Cst(l) => l.forward(g, store, x, &plan.temporal_seqs, &plan.spatial_seqs)?,
                Block::Ssa(l) => l.forward(g, store, x, &plan.window_groups, &plan.spatial)?,
            };
            if let Some(t) = trace.as_deref_mut() {
                t.push(x);
            }
        }
        Ok(x)
    }

    fn check_patch_len(&self, batch: &Batch) -> Result<()> {
        if batch.patch_len != self.config.patch_len {
            return Err(Error::ShapeMismatch(format!(
                "patch length {} for a model of {}",
                batch.patch_len, self.config.patch_len
            )));
        }
        Ok(())
    }

    /// Predicted patches `[rows, t]` with masked segments' content zeroed
    /// before embedding.
    pub fn forward_pretrain(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        masks: &[MaskSpec],
    ) -> Result<Var> {
        self.check_patch_len(batch)?;
        let (input, masked) = mask_input(batch, masks)?;
        let plan = self.plan(batch.shape)?;
        let h = self.encode(g, store, &input, &plan, &masked, None)?;
        self.recon.forward(g, store, h)
    }

    /// Mean squared error over every masked (channel, segment, sample) entry.
    /// With nothing masked the loss is the constant 0.
    pub fn pretrain_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        masks: &[MaskSpec],
    ) -> Result<Var> {
        let pred = self.forward_pretrain(g, store, batch, masks)?;
        masked_mse(g, pred, batch, masks)
    }

    /// Pretraining prediction for one sample, `[C, n, t]`, in eval mode.
    pub fn reconstruct(&self, signal: &PatchedSignal, mask: &MaskSpec) -> Result<Tensor> {
        let batch = Batch::new(&[signal])?;
        let mut g = Graph::eval();
        let out =
            self.forward_pretrain(&mut g, &self.params, &batch, std::slice::from_ref(mask))?;
        g.value(out).clone().reshape(signal.patches.shape())
    }

    /// Adds a freshly initialized task head.
    pub fn attach_head(
        &mut self,
        kind: TaskKind,
        channels: usize,
        segments: usize,
        seed: u64,
    ) -> Result<()> {
        if self.head.is_some() {
            return Err(Error::HeadMismatch("model already has a task head".into()));
        }
        match kind {
            TaskKind::Classification { classes } if classes < 2 => {
                return Err(Error::HeadMismatch(format!("{classes} classes")));
            }
            _ => {}
        }
        if channels != self.region_map.num_channels() {
            return Err(Error::HeadMismatch(format!(
                "head for {channels} channels on a {}-channel montage",
                self.region_map.num_channels()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.dim;
        let flat = channels * segments * d;
        let hidden = Linear::new(&mut self.params, "head.hidden", flat, d, true, &mut rng);
        let out = Linear::new(
            &mut self.params,
            "head.out",
            d,
            kind.outputs(),
            true,
            &mut rng,
        );
        self.head = Some(TaskHead {
            kind,
            channels,
            segments,
            hidden,
            out,
        });
        Ok(())
    }

    fn task_head(&self) -> Result<&TaskHead> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::HeadMismatch("model has no task head".into()))
    }

    /// Task outputs `[B, outputs]` on unmasked input.
    pub fn forward_task(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<Var> {
        self.check_patch_len(batch)?;
        let head = self.task_head()?;
        let s = batch.shape;
        if s.channels != head.channels || s.segments != head.segments {
            return Err(Error::HeadMismatch(format!(
                "head expects {}x{} tokens, input has {}x{}",
                head.channels, head.segments, s.channels, s.segments
            )));
        }
        let plan = self.plan(s)?;
        let h = self.encode(g, store, &batch.patches, &plan, &[], None)?;
        let flat = g.reshape(h, &[s.batch, s.channels * s.segments * self.config.dim])?;
        let z = head.hidden.forward(g, store, flat)?;
        let z = g.gelu(z);
        let z = g.dropout(z, self.config.dropout);
        head.out.forward(g, store, z)
    }

    /// Task loss: binary cross-entropy (two classes), smoothed cross-entropy
    /// (more classes) or mean squared error (regression). Class targets are
    /// class indices stored as `f64`.
    pub fn task_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        targets: &[f64],
        smoothing: f64,
    ) -> Result<Var> {
        let kind = self.task_head()?.kind;
        if targets.len() != batch.shape.batch {
            return Err(Error::LabelMismatch(format!(
                "{} targets for {} samples",
                targets.len(),
                batch.shape.batch
            )));
        }
        let out = self.forward_task(g, store, batch)?;
        match kind {
            TaskKind::Classification { classes } => {
                let labels = class_labels(targets, classes)?;
                if classes == 2 {
                    g.bce_with_logits(out, labels.iter().map(|&c| c as f64).collect())
                } else {
                    g.softmax_cross_entropy(out, smoothed_targets(&labels, classes, smoothing))
                }
            }
            TaskKind::Regression => {
                let t = g.constant(Tensor::new(vec![targets.len(), 1], targets.to_vec())?);
                let diff = g.sub(out, t)?;
                let sq = g.mul(diff, diff)?;
                Ok(g.mean_all(sq))
            }
        }
    }

    /// Eval-mode task outputs for a list of samples, `[B, outputs]`.
    pub fn predict(&self, signals: &[&PatchedSignal]) -> Result<Tensor> {
        let batch = Batch::new(signals)?;
        let mut g = Graph::eval();
        let out = self.forward_task(&mut g, &self.params, &batch)?;
        Ok(g.value(out).clone())
    }
}

/// Batch patches with every masked segment zeroed, plus the masked rows.
pub fn mask_input(batch: &Batch, masks: &[MaskSpec]) -> Result<(Tensor, Vec<usize>)> {
    let masked = batch.masked_rows(masks)?;
    let mut input = batch.patches.clone();
    for &r in &masked {
        input.row_mut(r).fill(0.0);
    }
    Ok((input, masked))
}

/// Masked-segment mean squared error between `pred[rows, t]` and the batch.
pub fn masked_mse(g: &mut Graph, pred: Var, batch: &Batch, masks: &[MaskSpec]) -> Result<Var> {
    let rows = batch.masked_rows(masks)?;
    if rows.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let t = batch.patch_len;
    let mut target = Vec::with_capacity(rows.len() * t);
    for &r in &rows {
        target.extend_from_slice(batch.patches.row(r));
    }
    let picked = g.gather_rows(pred, std::rc::Rc::new(rows.clone()))?;
    let target = g.constant(Tensor::new(vec![rows.len(), t], target)?);
    let diff = g.sub(picked, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean_all(sq))
}

/// Result of [`reconstruction_loss`]; `empty_mask` flags a mask with no
/// segments, for which the loss is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconLoss {
    pub value: f64,
    pub empty_mask: bool,
}

/// Mean of squared errors over `(channel, masked segment, sample)` entries
/// of `pred[C, n, t]` against `target`.
pub fn reconstruction_loss(
    pred: &Tensor,
    target: &PatchedSignal,
    mask: &MaskSpec,
) -> Result<ReconLoss> {
    if pred.shape() != target.patches.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.patches.shape()
        )));
    }
    let [c, n, t] = pred.shape() else {
        return Err(Error::ShapeMismatch("prediction must be C x n x t".into()));
    };
    if mask.segments != *n {
        return Err(Error::MaskMismatch(format!(
            "mask over {} of {n} segments",
            mask.segments
        )));
    }
    if mask.masked.is_empty() {
        return Ok(ReconLoss {
            value: 0.0,
            empty_mask: true,
        });
    }
    let (p, y) = (pred.data(), target.patches.data());
    let mut sum = 0.0;
    for j in 0..*c {
        for &i in &mask.masked {
            let base = (j * n + i) * t;
            for k in base..base + t {
                sum += (p[k] - y[k]) * (p[k] - y[k]);
            }
        }
    }
    Ok(ReconLoss {
        value: sum / (c * mask.masked.len() * t) as f64,
        empty_mask: false,
    })
}

fn class_labels(targets: &[f64], classes: usize) -> Result<Vec<usize>> {
    targets
        .iter()
        .map(|&y| {
            if y.fract() == 0.0 && y >= 0.0 && (y as usize) < classes {
                Ok(y as usize)
            } else {
                Err(Error::LabelMismatch(format!(
                    "label {y} for {classes} classes"
                )))
            }
        })
        .collect()
}

/// `(1 - eps) * onehot + eps / K` rows.
pub fn smoothed_targets(labels: &[usize], classes: usize, eps: f64) -> Tensor {
    let mut t = Tensor::full(&[labels.len(), classes], eps / classes as f64);
    for (r, &c) in labels.iter().enumerate() {
        t.row_mut(r)[c] += 1.0 - eps;
    }
    t
}
