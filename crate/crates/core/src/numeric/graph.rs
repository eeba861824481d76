//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value; node indices are a
//! topological order, so [`Graph::backward`] walks them once in reverse.
//! Ops work on row-major tensors whose last axis is the feature axis; most
//! treat everything before it as a flat list of rows.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{dot, matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Index lists shared between the forward record and the backward pass.
pub type Groups = Rc<Vec<Vec<usize>>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        gain: Var,
        bias: Option<Var>,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SeqConv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        seqs: Groups,
    },
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Rc<Vec<usize>>,
    },
    ScatterAddRows {
        x: Var,
        idx: Rc<Vec<usize>>,
    },
    MeanRows {
        x: Var,
        groups: Groups,
    },
    GroupAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Groups,
        /// Per (head, group): softmax weights and the dropout multiplier.
        probs: Vec<Vec<f64>>,
        keep: Vec<Vec<f64>>,
    },
    Reshape(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SumAll(Var),
    MeanAll(Var),
    VarAll(Var),
    SoftmaxXent {
        logits: Var,
        targets: Tensor,
        probs: Vec<f64>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Train mode enables dropout; eval mode makes it a pass-through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Graph {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, 0)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiated input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient but is not tied to a parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// Adds a `[d]` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(b).numel() != d {
            return Err(Error::ShapeMismatch(format!(
                "add_row: bias {:?} for rows of width {d}",
                self.shape(b)
            )));
        }
        let mut value = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for chunk in value.data_mut().chunks_mut(d) {
            for (v, bv) in chunk.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        Ok(self.push(value, Op::AddRow(x, b), &[x, b]))
    }

    /// `x[..., k] * w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.value(x);
        let ws = self.value(w);
        let k = xs.cols();
        let (wk, n) = match ws.shape() {
            [a, b] => (*a, *b),
            s => return Err(Error::ShapeMismatch(format!("matmul weight {s:?}"))),
        };
        if wk != k {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                xs.shape(),
                ws.shape()
            )));
        }
        let m = xs.rows();
        let mut out = vec![0.0; m * n];
        matmul_into(xs.data(), ws.data(), &mut out, m, k, n);
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul(x, w), &[x, w]))
    }

    /// `x * w + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let d = value.cols();
        for row in value.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::ShapeMismatch("layer_norm affine width".into()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % d] + b[i % d])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Group normalization of `x[G, L, ch]`: statistics per (G, channel group)
    /// over all L positions, affine per channel.
    pub fn group_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Option<Var>,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (g_count, len, ch) = match xv.shape() {
            [g, l, c] => (*g, *l, *c),
            s => return Err(Error::ShapeMismatch(format!("group_norm input {s:?}"))),
        };
        if groups == 0 || ch % groups != 0 {
            return Err(Error::ShapeMismatch(format!(
                "group_norm: {ch} channels into {groups} groups"
            )));
        }
        if self.value(gain).numel() != ch || bias.is_some_and(|b| self.value(b).numel() != ch) {
            return Err(Error::ShapeMismatch("group_norm affine width".into()));
        }
        let per = ch / groups;
        let data = xv.data();
        let mut xhat = vec![0.0; data.len()];
        let mut inv_std = vec![0.0; g_count * groups];
        let count = (len * per) as f64;
        for g in 0..g_count {
            for q in 0..groups {
                let mut mean = 0.0;
                for l in 0..len {
                    for c in q * per..(q + 1) * per {
                        mean += data[(g * len + l) * ch + c];
                    }
                }
                mean /= count;
                let mut var = 0.0;
                for l in 0..len {
                    for c in q * per..(q + 1) * per {
                        let dv = data[(g * len + l) * ch + c] - mean;
                        var += dv * dv;
                    }
                }
                var /= count;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[g * groups + q] = is;
                for l in 0..len {
                    for c in q * per..(q + 1) * per {
                        let i = (g * len + l) * ch + c;
                        xhat[i] = (data[i] - mean) * is;
                    }
                }
            }
        }
        let gv = self.value(gain).data();
        let bv = bias.map(|b| self.value(b).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv[i % ch] + bv.map_or(0.0, |b| b[i % ch]))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let mut inputs = vec![x, gain];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                xhat,
                inv_std,
            },
            &inputs,
        ))
    }

    /// Same-padded 1-D convolution along ordered row sequences.
    ///
    /// `x` is viewed as rows `[N, cin]`, `w` is `[cout, cin, kernel]` with an
    /// odd kernel. For each sequence, output row `seq[p]` is the kernel applied
    /// to rows `seq[p - kernel/2 ..= p + kernel/2]`, with positions outside the
    /// sequence treated as zeros. Rows in no sequence get only the bias.
    pub fn seq_conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, seqs: Groups) -> Result<Var> {
        let xv = self.value(x);
        let cin = xv.cols();
        let n_rows = xv.rows();
        let (cout, wcin, kernel) = match self.value(w).shape() {
            [a, b, c] => (*a, *b, *c),
            s => return Err(Error::ShapeMismatch(format!("conv weight {s:?}"))),
        };
        if wcin != cin {
            return Err(Error::ShapeMismatch(format!(
                "conv weight expects {wcin} input features, got {cin}"
            )));
        }
        if kernel % 2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "conv kernel {kernel} is even"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != cout {
                return Err(Error::ShapeMismatch("conv bias width".into()));
            }
        }
        if seqs.iter().flatten().any(|&r| r >= n_rows) {
            return Err(Error::ShapeMismatch(
                "conv sequence row out of range".into(),
            ));
        }
        let taps = tap_matrices(self.value(w).data(), cout, cin, kernel);
        let mut out = vec![0.0; n_rows * cout];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        let xd = xv.data();
        let half = kernel / 2;
        for seq in seqs.iter() {
            let len = seq.len();
            for (p, &dst) in seq.iter().enumerate() {
                for (t, tap) in taps.iter().enumerate() {
                    let src = p as isize + t as isize - half as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let src_row = seq[src as usize];
                    matmul_into(
                        &xd[src_row * cin..(src_row + 1) * cin],
                        tap,
                        &mut out[dst * cout..(dst + 1) * cout],
                        1,
                        cin,
                        cout,
                    );
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(value, Op::SeqConv { x, w, bias, seqs }, &inputs))
    }

    /// Grouped same-padded convolution of `x[G, L, cin]` along L, independently
    /// for each of the G sequences. Returns `[G, L, cout]`.
    pub fn grouped_conv1d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (g, len) = match self.shape(x) {
            [g, l, _] => (*g, *l),
            s => return Err(Error::ShapeMismatch(format!("grouped_conv1d input {s:?}"))),
        };
        let seqs: Vec<Vec<usize>> = (0..g)
            .map(|gi| (gi * len..(gi + 1) * len).collect())
            .collect();
        self.seq_conv1d(x, w, bias, Rc::new(seqs))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch(format!(
                    "concat: {:?} vs leading {lead:?}",
                    s
                )));
            }
            widths.push(self.value(p).cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if start + len > d {
            return Err(Error::ShapeMismatch(format!(
                "slice {start}..{} of width {d}",
                start + len
            )));
        }
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    /// Row gather (also serves as embedding lookup). Returns `[idx.len(), d]`.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let rows = xv.rows();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    limit: rows,
                });
            }
            out.extend_from_slice(xv.row(i));
        }
        let value = Tensor::new(vec![idx.len(), d], out)?;
        Ok(self.push(value, Op::GatherRows { x, idx }, &[x]))
    }

    /// `out[idx[m]] += x[m]` into a zero `[n_out, d]` tensor.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Rc<Vec<usize>>, n_out: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if idx.len() != xv.rows() {
            return Err(Error::ShapeMismatch(format!(
                "scatter: {} indices for {} rows",
                idx.len(),
                xv.rows()
            )));
        }
        let mut out = vec![0.0; n_out * d];
        for (m, &i) in idx.iter().enumerate() {
            if i >= n_out {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    limit: n_out,
                });
            }
            for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(xv.row(m)) {
                *o += v;
            }
        }
        let value = Tensor::new(vec![n_out, d], out)?;
        Ok(self.push(value, Op::ScatterAddRows { x, idx }, &[x]))
    }

    /// One output row per group: the mean of that group's rows.
    pub fn mean_rows(&mut self, x: Var, groups: Groups) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = vec![0.0; groups.len() * d];
        for (gi, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::EmptyRegion);
            }
            let o = &mut out[gi * d..(gi + 1) * d];
            for &r in g {
                for (ov, v) in o.iter_mut().zip(xv.row(r)) {
                    *ov += v;
                }
            }
            let inv = 1.0 / g.len() as f64;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(vec![groups.len(), d], out)?;
        Ok(self.push(value, Op::MeanRows { x, groups }, &[x]))
    }

    /// Multi-head scaled dot-product self-attention restricted to row groups.
    ///
    /// `q`, `k`, `v` are `[N, d]`; each head uses a `d/heads` column slice.
    /// Within every group, each row attends to every row of the same group.
    /// Rows in no group produce zeros. Dropout with rate `p` is applied to
    /// the attention weights in train mode.
    pub fn group_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Groups,
        dropout: f64,
    ) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let d = self.value(q).cols();
        let n = self.value(q).rows();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::ShapeMismatch(format!(
                "{d} features into {heads} heads"
            )));
        }
        if groups.iter().flatten().any(|&r| r >= n) {
            return Err(Error::ShapeMismatch(
                "attention group row out of range".into(),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let apply_dropout = self.mode == Mode::Train && dropout > 0.0;
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(heads * groups.len());
        let mut keep = Vec::with_capacity(heads * groups.len());
        for h in 0..heads {
            let c0 = h * dh;
            for g in groups.iter() {
                let m = g.len();
                let mut p = vec![0.0; m * m];
                for (a, &ra) in g.iter().enumerate() {
                    let qa = &self.nodes[q.0].value.row(ra)[c0..c0 + dh];
                    for (b, &rb) in g.iter().enumerate() {
                        let kb = &self.nodes[k.0].value.row(rb)[c0..c0 + dh];
                        p[a * m + b] = dot(qa, kb) * scale;
                    }
                    softmax_in_place(&mut p[a * m..(a + 1) * m]);
                }
                let mask: Vec<f64> = if apply_dropout {
                    (0..m * m)
                        .map(|_| {
                            if self.rng.random::<f64>() < dropout {
                                0.0
                            } else {
                                1.0 / (1.0 - dropout)
                            }
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                let vv = &self.nodes[v.0].value;
                for (a, &ra) in g.iter().enumerate() {
                    let o = &mut out[ra * d + c0..ra * d + c0 + dh];
                    for (b, &rb) in g.iter().enumerate() {
                        let mut w = p[a * m + b];
                        if apply_dropout {
                            w *= mask[a * m + b];
                        }
                        if w == 0.0 {
                            continue;
                        }
                        for (ov, vb) in o.iter_mut().zip(&vv.row(rb)[c0..c0 + dh]) {
                            *ov += w * vb;
                        }
                    }
                }
                probs.push(p);
                keep.push(mask);
            }
        }
        let value = Tensor::new(self.value(q).shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::GroupAttention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
                keep,
            },
            &[q, k, v],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Inverted dropout in train mode; identity (no node) in eval mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if self.mode == Mode::Eval || p <= 0.0 {
            return x;
        }
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    0.0
                } else {
                    1.0 / (1.0 - p)
                }
            })
            .collect();
        let mut value = self.value(x).clone();
        for (v, m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / v.numel() as f64);
        self.push(value, Op::MeanAll(x), &[x])
    }

    /// Population variance over every element.
    pub fn var_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.numel() as f64;
        let mean = v.sum() / n;
        let var = v
            .data()
            .iter()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(var), Op::VarAll(x), &[x])
    }

    /// Mean over rows of the cross-entropy between `softmax(logits)` and the
    /// (possibly smoothed) target distributions.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(Error::ShapeMismatch(format!(
                "logits {:?} vs targets {:?}",
                lv.shape(),
                targets.shape()
            )));
        }
        let k = lv.cols();
        let rows = lv.rows();
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for r in 0..rows {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            for (t, z) in targets.row(r).iter().zip(row) {
                loss -= t * (z - lse);
            }
            softmax_in_place(&mut probs[r * k..(r + 1) * k]);
        }
        let value = Tensor::scalar(loss / rows as f64);
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy on single-logit rows.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} logits for {} targets",
                lv.numel(),
                targets.len()
            )));
        }
        let loss = lv
            .data()
            .iter()
            .zip(&targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / targets.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits { logits, targets },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar output. Returns one optional gradient per
    /// node; `None` for nodes that do not influence `out` or need no gradient.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward from non-scalar {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::full(self.shape(out), 1.0));
        for idx in (0..=out.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor {
        Tensor::zeros(self.shape(v))
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let ga = gy.zip_map(self.value(*b), |g, y| g * y)?;
                let gb = gy.zip_map(self.value(*a), |g, x| g * x)?;
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gy.map(|g| g * s)),
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, gy.clone());
                let d = gy.cols();
                let mut gb = self.zeros_like(*b);
                for row in gy.data().chunks(d) {
                    for (o, g) in gb.data_mut().iter_mut().zip(row) {
                        *o += g;
                    }
                }
                self.accumulate(grads, *b, gb);
            }
            Op::MatMul(x, w) => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                if self.nodes[x.0].requires_grad {
                    let mut gx = self.zeros_like(*x);
                    matmul_nt_into(gy.data(), wv.data(), gx.data_mut(), m, n, k);
                    self.accumulate(grads, *x, gx);
                }
                if self.nodes[w.0].requires_grad {
                    let mut gw = self.zeros_like(*w);
                    matmul_tn_into(xv.data(), gy.data(), gw.data_mut(), m, k, n);
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::Gelu(x) => {
                let gx = gy.zip_map(self.value(*x), |g, v| g * gelu_grad(v))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.cols();
                let mut gx = self.zeros_like(*x);
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &gy.data()[r * d..(r + 1) * d];
                    let s = dot(yr, gr);
                    for c in 0..d {
                        gx.data_mut()[r * d + c] = yr[c] * (gr[c] - s);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = gy.cols();
                let g = self.value(*gain).data();
                let mut gx = self.zeros_like(*x);
                let mut ggain = self.zeros_like(*gain);
                let mut gbias = self.zeros_like(*bias);
                for r in 0..gy.rows() {
                    let gyr = &gy.data()[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let dxhat: Vec<f64> = gyr.iter().zip(g).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = dot(&dxhat, xh) / d as f64;
                    for c in 0..d {
                        gx.data_mut()[r * d + c] =
                            inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        ggain.data_mut()[c] += gyr[c] * xh[c];
                        gbias.data_mut()[c] += gyr[c];
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gain, ggain);
                self.accumulate(grads, *bias, gbias);
            }
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                xhat,
                inv_std,
            } => {
                let (g_count, len, ch) = match self.shape(*x) {
                    [g, l, c] => (*g, *l, *c),
                    _ => unreachable!(),
                };
                let per = ch / groups;
                let gv = self.value(*gain).data();
                let gyd = gy.data();
                let mut gx = self.zeros_like(*x);
                let mut ggain = self.zeros_like(*gain);
                let mut gbias = Tensor::zeros(&[ch]);
                for i in 0..gyd.len() {
                    ggain.data_mut()[i % ch] += gyd[i] * xhat[i];
                    gbias.data_mut()[i % ch] += gyd[i];
                }
                let count = (len * per) as f64;
                for g in 0..g_count {
                    for q in 0..*groups {
                        let idx = |l: usize, c: usize| (g * len + l) * ch + c;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        let lanes = q * per..(q + 1) * per;
                        for l in 0..len {
                            for (c, gc) in lanes.clone().zip(&gv[lanes.clone()]) {
                                let i = idx(l, c);
                                let dxh = gyd[i] * gc;
                                mean_d += dxh;
                                mean_dx += dxh * xhat[i];
                            }
                        }
                        mean_d /= count;
                        mean_dx /= count;
                        let is = inv_std[g * groups + q];
                        for l in 0..len {
                            for (c, gc) in lanes.clone().zip(&gv[lanes.clone()]) {
                                let i = idx(l, c);
                                gx.data_mut()[i] = is * (gyd[i] * gc - mean_d - xhat[i] * mean_dx);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gain, ggain);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, gbias);
                }
            }
            Op::SeqConv { x, w, bias, seqs } => {
                let xv = self.value(*x);
                let cin = xv.cols();
                let (cout, _, kernel) = match self.shape(*w) {
                    [a, b, c] => (*a, *b, *c),
                    _ => unreachable!(),
                };
                let taps = tap_matrices(self.value(*w).data(), cout, cin, kernel);
                let mut gx = self.zeros_like(*x);
                let mut gtaps = vec![vec![0.0; cin * cout]; kernel];
                let half = kernel / 2;
                let gyd = gy.data();
                let xd = xv.data();
                for seq in seqs.iter() {
                    let len = seq.len();
                    for (p, &dst) in seq.iter().enumerate() {
                        let gout = &gyd[dst * cout..(dst + 1) * cout];
                        for t in 0..kernel {
                            let src = p as isize + t as isize - half as isize;
                            if src < 0 || src >= len as isize {
                                continue;
                            }
                            let src_row = seq[src as usize];
                            // dx_src += gout * tap^T ; dtap += x_src^T gout
                            matmul_nt_into(
                                gout,
                                &taps[t],
                                &mut gx.data_mut()[src_row * cin..(src_row + 1) * cin],
                                1,
                                cout,
                                cin,
                            );
                            matmul_tn_into(
                                &xd[src_row * cin..(src_row + 1) * cin],
                                gout,
                                &mut gtaps[t],
                                1,
                                cin,
                                cout,
                            );
                        }
                    }
                }
                let mut gw = self.zeros_like(*w);
                for (t, gt) in gtaps.iter().enumerate() {
                    for c in 0..cin {
                        for o in 0..cout {
                            gw.data_mut()[(o * cin + c) * kernel + t] = gt[c * cout + o];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
                if let Some(b) = bias {
                    let mut gb = Tensor::zeros(&[cout]);
                    for row in gyd.chunks(cout) {
                        for (o, g) in gb.data_mut().iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Concat(parts) => {
                let total = gy.cols();
                let rows = gy.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = self.zeros_like(p);
                    for r in 0..rows {
                        gp.data_mut()[r * w..(r + 1) * w].copy_from_slice(
                            &gy.data()[r * total + offset..r * total + offset + w],
                        );
                    }
                    self.accumulate(grads, p, gp);
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let d = self.value(*x).cols();
                let len = gy.cols();
                let mut gx = self.zeros_like(*x);
                for r in 0..gy.rows() {
                    gx.data_mut()[r * d + start..r * d + start + len].copy_from_slice(gy.row(r));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, idx } => {
                let d = gy.cols();
                let mut gx = self.zeros_like(*x);
                for (m, &i) in idx.iter().enumerate() {
                    for (o, g) in gx.data_mut()[i * d..(i + 1) * d].iter_mut().zip(gy.row(m)) {
                        *o += g;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ScatterAddRows { x, idx } => {
                let d = gy.cols();
                let mut gx = self.zeros_like(*x);
                for (m, &i) in idx.iter().enumerate() {
                    gx.data_mut()[m * d..(m + 1) * d].copy_from_slice(gy.row(i));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MeanRows { x, groups } => {
                let d = gy.cols();
                let mut gx = self.zeros_like(*x);
                for (gi, g) in groups.iter().enumerate() {
                    let inv = 1.0 / g.len() as f64;
                    for &r in g {
                        for (o, v) in gx.data_mut()[r * d..(r + 1) * d].iter_mut().zip(gy.row(gi)) {
                            *o += v * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GroupAttention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
                keep,
            } => {
                let d = gy.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut gq = self.zeros_like(*q);
                let mut gk = self.zeros_like(*k);
                let mut gv = self.zeros_like(*v);
                let mut slot = 0;
                for h in 0..*heads {
                    let c0 = h * dh;
                    for g in groups.iter() {
                        let m = g.len();
                        let p = &probs[slot];
                        let mask = &keep[slot];
                        slot += 1;
                        // dP' = dO V^T, dV += P'^T dO
                        let mut dp = vec![0.0; m * m];
                        for (a, &ra) in g.iter().enumerate() {
                            let go = &gy.row(ra)[c0..c0 + dh];
                            for (b, &rb) in g.iter().enumerate() {
                                let vb = &vv.row(rb)[c0..c0 + dh];
                                let mut w = p[a * m + b];
                                let mut dpv = dot(go, vb);
                                if !mask.is_empty() {
                                    w *= mask[a * m + b];
                                    dpv *= mask[a * m + b];
                                }
                                dp[a * m + b] = dpv;
                                if w != 0.0 {
                                    let gvr = &mut gv.data_mut()[rb * d + c0..rb * d + c0 + dh];
                                    for (o, gval) in gvr.iter_mut().zip(go) {
                                        *o += w * gval;
                                    }
                                }
                            }
                        }
                        // softmax adjoint, then the scaled QK^T adjoint
                        for a in 0..m {
                            let pr = &p[a * m..(a + 1) * m];
                            let dr = &mut dp[a * m..(a + 1) * m];
                            let s = dot(pr, dr);
                            for b in 0..m {
                                dr[b] = pr[b] * (dr[b] - s) * scale;
                            }
                        }
                        for (a, &ra) in g.iter().enumerate() {
                            for (b, &rb) in g.iter().enumerate() {
                                let ds = dp[a * m + b];
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in c0..c0 + dh {
                                    gq.data_mut()[ra * d + c] += ds * kv.data()[rb * d + c];
                                    gk.data_mut()[rb * d + c] += ds * qv.data()[ra * d + c];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
            Op::Reshape(x) => {
                let gx = gy.clone().reshape(self.shape(*x))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Dropout { x, mask } => {
                let mut gx = gy.clone();
                for (g, m) in gx.data_mut().iter_mut().zip(mask) {
                    *g *= m;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let g = gy.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel() as f64;
                let g = gy.data()[0] / n;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::VarAll(x) => {
                let xv = self.value(*x);
                let n = xv.numel() as f64;
                let mean = xv.sum() / n;
                let g = gy.data()[0];
                self.accumulate(grads, *x, xv.map(|a| g * 2.0 * (a - mean) / n));
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.rows() as f64;
                let g = gy.data()[0];
                let data: Vec<f64> = probs
                    .iter()
                    .zip(targets.data())
                    .map(|(p, t)| g * (p - t) / rows)
                    .collect();
                let gl = Tensor::new(self.shape(*logits).to_vec(), data)?;
                self.accumulate(grads, *logits, gl);
            }
            Op::BceLogits { logits, targets } => {
                let n = targets.len() as f64;
                let g = gy.data()[0];
                let data: Vec<f64> = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| g * (sigmoid(z) - y) / n)
                    .collect();
                let gl = Tensor::new(self.shape(*logits).to_vec(), data)?;
                self.accumulate(grads, *logits, gl);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Reorders `w[cout, cin, k]` into `k` row-major `[cin, cout]` tap matrices.
fn tap_matrices(w: &[f64], cout: usize, cin: usize, kernel: usize) -> Vec<Vec<f64>> {
    (0..kernel)
        .map(|t| {
            let mut m = vec![0.0; cin * cout];
            for o in 0..cout {
                for c in 0..cin {
                    m[c * cout + o] = w[(o * cin + c) * kernel + t];
                }
            }
            m
        })
        .collect()
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every parameter-leaf gradient into the store's `grad` buffers.
    pub fn accumulate_into(&self, graph: &Graph, store: &mut ParamStore) {
        for (i, node) in graph.nodes.iter().enumerate().take(self.grads.len()) {
            if let (Some(id), Some(g)) = (node.param, &self.grads[i]) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}
