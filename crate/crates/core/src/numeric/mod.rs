//! Differentiable numeric core: dense tensors, a define-by-run graph with an
//! adjoint for every op, and finite-difference gradient verification.

mod gradcheck;
mod graph;
mod params;
mod tensor;

use std::rc::Rc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub use gradcheck::{
    finite_diff_check, finite_diff_check_with, finite_diff_check_with_floor, relative_error,
    GradCheckReport, Stencil, DEFAULT_REL_FLOOR,
};
pub use graph::{gelu, sigmoid, Gradients, Graph, Groups, Mode, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Single-head `softmax(Q K^T / sqrt(dh)) V` over all `m` rows.
pub fn softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "attention input {:?}",
            q.shape()
        )));
    }
    let mut g = Graph::eval();
    let (qv, kv, vv) = (
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(v.clone()),
    );
    let all = Rc::new(vec![(0..q.rows()).collect::<Vec<_>>()]);
    let out = g.group_attention(qv, kv, vv, 1, all, 0.0)?;
    Ok(g.value(out).clone())
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::eval();
    let (xv, gv, bv) = (
        g.constant(x.clone()),
        g.constant(gain.clone()),
        g.constant(bias.clone()),
    );
    let out = g.layer_norm(xv, gv, bv, eps)?;
    Ok(g.value(out).clone())
}

/// Same-padded grouped convolution: `x[G, L, cin]`, `w[cout, cin, kernel]`.
pub fn grouped_conv1d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let mut g = Graph::eval();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = bias.map(|b| g.constant(b.clone()));
    let out = g.grouped_conv1d(xv, wv, bv)?;
    Ok(g.value(out).clone())
}

/// Magnitudes of the real FFT of `signal`: bins `0..=len/2`.
///
/// Forward-only; used as a fixed feature extractor on raw inputs.
pub fn rfft_magnitude(signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    if n == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fft.process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm()).collect()
}

/// Batched [`rfft_magnitude`] over the rows of `patches[.., t]`.
pub fn rfft_magnitude_rows(patches: &Tensor) -> Tensor {
    let t = patches.cols();
    let rows = patches.rows();
    let bins = t / 2 + 1;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(t);
    let mut out = Vec::with_capacity(rows * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); t];
    for r in 0..rows {
        for (b, &x) in buf.iter_mut().zip(patches.row(r)) {
            *b = Complex::new(x, 0.0);
        }
        fft.process(&mut buf);
        out.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    Tensor::new(vec![rows, bins], out).expect("bins * rows")
}
