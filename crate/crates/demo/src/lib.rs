//! Browser bindings for three small, fast pieces of the encoder: the
//! preprocessing filter's frequency response, attention score-entry counts
//! as a recording grows, and the per-scale width split of the convolution
//! stage. The plain functions are usable (and tested) natively; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use eegfm::bench::{bench_region_map, count_score_entries, AttnKind};
use eegfm::dsp::{Biquad, FilterChain};
use serde_json::json;
use wasm_bindgen::prelude::wasm_bindgen;
use wasm_bindgen::JsError;

/// `|H(e^{iω})|` of one section, from the polynomial ratio in `z^{-1}`.
fn section_gain(s: &Biquad, omega: f64) -> f64 {
    let (s1, c1) = omega.sin_cos();
    let (s2, c2) = (2.0 * omega).sin_cos();
    let num = (
        s.b[0] + s.b[1] * c1 + s.b[2] * c2,
        -(s.b[1] * s1 + s.b[2] * s2),
    );
    let den = (
        1.0 + s.a[0] * c1 + s.a[1] * c2,
        -(s.a[0] * s1 + s.a[1] * s2),
    );
    num.0.hypot(num.1) / den.0.hypot(den.1)
}

/// Gain in dB of the zero-phase filter at `points` frequencies spread evenly
/// over `[0, Nyquist]`. Forward-backward filtering squares the magnitude.
/// `notch <= 0` disables the notch. Returns `[f0, db0, f1, db1, ...]`.
pub fn filter_response(
    rate: f64,
    band_lo: f64,
    band_hi: f64,
    notch: f64,
    points: usize,
) -> Result<Vec<f64>, String> {
    if points < 2 {
        return Err("need at least two frequency points".into());
    }
    let notch = (notch > 0.0).then_some(notch);
    let chain = FilterChain::design(rate, band_lo, band_hi, notch).map_err(|e| e.to_string())?;
    let nyquist = rate / 2.0;
    let mut out = Vec::with_capacity(2 * points);
    for i in 0..points {
        let f = nyquist * i as f64 / (points - 1) as f64;
        let omega = 2.0 * std::f64::consts::PI * f / rate;
        let gain: f64 = chain
            .sections
            .iter()
            .map(|s| section_gain(s, omega))
            .product();
        out.push(f);
        out.push((40.0 * gain.log10()).max(-200.0));
    }
    Ok(out)
}

/// Dense, criss-cross and structured-sparse score-entry counts for
/// `channels` channels and every segment count from `window` to
/// `max_segments`, as a JSON array of `{n, dense, criss_cross, ssa}`.
pub fn score_counts(channels: usize, max_segments: usize, window: usize) -> Result<String, String> {
    if window == 0 || max_segments < window {
        return Err(format!(
            "need 1 <= window ({window}) <= max segments ({max_segments})"
        ));
    }
    let rm = bench_region_map(channels).map_err(|e| e.to_string())?;
    let rows: Vec<_> = (window..=max_segments)
        .map(|n| {
            let count = |kind| count_score_entries(kind, channels, n, window, &rm);
            json!({
                "n": n,
                "dense": count(AttnKind::Dense),
                "criss_cross": count(AttnKind::CrissCross),
                "ssa": count(AttnKind::Ssa),
            })
        })
        .collect();
    Ok(serde_json::Value::Array(rows).to_string())
}

/// Widths given to each of `scales` kernel sizes out of `dim` channels.
pub fn allocate_dims(dim: usize, scales: usize) -> Result<Vec<u32>, String> {
    let dims = eegfm::cst::allocate_dims(dim, scales).map_err(|e| e.to_string())?;
    Ok(dims.into_iter().map(|d| d as u32).collect())
}

#[wasm_bindgen(js_name = filterResponse)]
pub fn filter_response_js(
    rate: f64,
    band_lo: f64,
    band_hi: f64,
    notch: f64,
    points: usize,
) -> Result<Vec<f64>, JsError> {
    filter_response(rate, band_lo, band_hi, notch, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = scoreCounts)]
pub fn score_counts_js(
    channels: usize,
    max_segments: usize,
    window: usize,
) -> Result<String, JsError> {
    score_counts(channels, max_segments, window).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = allocateDims)]
pub fn allocate_dims_js(dim: usize, scales: usize) -> Result<Vec<u32>, JsError> {
    allocate_dims(dim, scales).map_err(|e| JsError::new(&e))
}
