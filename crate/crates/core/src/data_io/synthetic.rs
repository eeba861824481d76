//! Synthetic EEG with planted class structure: 1/f background noise plus
//! class-specific band-limited bursts confined to a region subset and to
//! time windows.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::Recording;
use crate::error::{Error, Result};
use crate::montage::{build_region_map, ChannelLabel, Region};

/// Carrier bands must lie strictly inside this range (Hz).
pub const BAND_LIMITS: (f64, f64) = (0.3, 75.0);
/// Sinusoids summed per burst; frequencies are drawn uniformly in the band.
const CARRIER_COMPONENTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurstPattern {
    pub regions: Vec<Region>,
    /// Carrier band `(lo, hi)` in Hz; `lo == hi` gives a pure tone.
    pub band: (f64, f64),
    /// `(start, length)` in seconds; each window carries one Hann-shaped burst.
    pub windows: Vec<(f64, f64)>,
    /// Peak burst amplitude in µV.
    pub amplitude_uv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub labels: Vec<ChannelLabel>,
    pub duration_s: f64,
    pub sample_rate: f64,
    /// One pattern per class; the class count is `classes.len()`.
    pub classes: Vec<BurstPattern>,
    /// RMS of the 1/f background in µV.
    pub noise_uv: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Classes alternate between a focal pattern (one region, two short
    /// alpha-band bursts) and a distributed one (every other region, a single
    /// theta-band burst spanning the whole recording), so consecutive classes
    /// differ in both spatial extent and temporal scale.
    pub fn planted(
        labels: Vec<ChannelLabel>,
        duration_s: f64,
        sample_rate: f64,
        class_count: usize,
        seed: u64,
    ) -> Result<Self> {
        let rm = build_region_map(&labels).map_err(|e| Error::SpecInvalid(e.to_string()))?;
        let present: Vec<Region> = rm.regions().iter().map(|(r, _)| *r).collect();
        if present.len() < 2 {
            return Err(Error::SpecInvalid(
                "planted classes need channels from at least two regions".into(),
            ));
        }
        const BANDS: [(f64, f64); 4] = [(8.0, 12.0), (4.0, 7.0), (13.0, 20.0), (20.0, 30.0)];
        let classes = (0..class_count)
            .map(|c| {
                let anchor = present[(c / 2) % present.len()];
                let band = BANDS[c % BANDS.len()];
                if c % 2 == 0 {
                    let len = 0.2 * duration_s;
                    BurstPattern {
                        regions: vec![anchor],
                        band,
                        windows: vec![(0.1 * duration_s, len), (0.55 * duration_s, len)],
                        amplitude_uv: 50.0,
                    }
                } else {
                    BurstPattern {
                        regions: present.iter().copied().filter(|&r| r != anchor).collect(),
                        band,
                        windows: vec![(0.0, duration_s)],
                        amplitude_uv: 50.0,
                    }
                }
            })
            .collect();
        let spec = Self {
            labels,
            duration_s,
            sample_rate,
            classes,
            noise_uv: 10.0,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate + 1e-9).floor() as usize
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::SpecInvalid(msg));
        if self.labels.is_empty() {
            return bad("no channels".into());
        }
        let rm = build_region_map(&self.labels).map_err(|e| Error::SpecInvalid(e.to_string()))?;
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return bad(format!("sample rate {}", self.sample_rate));
        }
        if !(self.duration_s.is_finite() && self.num_samples() >= 1) {
            return bad(format!("duration {} s gives no samples", self.duration_s));
        }
        if !(self.noise_uv >= 0.0 && self.noise_uv.is_finite()) {
            return bad(format!("noise level {}", self.noise_uv));
        }
        if self.classes.is_empty() {
            return bad("at least one class pattern is required".into());
        }
        for (c, p) in self.classes.iter().enumerate() {
            let (lo, hi) = p.band;
            if !(lo > BAND_LIMITS.0
                && lo <= hi
                && hi < BAND_LIMITS.1
                && hi < self.sample_rate / 2.0)
            {
                return bad(format!(
                    "class {c}: carrier band {lo}–{hi} Hz outside (0.3, 75) Hz or above Nyquist"
                ));
            }
            if p.regions.is_empty() {
                return bad(format!("class {c}: empty region subset"));
            }
            if let Some(r) = p
                .regions
                .iter()
                .find(|r| rm.regions().iter().all(|(q, _)| q != *r))
            {
                return bad(format!(
                    "class {c}: region {r} has no channels in this montage"
                ));
            }
            if !(p.amplitude_uv >= 0.0 && p.amplitude_uv.is_finite()) {
                return bad(format!("class {c}: amplitude {}", p.amplitude_uv));
            }
            for &(start, len) in &p.windows {
                if !(start >= 0.0 && len > 0.0 && start + len <= self.duration_s + 1e-9) {
                    return bad(format!(
                        "class {c}: window ({start}, {len}) outside the recording"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Zero-mean noise with a 1/f power spectrum, scaled to the requested RMS.
fn pink_noise(rng: &mut impl Rng, len: usize, rms: f64, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    if rms == 0.0 || len < 2 {
        return vec![0.0; len];
    }
    let mut buf: Vec<Complex<f64>> = (0..len)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    planner.plan_fft_forward(len).process(&mut buf);
    buf[0] = Complex::new(0.0, 0.0);
    for (k, v) in buf.iter_mut().enumerate().skip(1) {
        // Same gain at k and len-k keeps the inverse transform real.
        *v /= (k.min(len - k) as f64).sqrt();
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let mean = x.iter().sum::<f64>() / len as f64;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64).sqrt();
    if sd == 0.0 {
        return vec![0.0; len];
    }
    x.iter().map(|v| (v - mean) * rms / sd).collect()
}

/// Draws recording `index` of the corpus described by `spec`. The label is
/// `index % class_count`; noise, carrier frequencies, phases and channel
/// gains come from a stream keyed by `(spec.seed, index)`.
pub fn generate_synthetic(spec: &SyntheticSpec, index: u64) -> Result<(Recording, usize)> {
    spec.validate()?;
    let label = (index % spec.class_count() as u64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let t = spec.num_samples();
    let fs = spec.sample_rate;
    let mut planner = FftPlanner::new();
    let mut samples: Vec<Vec<f64>> = (0..spec.labels.len())
        .map(|_| pink_noise(&mut rng, t, spec.noise_uv, &mut planner))
        .collect();

    let pattern = &spec.classes[label];
    let rm = build_region_map(&spec.labels)?;
    let planted: Vec<usize> = rm
        .regions()
        .iter()
        .filter(|(r, _)| pattern.regions.contains(r))
        .flat_map(|(_, ch)| ch.iter().copied())
        .collect();
    for &(start, len) in &pattern.windows {
        let components: Vec<(f64, f64)> = (0..CARRIER_COMPONENTS)
            .map(|_| {
                let (lo, hi) = pattern.band;
                let f = if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                };
                (f, rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        let a = (start * fs).round() as usize;
        let b = (((start + len) * fs).round() as usize).min(t);
        let span = (b - a).max(1) as f64;
        let burst: Vec<f64> = (a..b)
            .map(|s| {
                let env = (PI * (s - a) as f64 / span).sin().powi(2);
                let tt = s as f64 / fs;
                let carrier: f64 = components
                    .iter()
                    .map(|&(f, ph)| (2.0 * PI * f * tt + ph).sin())
                    .sum::<f64>()
                    / CARRIER_COMPONENTS as f64;
                pattern.amplitude_uv * env * carrier
            })
            .collect();
        for &ch in &planted {
            let gain = rng.random_range(0.8..1.2);
            for (s, v) in (a..b).zip(&burst) {
                samples[ch][s] += gain * v;
            }
        }
    }
    Ok((Recording::new(samples, fs, spec.labels.clone())?, label))
}
