//! Signal standardization: zero-phase band-pass and notch filtering,
//! band-limited resampling, amplitude scaling and patch segmentation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::montage::ChannelLabel;
use crate::numeric::Tensor;

/// Multichannel EEG in channel-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    /// One vector of `T` samples per channel.
    pub samples: Vec<Vec<f64>>,
    pub sample_rate: f64,
    pub labels: Vec<ChannelLabel>,
}

impl Recording {
    pub fn new(
        samples: Vec<Vec<f64>>,
        sample_rate: f64,
        labels: Vec<ChannelLabel>,
    ) -> Result<Self> {
        let rec = Self {
            samples,
            sample_rate,
            labels,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.len() != self.labels.len() {
            return Err(Error::InvalidRecording(format!(
                "{} channels but {} labels",
                self.samples.len(),
                self.labels.len()
            )));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::InvalidRecording(format!(
                "sample rate {}",
                self.sample_rate
            )));
        }
        let t = self.num_samples();
        if t == 0 || self.samples.iter().any(|c| c.len() != t) {
            return Err(Error::InvalidRecording(
                "channels must share a non-zero length".into(),
            ));
        }
        Ok(())
    }

    pub fn num_channels(&self) -> usize {
        self.samples.len()
    }

    pub fn num_samples(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    fn map_channels(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        Self {
            samples: self.samples.iter().map(|c| f(c)).collect(),
            sample_rate: self.sample_rate,
            labels: self.labels.clone(),
        }
    }
}

/// `C × n × t` patches of a normalized recording.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchedSignal {
    pub patches: Tensor,
    pub patch_len: usize,
}

impl PatchedSignal {
    pub fn new(patches: Tensor) -> Result<Self> {
        match patches.shape() {
            [_, _, t] if *t > 0 => {
                let patch_len = *t;
                Ok(Self { patches, patch_len })
            }
            s => Err(Error::ShapeMismatch(format!(
                "patches must be C×n×t, got {s:?}"
            ))),
        }
    }

    pub fn num_channels(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn num_segments(&self) -> usize {
        self.patches.shape()[1]
    }

    pub fn patch(&self, channel: usize, segment: usize) -> &[f64] {
        self.patches.row(channel * self.num_segments() + segment)
    }

    /// Concatenates each channel's patches back into one sample vector.
    pub fn flatten(&self) -> Vec<Vec<f64>> {
        let per = self.num_segments() * self.patch_len;
        self.patches
            .data()
            .chunks(per)
            .map(<[f64]>::to_vec)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// IIR filtering

/// Second-order section in transposed direct form II, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn from_raw(b: [f64; 3], a0: f64, a1: f64, a2: f64) -> Self {
        Self {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [a1 / a0, a2 / a0],
        }
    }

    pub fn lowpass(f0: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * f0 / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        Self::from_raw(
            [(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0],
            1.0 + alpha,
            -2.0 * c,
            1.0 - alpha,
        )
    }

    pub fn highpass(f0: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * f0 / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        Self::from_raw(
            [(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0],
            1.0 + alpha,
            -2.0 * c,
            1.0 - alpha,
        )
    }

    pub fn notch(f0: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * f0 / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        Self::from_raw([1.0, -2.0 * c, 1.0], 1.0 + alpha, -2.0 * c, 1.0 - alpha)
    }

    /// DC gain `H(1)`.
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// State that makes a constant input `u` produce a constant output.
    fn steady_state(&self, u: f64) -> [f64; 2] {
        let g = self.dc_gain();
        [(g - self.b[0]) * u, (self.b[2] - self.a[1] * g) * u]
    }
}

/// Q factors of the two sections of a 4th-order Butterworth prototype.
const BUTTER4_Q: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_376_6];

pub const NOTCH_Q: f64 = 30.0;

/// Cascade of biquads applied forward and backward for zero phase.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterChain {
    pub sections: Vec<Biquad>,
    /// Odd-extension length used by [`FilterChain::filtfilt`] (before capping
    /// at the signal length).
    pub pad: usize,
}

impl FilterChain {
    /// 4th-order Butterworth high-pass at `lo` and low-pass at `hi`, plus an
    /// optional Q=30 notch.
    pub fn design(fs: f64, band_lo: f64, band_hi: f64, notch: Option<f64>) -> Result<Self> {
        let nyq = fs / 2.0;
        if !(band_lo > 0.0 && band_lo < band_hi && band_hi < nyq) {
            return Err(Error::InvalidBand(format!(
                "need 0 < {band_lo} < {band_hi} < Nyquist {nyq}"
            )));
        }
        let mut sections = Vec::with_capacity(5);
        for q in BUTTER4_Q {
            sections.push(Biquad::highpass(band_lo, fs, q));
        }
        for q in BUTTER4_Q {
            sections.push(Biquad::lowpass(band_hi, fs, q));
        }
        if let Some(f) = notch {
            if !(f > band_lo && f < band_hi) {
                return Err(Error::InvalidBand(format!(
                    "notch {f} Hz outside pass band {band_lo}–{band_hi} Hz"
                )));
            }
            sections.push(Biquad::notch(f, fs, NOTCH_Q));
        }
        // One period of the lowest band edge lets the high-pass ringing settle
        // inside the padding.
        let pad = (3 * (2 * sections.len() + 1)).max((fs / band_lo).ceil() as usize);
        Ok(Self { sections, pad })
    }

    /// One causal pass starting from the steady state of `x[0]`.
    fn run(&self, x: &mut [f64]) {
        let Some(&first) = x.first() else { return };
        let mut u = first;
        for s in &self.sections {
            let [mut z1, mut z2] = s.steady_state(u);
            u *= s.dc_gain();
            for v in x.iter_mut() {
                let xin = *v;
                let y = s.b[0] * xin + z1;
                z1 = s.b[1] * xin - s.a[0] * y + z2;
                z2 = s.b[2] * xin - s.a[1] * y;
                *v = y;
            }
        }
    }

    /// Zero-phase filtering with odd-extension padding at both ends.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n < 2 {
            return x.to_vec();
        }
        let pad = self.pad.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.run(&mut ext);
        ext.reverse();
        self.run(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Zero-phase band-pass (and optional notch) applied to every channel.
pub fn filter_signal(
    rec: &Recording,
    band_lo: f64,
    band_hi: f64,
    notch: Option<f64>,
) -> Result<Recording> {
    let chain = FilterChain::design(rec.sample_rate, band_lo, band_hi, notch)?;
    Ok(rec.map_channels(|c| chain.filtfilt(c)))
}

// ---------------------------------------------------------------------------
// Resampling

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

/// Rational factors `up/down` for a rate change, at millihertz resolution.
pub fn rate_factors(source: f64, target: f64) -> Result<(u64, u64)> {
    if !(source > 0.0 && target > 0.0) {
        return Err(Error::InvalidRecording(format!(
            "sample rates must be positive ({source} -> {target})"
        )));
    }
    let up = (target * 1000.0).round() as u64;
    let down = (source * 1000.0).round() as u64;
    let g = gcd(up, down);
    Ok((up / g, down / g))
}

/// Polyphase windowed-sinc resampler for a fixed `up/down` ratio.
#[derive(Debug, Clone)]
pub struct Resampler {
    up: u64,
    down: u64,
    half_taps: usize,
    /// `phases[p][j]` weights input sample `floor(pos) - half_taps + 1 + j`.
    phases: Vec<Vec<f64>>,
}

impl Resampler {
    const ZERO_CROSSINGS: f64 = 16.0;
    const KAISER_BETA: f64 = 8.0;

    pub fn new(up: u64, down: u64) -> Self {
        let cutoff = (up as f64 / down as f64).min(1.0);
        let support = Self::ZERO_CROSSINGS / cutoff;
        let half_taps = support.ceil() as usize + 1;
        let i0_beta = bessel_i0(Self::KAISER_BETA);
        let kernel = |tau: f64| {
            if tau.abs() >= support {
                return 0.0;
            }
            let arg = std::f64::consts::PI * cutoff * tau;
            let sinc = if arg.abs() < 1e-12 {
                1.0
            } else {
                arg.sin() / arg
            };
            let r = tau / support;
            let win = bessel_i0(Self::KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
            cutoff * sinc * win
        };
        let phases = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                let mut taps: Vec<f64> = (0..2 * half_taps)
                    .map(|j| {
                        let offset = j as isize - half_taps as isize + 1;
                        kernel(frac - offset as f64)
                    })
                    .collect();
                let s: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|t| *t /= s);
                taps
            })
            .collect();
        Self {
            up,
            down,
            half_taps,
            phases,
        }
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        (input_len as f64 * self.up as f64 / self.down as f64).round() as usize
    }

    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as isize;
        let out_len = self.output_len(x.len());
        (0..out_len)
            .map(|m| {
                let num = m as u64 * self.down;
                let base = (num / self.up) as isize;
                let taps = &self.phases[(num % self.up) as usize];
                taps.iter()
                    .enumerate()
                    .map(|(j, w)| {
                        let idx = (base + j as isize - self.half_taps as isize + 1).clamp(0, n - 1);
                        w * x[idx as usize]
                    })
                    .sum()
            })
            .collect()
    }
}

/// Band-limited rate conversion. Identity when `target` equals the source rate.
pub fn resample(rec: &Recording, target: f64) -> Result<Recording> {
    if target == rec.sample_rate {
        return Ok(rec.clone());
    }
    let (up, down) = rate_factors(rec.sample_rate, target)?;
    let r = Resampler::new(up, down);
    let mut out = rec.map_channels(|c| r.process(c));
    out.sample_rate = target;
    Ok(out)
}

/// Microvolts per normalized unit.
pub const AMPLITUDE_SCALE_UV: f64 = 100.0;

/// Divides every sample by 100 µV. Values are not clipped.
pub fn normalize_amplitude(rec: &Recording) -> Recording {
    rec.map_channels(|c| c.iter().map(|v| v / AMPLITUDE_SCALE_UV).collect())
}

/// Splits each channel into `floor(T / t)` non-overlapping patches, dropping
/// the trailing remainder.
pub fn segment(rec: &Recording, patch_len: usize) -> Result<PatchedSignal> {
    if patch_len == 0 {
        return Err(Error::ConfigInvalid(
            "patch length must be at least 1".into(),
        ));
    }
    let t = rec.num_samples();
    if t < patch_len {
        return Err(Error::TooShort {
            samples: t,
            patch_len,
        });
    }
    let n = t / patch_len;
    let mut data = Vec::with_capacity(rec.num_channels() * n * patch_len);
    for ch in &rec.samples {
        data.extend_from_slice(&ch[..n * patch_len]);
    }
    PatchedSignal::new(Tensor::new(vec![rec.num_channels(), n, patch_len], data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub band_lo: f64,
    pub band_hi: f64,
    pub notch: Option<f64>,
    pub rate: f64,
    pub patch_len: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            band_lo: 0.3,
            band_hi: 75.0,
            notch: Some(60.0),
            rate: 200.0,
            patch_len: 200,
        }
    }
}

/// Filter, resample and scale; returns the normalized recording.
pub fn standardize(rec: &Recording, cfg: &PreprocessConfig) -> Result<Recording> {
    let filtered = filter_signal(rec, cfg.band_lo, cfg.band_hi, cfg.notch)?;
    let resampled = resample(&filtered, cfg.rate)?;
    Ok(normalize_amplitude(&resampled))
}

/// [`standardize`] followed by [`segment`].
pub fn preprocess(rec: &Recording, cfg: &PreprocessConfig) -> Result<PatchedSignal> {
    segment(&standardize(rec, cfg)?, cfg.patch_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::montage::labels;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn mono(samples: Vec<f64>, fs: f64) -> Recording {
        Recording::new(vec![samples], fs, labels(&["Cz"]).unwrap()).unwrap()
    }

    fn sine(freq: f64, fs: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / fs).sin())
            .collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    /// |H(e^{jw})| evaluated directly from the section coefficients.
    fn chain_magnitude(chain: &FilterChain, f: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * f / fs;
        chain
            .sections
            .iter()
            .map(|s| {
                let (c1, s1) = (w.cos(), -w.sin());
                let (c2, s2) = ((2.0 * w).cos(), -(2.0 * w).sin());
                let nr = s.b[0] + s.b[1] * c1 + s.b[2] * c2;
                let ni = s.b[1] * s1 + s.b[2] * s2;
                let dr = 1.0 + s.a[0] * c1 + s.a[1] * c2;
                let di = s.a[0] * s1 + s.a[1] * s2;
                ((nr * nr + ni * ni) / (dr * dr + di * di)).sqrt()
            })
            .product()
    }

    /// Amplitude of the `freq` component by projection onto sin/cos.
    fn lock_in(x: &[f64], freq: f64, fs: f64, start: usize) -> f64 {
        let (mut s, mut c) = (0.0, 0.0);
        for (k, v) in x.iter().enumerate() {
            let ph = 2.0 * PI * freq * (start + k) as f64 / fs;
            s += v * ph.sin();
            c += v * ph.cos();
        }
        2.0 * (s * s + c * c).sqrt() / x.len() as f64
    }

    #[test]
    fn out_of_band_sine_is_attenuated() {
        let fs = 250.0;
        let x = sine(100.0, fs, 5000, 1.0);
        let y = filter_signal(&mono(x.clone(), fs), 0.3, 75.0, Some(60.0)).unwrap();
        let mid = &y.samples[0][1000..4000];
        let peak = mid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak < 0.1, "{peak}");
        // forward-backward squares the single-pass magnitude
        let chain = FilterChain::design(fs, 0.3, 75.0, Some(60.0)).unwrap();
        let expected = chain_magnitude(&chain, 100.0, fs).powi(2);
        let measured = lock_in(mid, 100.0, fs, 1000);
        assert!(
            (measured / expected - 1.0).abs() < 0.05,
            "{measured} vs oracle {expected}"
        );
    }

    #[test]
    fn dc_is_removed() {
        let y = filter_signal(&mono(vec![37.0; 2000], 250.0), 0.3, 75.0, None).unwrap();
        let mean = y.samples[0].iter().sum::<f64>() / 2000.0;
        assert!(mean.abs() < 1e-3, "{mean}");
    }

    #[test]
    fn notch_attenuates_mains_by_20db() {
        let fs = 250.0;
        let x = sine(60.0, fs, 10_000, 1.0);
        let y = filter_signal(&mono(x.clone(), fs), 0.3, 75.0, Some(60.0)).unwrap();
        let ratio = rms(&y.samples[0][2000..8000]) / rms(&x[2000..8000]);
        let db = -20.0 * ratio.log10();
        assert!(db >= 20.0, "{db} dB");
        let chain = FilterChain::design(fs, 0.3, 75.0, Some(60.0)).unwrap();
        assert!(chain_magnitude(&chain, 60.0, fs) < 1e-9);
    }

    #[test]
    fn passband_is_preserved() {
        let fs = 250.0;
        let x = sine(10.0, fs, 5000, 1.0);
        let y = filter_signal(&mono(x.clone(), fs), 0.3, 75.0, Some(60.0)).unwrap();
        let ratio = rms(&y.samples[0][1000..4000]) / rms(&x[1000..4000]);
        assert!((ratio - 1.0).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn white_noise_energy_does_not_grow() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[4000], 1.0, &mut rng).into_data();
        let y = filter_signal(&mono(x.clone(), 250.0), 0.3, 75.0, Some(60.0)).unwrap();
        let ein: f64 = x.iter().map(|v| v * v).sum();
        let eout: f64 = y.samples[0].iter().map(|v| v * v).sum();
        assert!(eout <= ein, "{eout} > {ein}");
    }

    #[test]
    fn band_validation() {
        let rec = mono(vec![0.0; 100], 250.0);
        assert!(matches!(
            filter_signal(&rec, 0.3, 130.0, None),
            Err(Error::InvalidBand(_))
        ));
        assert!(matches!(
            filter_signal(&rec, 10.0, 5.0, None),
            Err(Error::InvalidBand(_))
        ));
        assert!(matches!(
            filter_signal(&rec, 0.0, 50.0, None),
            Err(Error::InvalidBand(_))
        ));
        assert!(matches!(
            filter_signal(&rec, 0.3, 50.0, Some(60.0)),
            Err(Error::InvalidBand(_))
        ));
    }

    #[test]
    fn resample_lengths_and_constants() {
        let rec = mono(vec![2.5; 1000], 250.0);
        let out = resample(&rec, 200.0).unwrap();
        assert_eq!(out.num_samples(), 800);
        assert_eq!(out.sample_rate, 200.0);
        assert!(out.samples[0].iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rec = mono(Tensor::randn(&[333], 1.0, &mut rng).into_data(), 200.0);
        assert_eq!(resample(&rec, 200.0).unwrap(), rec);
    }

    #[test]
    fn resample_sine_accuracy() {
        let x = sine(10.0, 250.0, 2500, 1.0);
        let out = resample(&mono(x, 250.0), 200.0).unwrap();
        let y = &out.samples[0];
        assert_eq!(y.len(), 2000);
        let err = (100..1900)
            .map(|m| (y[m] - (2.0 * PI * 10.0 * m as f64 / 200.0).sin()).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn resample_upsampling() {
        let x = sine(5.0, 100.0, 500, 1.0);
        let out = resample(&mono(x, 100.0), 256.0).unwrap();
        assert_eq!(out.num_samples(), 1280);
        let err = (100..1180)
            .map(|m| (out.samples[0][m] - (2.0 * PI * 5.0 * m as f64 / 256.0).sin()).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn normalize_examples() {
        let rec = mono(vec![-100.0, 0.0, 250.0], 200.0);
        assert_eq!(normalize_amplitude(&rec).samples[0], vec![-1.0, 0.0, 2.5]);
    }

    #[test]
    fn segment_counts() {
        let p = segment(&mono(vec![0.0; 6000], 200.0), 200).unwrap();
        assert_eq!(p.num_segments(), 30);
        let p = segment(&mono(vec![0.0; 6500], 200.0), 200).unwrap();
        assert_eq!(p.num_segments(), 32);
        assert_eq!(
            segment(&mono(vec![0.0; 199], 200.0), 200),
            Err(Error::TooShort {
                samples: 199,
                patch_len: 200
            })
        );
    }

    #[test]
    fn recording_validation() {
        let l = labels(&["Cz", "Pz"]).unwrap();
        assert!(Recording::new(vec![vec![0.0; 3]], 200.0, l.clone()).is_err());
        assert!(Recording::new(vec![vec![0.0; 3], vec![0.0; 2]], 200.0, l.clone()).is_err());
        assert!(Recording::new(vec![vec![0.0; 3]; 2], 0.0, l).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn segment_flatten_roundtrip(seed in 0u64..100, c in 1usize..4, n in 1usize..6, t in 1usize..9) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let samples: Vec<Vec<f64>> = (0..c)
                    .map(|_| Tensor::randn(&[n * t], 1.0, &mut rng).into_data())
                    .collect();
                let names: Vec<&str> = crate::montage::STANDARD_19[..c].to_vec();
                let rec = Recording::new(samples.clone(), 200.0, labels(&names).unwrap()).unwrap();
                let p = segment(&rec, t).unwrap();
                prop_assert_eq!(p.flatten(), samples.clone());
                let again = segment(&Recording::new(p.flatten(), 200.0, labels(&names).unwrap()).unwrap(), t).unwrap();
                prop_assert_eq!(again, p);
            }

            #[test]
            fn resample_length_arithmetic(len in 1usize..3000, src in prop::sample::select(vec![128.0, 200.0, 250.0, 256.0, 500.0, 1000.0])) {
                let rec = mono(vec![1.0; len], src);
                let out = resample(&rec, 200.0).unwrap();
                prop_assert_eq!(out.num_samples(), (len as f64 * 200.0 / src).round() as usize);
            }
        }
    }
}
