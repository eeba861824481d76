//! Attention cost comparison: analytic score-entry counts and wall-clock
//! timing for dense, criss-cross and structured sparse attention over the
//! same `C × n × d` token grid.
//!
//! The timed kernels are deliberately plain single-threaded loops with
//! `q = k = v = x` (no projections), each incrementing a counter per
//! query–key dot product, so the instrumented count can be checked against
//! the closed forms.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::montage::{build_region_map, labels, Region, RegionMap, STANDARD_19, STANDARD_64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    Dense,
    CrissCross,
    Ssa,
}

impl AttnKind {
    pub const ALL: [AttnKind; 3] = [AttnKind::Dense, AttnKind::CrissCross, AttnKind::Ssa];
}

impl fmt::Display for AttnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttnKind::Dense => "dense",
            AttnKind::CrissCross => "criss_cross",
            AttnKind::Ssa => "ssa",
        })
    }
}

impl FromStr for AttnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(AttnKind::Dense),
            "criss_cross" | "criss-cross" => Ok(AttnKind::CrissCross),
            "ssa" => Ok(AttnKind::Ssa),
            other => Err(Error::ConfigInvalid(format!(
                "unknown attention variant {other:?}"
            ))),
        }
    }
}

/// Closed-form number of query–key dot products.
///
/// * dense: `(C·n)²`
/// * criss-cross: `C·n·(n + C)` (each token scores its whole row and column)
/// * ssa: `Σ_channels Σ_groups |group|² + n·G·R²` with `w` temporal groups of
///   sizes `ceil((n − g)/w)`, `G` = largest region, `R` = region count.
pub fn count_score_entries(kind: AttnKind, c: usize, n: usize, w: usize, rm: &RegionMap) -> u64 {
    let (c64, n64) = (c as u64, n as u64);
    match kind {
        AttnKind::Dense => (c64 * n64).pow(2),
        AttnKind::CrissCross => c64 * n64 * (n64 + c64),
        AttnKind::Ssa => {
            let temporal: u64 = (0..w).map(|g| ((n - g).div_ceil(w) as u64).pow(2)).sum();
            let g = rm.max_region_size() as u64;
            let r = rm.num_regions() as u64;
            c64 * temporal + n64 * g * r * r
        }
    }
}

/// Estimated floating-point work: two operations (multiply, add) per feature
/// for the score and again for the value mix.
pub fn estimated_flops(entries: u64, d: usize) -> u64 {
    entries * 2 * d as u64 * 2
}

/// Channel-major token grid `[C, n, d]`.
struct Grid<'a> {
    x: &'a [f64],
    n: usize,
    d: usize,
}

impl Grid<'_> {
    fn token(&self, c: usize, i: usize) -> &[f64] {
        let o = (c * self.n + i) * self.d;
        &self.x[o..o + self.d]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax-weighted sum of `keys` (also used as values) for one query,
/// accumulated into `out`.
fn attend<'k>(
    q: &[f64],
    keys: impl Iterator<Item = &'k [f64]> + Clone,
    scale: f64,
    scores: &mut Vec<f64>,
    out: &mut [f64],
    count: &mut u64,
) {
    scores.clear();
    for k in keys.clone() {
        scores.push(dot(q, k) * scale);
        *count += 1;
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        z += *s;
    }
    for (k, s) in keys.zip(scores.iter()) {
        let p = s / z;
        for (o, v) in out.iter_mut().zip(k) {
            *o += p * v;
        }
    }
}

/// Runs one attention variant over `x` (`[C, n, d]`, channel-major);
/// returns the output grid and the number of score entries computed.
pub fn run_attention(
    kind: AttnKind,
    x: &[f64],
    c: usize,
    n: usize,
    d: usize,
    w: usize,
    rm: &RegionMap,
) -> Result<(Vec<f64>, u64)> {
    if x.len() != c * n * d || c == 0 || n == 0 || d == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a {c}x{n}x{d} grid",
            x.len()
        )));
    }
    let grid = Grid { x, n, d };
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; x.len()];
    let mut scores = Vec::new();
    let mut count = 0u64;
    let all: Vec<(usize, usize)> = (0..c).flat_map(|ch| (0..n).map(move |i| (ch, i))).collect();
    match kind {
        AttnKind::Dense => {
            for (t, &(ch, i)) in all.iter().enumerate() {
                let keys = all.iter().map(|&(c2, i2)| grid.token(c2, i2));
                attend(
                    grid.token(ch, i),
                    keys,
                    scale,
                    &mut scores,
                    &mut out[t * d..(t + 1) * d],
                    &mut count,
                );
            }
        }
        AttnKind::CrissCross => {
            for (t, &(ch, i)) in all.iter().enumerate() {
                let row = (0..n).map(|i2| grid.token(ch, i2));
                let col = (0..c).map(|c2| grid.token(c2, i));
                attend(
                    grid.token(ch, i),
                    row.chain(col),
                    scale,
                    &mut scores,
                    &mut out[t * d..(t + 1) * d],
                    &mut count,
                );
            }
        }
        AttnKind::Ssa => {
            if w == 0 || w > n {
                return Err(Error::InvalidWindow {
                    window: w,
                    segments: n,
                });
            }
            if rm.num_channels() != c {
                return Err(Error::ShapeMismatch(format!(
                    "region map covers {} channels, grid has {c}",
                    rm.num_channels()
                )));
            }
            out.copy_from_slice(x);
            // Temporal groups: same relative position across windows.
            for ch in 0..c {
                for g in 0..w {
                    for i in (g..n).step_by(w) {
                        let keys = (g..n).step_by(w).map(|i2| grid.token(ch, i2));
                        let o = (ch * n + i) * d;
                        attend(
                            grid.token(ch, i),
                            keys,
                            scale,
                            &mut scores,
                            &mut out[o..o + d],
                            &mut count,
                        );
                    }
                }
            }
            // Regional descriptors: representative token plus region mean.
            let lists: Vec<&[usize]> = rm.channel_lists().collect();
            let big_g = rm.max_region_size();
            let mut desc = vec![0.0; lists.len() * d];
            let mut upd = vec![0.0; lists.len() * d];
            for i in 0..n {
                for g in 0..big_g {
                    for (r, list) in lists.iter().enumerate() {
                        let rep = grid.token(list[g % list.len()], i);
                        let dst = &mut desc[r * d..(r + 1) * d];
                        dst.copy_from_slice(rep);
                        for &ch in list.iter() {
                            for (o, v) in dst.iter_mut().zip(grid.token(ch, i)) {
                                *o += v / list.len() as f64;
                            }
                        }
                    }
                    upd.iter_mut().for_each(|v| *v = 0.0);
                    for r in 0..lists.len() {
                        let keys = (0..lists.len()).map(|r2| &desc[r2 * d..(r2 + 1) * d]);
                        attend(
                            &desc[r * d..(r + 1) * d],
                            keys,
                            scale,
                            &mut scores,
                            &mut upd[r * d..(r + 1) * d],
                            &mut count,
                        );
                    }
                    for (r, list) in lists.iter().enumerate() {
                        let o = (list[g % list.len()] * n + i) * d;
                        for (dst, v) in out[o..o + d].iter_mut().zip(&upd[r * d..(r + 1) * d]) {
                            *dst += v;
                        }
                    }
                }
            }
        }
    }
    Ok((out, count))
}

/// Region map used for a benchmark of `c` channels: the standard 19- and
/// 64-electrode montages when `c` matches, otherwise `c` channels split into
/// up to five contiguous regions whose sizes differ by at most one.
pub fn bench_region_map(c: usize) -> Result<RegionMap> {
    match c {
        19 => build_region_map(&labels(&STANDARD_19)?),
        64 => build_region_map(&labels(&STANDARD_64)?),
        _ => {
            let r = c.clamp(1, 5);
            let mut start = 0;
            let groups = (0..r)
                .map(|k| {
                    let size = c / r + usize::from(k < c % r);
                    let g = (Region::ALL[k], (start..start + size).collect());
                    start += size;
                    g
                })
                .collect();
            RegionMap::from_groups(groups, c)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchSize {
    pub channels: usize,
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: AttnKind,
    pub channels: usize,
    pub segments: usize,
    pub d: usize,
    pub score_entries: u64,
    pub est_flops: u64,
    pub median_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub variant: AttnKind,
    /// Least-squares slope of log(score entries) against log(C·n).
    pub count_slope: f64,
    /// Least-squares slope of log(median time) against log(C·n).
    pub time_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub slopes: Vec<SlopeFit>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,C,n,d,score_entries,est_flops,median_ns\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.variant, r.channels, r.segments, r.d, r.score_entries, r.est_flops, r.median_ns
            ));
        }
        out
    }

    pub fn row(&self, variant: AttnKind, size: BenchSize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| {
            r.variant == variant && r.channels == size.channels && r.segments == size.segments
        })
    }
}

/// Least-squares slope of `log y` on `log x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Deterministic pseudo-random grid values in [-1, 1).
fn bench_grid(len: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    (0..len)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

pub const MIN_REPEATS: usize = 5;
/// Cells whose median is below this are rejected as unmeasurable.
pub const MIN_RESOLVABLE_NS: u64 = 1_000;

/// Times every variant at every size: one warm-up run, then the median of
/// `repeats` runs. Sizes must be strictly increasing in token count.
pub fn run_benchmark(
    sizes: &[BenchSize],
    variants: &[AttnKind],
    d: usize,
    window: usize,
    repeats: usize,
) -> Result<BenchReport> {
    if repeats < MIN_REPEATS {
        return Err(Error::ConfigInvalid(format!(
            "need at least {MIN_REPEATS} repeats, got {repeats}"
        )));
    }
    if sizes.is_empty() || variants.is_empty() || d == 0 {
        return Err(Error::ConfigInvalid(
            "empty size list, variant list or zero width".into(),
        ));
    }
    if sizes
        .windows(2)
        .any(|p| p[0].channels * p[0].segments >= p[1].channels * p[1].segments)
    {
        return Err(Error::ConfigInvalid(
            "sizes must be strictly increasing in C·n".into(),
        ));
    }
    let mut rows = Vec::new();
    for &variant in variants {
        for size in sizes {
            let (c, n) = (size.channels, size.segments);
            let rm = bench_region_map(c)?;
            let w = window.min(n);
            let x = bench_grid(c * n * d, (c * 1000 + n) as u64);
            let (warm, entries) = run_attention(variant, &x, c, n, d, w, &rm)?;
            black_box(&warm);
            let mut times = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let t0 = Instant::now();
                let out = run_attention(variant, black_box(&x), c, n, d, w, &rm)?;
                black_box(&out);
                times.push(t0.elapsed().as_nanos() as u64);
            }
            times.sort_unstable();
            let median_ns = times[times.len() / 2];
            if median_ns < MIN_RESOLVABLE_NS {
                return Err(Error::TimerResolutionTooCoarse {
                    variant: variant.to_string(),
                    median_ns,
                });
            }
            rows.push(BenchRow {
                variant,
                channels: c,
                segments: n,
                d,
                score_entries: entries,
                est_flops: estimated_flops(entries, d),
                median_ns,
            });
        }
    }
    let slopes = if sizes.len() >= 2 {
        variants
            .iter()
            .map(|&v| {
                let rs: Vec<&BenchRow> = rows.iter().filter(|r| r.variant == v).collect();
                let tokens = |r: &BenchRow| (r.channels * r.segments) as f64;
                SlopeFit {
                    variant: v,
                    count_slope: log_log_slope(
                        &rs.iter()
                            .map(|r| (tokens(r), r.score_entries as f64))
                            .collect::<Vec<_>>(),
                    ),
                    time_slope: log_log_slope(
                        &rs.iter()
                            .map(|r| (tokens(r), r.median_ns as f64))
                            .collect::<Vec<_>>(),
                    ),
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(BenchReport { rows, slopes })
}
