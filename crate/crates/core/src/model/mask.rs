use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Masked and visible segment indices (both sorted) for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub segments: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub seed: u64,
}

impl MaskSpec {
    pub fn none(segments: usize) -> Self {
        Self {
            segments,
            masked: Vec::new(),
            visible: (0..segments).collect(),
            seed: 0,
        }
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }
}

/// `floor(r * n)`, with a tolerance so ratios written in decimal (0.29 of
/// 100) are not lost to binary rounding.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

/// Exactly [`mask_count`] segments chosen uniformly without replacement.
pub fn sample_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::ConfigInvalid(format!(
            "mask ratio {ratio} outside [0, 1)"
        )));
    }
    let count = mask_count(n, ratio).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = sample(&mut rng, n, count).into_vec();
    masked.sort_unstable();
    let visible = (0..n)
        .filter(|i| masked.binary_search(i).is_err())
        .collect();
    Ok(MaskSpec {
        segments: n,
        masked,
        visible,
        seed,
    })
}
