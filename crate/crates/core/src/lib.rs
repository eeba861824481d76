//! Cross-scale spatiotemporal EEG encoder.
//!
//! Multichannel EEG is standardized ([`dsp`]), cut into patches, embedded
//! ([`embed`]), and passed through alternating cross-scale tokenization
//! ([`cst`]) and structured sparse attention ([`ssa`]) layers. The encoder is
//! pretrained by masked reconstruction and fine-tuned with task heads
//! ([`model`], [`train`]). [`bench`] compares attention cost against dense and
//! criss-cross baselines.

pub mod bench;
pub mod cst;
pub mod data_io;
pub mod dsp;
pub mod embed;
pub mod error;
pub mod layers;
pub mod model;
pub mod montage;
pub mod numeric;
pub mod ssa;
pub mod train;

pub use error::{Error, Result};
