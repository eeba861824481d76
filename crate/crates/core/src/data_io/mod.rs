//! Recording files, manifest datasets and the planted synthetic generator.

mod dataset;
mod format;
mod synthetic;

pub use dataset::{
    build_dataset, load_samples, load_split, prepare_dataset, split_segments, synthetic_corpus,
    write_manifest, Corpus, DatasetEntry, DatasetIndex, Sample, Split, MANIFEST_FILE,
    PREPARED_FILE,
};
pub use format::{
    read_recording, recording_from_bytes, recording_to_bytes, write_recording, RecordingHeader,
    RECORDING_MAGIC, RECORDING_VERSION,
};
pub use synthetic::{generate_synthetic, BurstPattern, SyntheticSpec, BAND_LIMITS};
