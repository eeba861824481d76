use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    // montage
    #[error("unknown electrode label {0:?}")]
    UnknownLabel(String),
    #[error("channel list is empty")]
    EmptyChannelList,

    // dsp
    #[error("invalid filter band: {0}")]
    InvalidBand(String),
    #[error("recording too short: {samples} samples < patch length {patch_len}")]
    TooShort { samples: usize, patch_len: usize },
    #[error("invalid recording: {0}")]
    InvalidRecording(String),

    // numeric
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value encountered: {0}")]
    NonFiniteValue(String),

    // embed / cst / ssa
    #[error("embedding dimension {0} must be even")]
    OddEmbedDim(usize),
    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },
    #[error("embedding dimension {dim} too small for {scales} scales (need at least {min})")]
    InsufficientDim {
        dim: usize,
        scales: usize,
        min: usize,
    },
    #[error("channel {0} does not belong to any region")]
    ChannelNotInRegion(usize),
    #[error("invalid window size {window} for {segments} segments")]
    InvalidWindow { window: usize, segments: usize },
    #[error("region map has an empty region")]
    EmptyRegion,

    // model
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("mask does not match input: {0}")]
    MaskMismatch(String),
    #[error("task head mismatch: {0}")]
    HeadMismatch(String),

    // train
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    DivergenceDetected { step: usize, loss: f64 },
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("only one class present in labels")]
    SingleClassLabels,
    #[error("empty input: {0}")]
    EmptyInput(String),

    // data_io
    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),
    #[error("format error: {0}")]
    FormatError(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("sample {0:?} appears in more than one split")]
    SplitOverlap(String),
    #[error("missing label for {0:?}")]
    MissingLabel(String),
    #[error("io error: {0}")]
    Io(String),

    // bench
    #[error("timer resolution too coarse: median {median_ns} ns for {variant}")]
    TimerResolutionTooCoarse { variant: String, median_ns: u64 },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::FormatError(e.to_string())
    }
}
