use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss node must be scalar, got dims {dims:?}")]
    NonScalarLoss { dims: Vec<usize> },

    #[error("target index {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("image side {resolution} is not divisible by latent side {latent}")]
    NotDivisible { resolution: usize, latent: usize },

    #[error("codebook is empty")]
    EmptyCodebook,

    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("need at least {needed} distinct samples, found {distinct}")]
    TooFewSamples { distinct: usize, needed: usize },

    #[error("need at least {need} images per set, got {got}")]
    TooFewImages { got: usize, need: usize },

    #[error("scale {scale} out of range (schedule has {scales} scales)")]
    ScaleOutOfRange { scale: usize, scales: usize },

    #[error("invalid scale schedule: {0}")]
    Schedule(String),

    #[error("unknown word {0:?}")]
    UnknownWord(String),

    #[error("caption is empty")]
    EmptyCaption,

    #[error("caption has {len} words, maximum is {max}")]
    CaptionTooLong { len: usize, max: usize },

    #[error("coordinate ({i}, {j}) outside {h}x{w} grid")]
    CoordinateOutOfGrid {
        i: usize,
        j: usize,
        h: usize,
        w: usize,
    },

    #[error("no supervised positions")]
    EmptySupervision,

    #[error("attention row has no valid keys")]
    AllMasked,

    #[error("invalid sampler setting: {0}")]
    Sampler(String),

    #[error("mask head has not been trained")]
    UntrainedMaskHead,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing parameter {0:?}")]
    MissingParam(String),

    #[error("checkpoint magic mismatch")]
    BadMagic,

    #[error("checkpoint version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint truncated")]
    Truncated,

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("non-finite loss at stage {stage} step {step}")]
    NanLoss { stage: usize, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
