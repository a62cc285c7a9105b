use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("unknown era label `{0}`")]
    BadLabel(String),
    #[error("unknown split `{0}`")]
    BadSplit(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("unsupported image format")]
    UnsupportedFormat,
    #[error("image is {width}x{height}; at least 32x32 is required")]
    ImageTooSmall { width: usize, height: usize },
    #[error("crop at scale {scale} needs a {side}px window but the image is {width}x{height}")]
    CropTooLarge {
        scale: f64,
        side: usize,
        width: usize,
        height: usize,
    },
    #[error("only {occupied} occupied color bins, cannot form {requested} categories")]
    TooFewBins { occupied: usize, requested: usize },
    #[error("at least two classes are required")]
    TooFewClasses,
    #[error("{available} pixels available, {requested} codes requested")]
    InsufficientPixels { available: usize, requested: usize },
    #[error("{points} points given, at least {required} required")]
    TooFewPoints { points: usize, required: usize },
    #[error("data has zero variance in every dimension")]
    DegenerateData,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("empty descriptor set")]
    EmptySet,
    #[error("log-likelihood decreased at iteration {iteration}: {previous} -> {current}")]
    LikelihoodDecreased {
        iteration: usize,
        previous: f64,
        current: f64,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("negative feature value {value} at row {row}, column {col}")]
    NegativeFeature { row: usize, col: usize, value: f64 },
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("no predictions to vote on")]
    EmptyPredictions,
    #[error("missing model: {0}")]
    MissingModel(String),
    #[error("missing split: {0}")]
    MissingSplit(String),
    #[error("duplicate image id `{0}`")]
    DuplicateId(String),
    #[error("pair needs two distinct eras, got {0} twice")]
    SameEra(String),
    #[error("no rows labelled {a} or {b}")]
    EmptyPair { a: String, b: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bad model file: {0}")]
    Container(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
