//! Error types, one enum per subsystem.

use thiserror::Error;

/// Errors from volume handling, file formats, and the synthetic generator.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic: expected \"RVOL0001\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype {dtype:?}: RVOL payloads are little-endian f32 only")]
    UnsupportedDtype { dtype: String },
    #[error("shape mismatch: header declares {expected} voxels, payload holds {found}")]
    PayloadShapeMismatch { expected: usize, found: usize },
    #[error("volume data length {len} does not match shape {shape:?}")]
    DataShapeMismatch { len: usize, shape: [usize; 3] },
    #[error("spacing must be positive, got {spacing:?}")]
    NonPositiveSpacing { spacing: [f64; 3] },
    #[error("mask voxels must be 0 or 1, found {value}")]
    NonBinaryMask { value: f32 },
    #[error("resampling {shape:?} at spacing {spacing:?} to {target} mm yields a degenerate shape")]
    DegenerateResample {
        shape: [usize; 3],
        spacing: [f64; 3],
        target: f64,
    },
    #[error("missing column: {0}")]
    MissingColumn(String),
    #[error("column {column:?} row {row}: unknown category {value:?}")]
    UnknownCategory {
        column: String,
        row: usize,
        value: String,
    },
    #[error("column {column:?} row {row}: {message}")]
    BadCell {
        column: String,
        row: usize,
        message: String,
    },
    #[error("invalid synthetic config: {0}")]
    InvalidSynthConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Errors from the differentiable-computation substrate.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {message}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        message: String,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this tape; build a fresh tape to differentiate again")]
    BackwardAlreadyRun,
    #[error("backward on an empty tape")]
    EmptyTape,
    #[error("forward produced a non-finite value in {op}")]
    NonFinite { op: &'static str },
    #[error("gradient check: {0}")]
    GradCheck(String),
}

/// Errors from model assembly and inference.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("patchify: volume shapes {lhs:?} and {rhs:?} differ")]
    VolumeShapeMismatch { lhs: [usize; 3], rhs: [usize; 3] },
    #[error("patchify: shape {shape:?} not divisible by patch edge {patch}")]
    NotDivisible { shape: [usize; 3], patch: usize },
    #[error("patchify: expected modalities CT and PET, got {0} and {1}")]
    WrongModality(String, String),
    #[error("embed: EHR vector length {got} does not match configured {expected}")]
    EhrLengthMismatch { got: usize, expected: usize },
    #[error("tokens_to_grid: {tokens} token rows cannot fill grid {grid:?}")]
    TokenGridMismatch { tokens: usize, grid: [usize; 3] },
    #[error("decoder stage {stage}: {source}")]
    DecoderStage {
        stage: String,
        #[source]
        source: DiffError,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Errors from survival heads and baselines.
#[derive(Debug, Error)]
pub enum SurvivalError {
    #[error("time bins require at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("bin edges must be nonnegative and strictly increasing, got {0:?}")]
    BadEdges(Vec<f64>),
    #[error("survival scores contain a non-finite value")]
    NonFiniteScores,
    #[error("pmf must sum to 1 within 1e-6, got {0}")]
    BadPmf(f64),
    #[error("expected {expected} bin probabilities, got {got}")]
    PmfLength { expected: usize, got: usize },
    #[error("cox fit needs at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("cox fit needs at least one observed event")]
    NoEvents,
    #[error("feature rows have inconsistent lengths")]
    RaggedFeatures,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Errors from evaluation metrics.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} risks, {1} times, {2} events")]
    LengthMismatch(usize, usize, usize),
    #[error("mask shapes differ: {lhs:?} vs {rhs:?}")]
    MaskShapeMismatch { lhs: [usize; 3], rhs: [usize; 3] },
    #[error("no comparable pairs: every pair is censored or time-tied")]
    NoComparablePairs,
    #[error("metric input contains a non-finite value")]
    NonFinite,
}

/// Errors from training, cross-validation, and checkpoints.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset of {n} subjects cannot be split into {k} folds")]
    TooFewForFolds { n: usize, k: usize },
    #[error("holdout needs at least 5 subjects, got {0}")]
    TooFewForHoldout(usize),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {term} loss at epoch {epoch}, step {step}; aborting")]
    NonFiniteLoss {
        term: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("checkpoint incompatible with config; mismatched parameters: {0}")]
    CheckpointMismatch(String),
    #[error("bad checkpoint file: {0}")]
    BadCheckpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Survival(#[from] SurvivalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}
