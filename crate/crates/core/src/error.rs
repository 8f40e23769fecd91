use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("layout mismatch: unexpected path {0}")]
    LayoutMismatch(PathBuf),

    #[error("missing ground-truth mask for defective image {0}")]
    MissingMask(PathBuf),

    #[error("reference bank requires defect-free images, got `{defect}` at {path}")]
    DefectiveReference { path: PathBuf, defect: String },

    #[error("schema error at `{key_path}`: {message}")]
    Schema { key_path: String, message: String },

    #[error("empty phrase list for ({object}, {defect})")]
    EmptyPhrases { object: String, defect: String },

    #[error("resolution mismatch: expected {expected:?}, got {actual:?}")]
    ResolutionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch in {what}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        what: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("no reference candidates within window of cell ({row}, {col})")]
    NoCandidates { row: usize, col: usize },

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("encoder unavailable: {0}")]
    EncoderUnavailable(String),

    #[error("click ({x}, {y}) outside {width}x{height} image")]
    OutOfBounds {
        x: i64,
        y: i64,
        width: usize,
        height: usize,
    },

    #[error("session is not initialized")]
    UninitializedSession,

    #[error("metric needs both classes present")]
    SingleClass,

    #[error("metric needs at least one positive")]
    NoPositives,

    #[error("ground truth has no anomalous region")]
    NoRegion,

    #[error("no traces to aggregate")]
    EmptyTraces,

    #[error("unknown prompt key {0}")]
    UnknownPrompt(String),

    #[error("unknown image {0}")]
    UnknownImage(String),

    #[error("unknown session {0}")]
    UnknownSession(String),

    #[error("session {0} is exported and immutable")]
    SessionExported(String),

    #[error("refusing to export a session without clicks")]
    ZeroClicks,

    #[error("model not loaded")]
    ModelNotLoaded,

    #[error("clicks are not accepted in segmentation mode")]
    ClicksInSegMode,

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::LayoutMismatch(_) => "layout_mismatch",
            Error::MissingMask(_) => "missing_mask",
            Error::DefectiveReference { .. } => "defective_reference",
            Error::Schema { .. } => "schema",
            Error::EmptyPhrases { .. } => "empty_phrases",
            Error::ResolutionMismatch { .. } => "resolution_mismatch",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NoCandidates { .. } => "no_candidates",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::EncoderUnavailable(_) => "encoder_unavailable",
            Error::OutOfBounds { .. } => "out_of_bounds",
            Error::UninitializedSession => "uninitialized_session",
            Error::SingleClass => "single_class",
            Error::NoPositives => "no_positives",
            Error::NoRegion => "no_region",
            Error::EmptyTraces => "empty_traces",
            Error::UnknownPrompt(_) => "unknown_prompt",
            Error::UnknownImage(_) => "unknown_image",
            Error::UnknownSession(_) => "unknown_session",
            Error::SessionExported(_) => "session_exported",
            Error::ZeroClicks => "zero_clicks",
            Error::ModelNotLoaded => "model_not_loaded",
            Error::ClicksInSegMode => "clicks_in_seg_mode",
            Error::Divergence { .. } => "divergence",
            Error::CheckpointMismatch(_) => "checkpoint_mismatch",
            Error::Format(_) => "format",
            Error::Candle(_) => "tensor",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }
}
