use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("cannot read image for record `{id}`: {reason}")]
    UnreadableImage { id: String, reason: String },

    #[error("degenerate bounding box for record `{id}` after clamping")]
    DegenerateBox { id: String },

    #[error("zero-norm embedding for record `{0}`")]
    ZeroNorm(String),

    #[error("rows are not l2-normalized (row {row} has norm {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("raster {width}x{height} is too small (minimum {min}x{min})")]
    RasterTooSmall { width: u32, height: u32, min: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {message}")]
    Parse { context: String, message: String },

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation { field: field.into(), reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse { context: context.into(), message: message.to_string() }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage { stage, source: Box::new(other) },
        }
    }
}
