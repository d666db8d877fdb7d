use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("malformed annotations: {0}")]
    Annotations(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate size: {width}x{height}")]
    DegenerateSize { width: u32, height: u32 },

    #[error("no editable object for record {0}")]
    NoEditableObject(String),

    #[error("records without annotations: {}", .0.join(", "))]
    MissingAnnotations(Vec<String>),

    #[error("single-class input: {0}")]
    SingleClass(String),

    #[error("no target distribution: {0}")]
    NoTargetDistribution(String),

    #[error("corrupt file {id}: {reason}")]
    CorruptFile { id: String, reason: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("backend failure on crop {crop_index}: {reason}")]
    Backend { crop_index: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` requires artifacts from `{requires}`; run it first")]
    MissingStage { stage: String, requires: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
