use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error in field `{field}`: {reason}")]
    Format { field: String, reason: String },

    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("incomplete landmarks, missing: {}", .0.join(", "))]
    IncompleteLandmarks(Vec<String>),

    #[error("rank-deficient landmark configuration: {0}")]
    RankDeficient(String),

    #[error("landmark pairing error: {0}")]
    Pairing(String),

    #[error("transform error: {0}")]
    Transform(String),

    #[error("undefined distance: {0}")]
    UndefinedDistance(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("{stage} failed for atlas `{atlas}`: {source}")]
    Stage {
        stage: &'static str,
        atlas: String,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str, atlas: impl Into<String>) -> Self {
        Error::Stage {
            stage,
            atlas: atlas.into(),
            source: Box::new(self),
        }
    }
}
