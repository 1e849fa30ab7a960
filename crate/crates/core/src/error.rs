use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported glyph {0:?}: not in atlas")]
    UnsupportedGlyph(char),
    #[error("degenerate region: {0}")]
    DegenerateRegion(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("constraint unsatisfiable: {0}")]
    Constraint(String),
    #[error("timestep {t} out of range [{lo}, {hi}]")]
    Timestep { t: i64, lo: i64, hi: i64 },
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("parameter partition error: {0}")]
    Partition(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("prerequisite not met: {0}")]
    Prerequisite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("empty report: no results to aggregate")]
    EmptyReport,
    #[error("archive error: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
