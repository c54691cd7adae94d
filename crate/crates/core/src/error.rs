use std::path::PathBuf;

use thiserror::Error;

/// Coarse failure categories, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Data,
    Numeric,
    Io,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => 2,
            Category::Data => 3,
            Category::Numeric => 4,
            Category::Io => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Data => "data",
            Category::Numeric => "numeric",
            Category::Io => "io",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("step {t} out of range 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },

    #[error("noise level {0} outside (0, 1]")]
    LevelOutOfRange(f64),

    #[error("degenerate record: {0}")]
    Degenerate(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("xml: {0}")]
    Xml(#[from] roxmltree::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> Category {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => Category::Usage,
            Error::Shape(_)
            | Error::StepOutOfRange { .. }
            | Error::LevelOutOfRange(_)
            | Error::Degenerate(_)
            | Error::Data(_)
            | Error::Json(_)
            | Error::Xml(_) => Category::Data,
            Error::NonFinite(_) => Category::Numeric,
            Error::Io { .. } | Error::Image(_) => Category::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
