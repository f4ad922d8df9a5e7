use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt payload: expected {expected} bytes, found {actual}")]
    Corruption { expected: u64, actual: u64 },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("fit error: class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("{which} covariance is not positive definite after shrinkage {shrinkage}; try a larger shrinkage")]
    Singular { which: &'static str, shrinkage: f64 },

    #[error("class index {index} out of range for {num_classes} classes")]
    ClassIndex { index: usize, num_classes: usize },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
