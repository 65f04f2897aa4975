use std::path::PathBuf;

/// Failures of the file formats, configuration and commands.
///
/// `Display` is a single line suitable for `error: <line>` output.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error("{}: row {row}: {detail}", path.display())]
    Csv {
        path: PathBuf,
        row: usize,
        detail: String,
    },

    #[error("{field}: {reason}")]
    Config { field: String, reason: String },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Core(#[from] cetx_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn format_err(path: impl Into<PathBuf>, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.into(),
        detail: detail.into(),
    }
}

pub fn config_err(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}
