use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] gradirn_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: bad magic {found:?}, expected \"GTF1\"", path.display())]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{}: unknown dtype code {code}", path.display())]
    UnknownDtype { path: PathBuf, code: u8 },
    #[error("{}: nonzero reserved header bytes", path.display())]
    ReservedBytes { path: PathBuf },
    #[error("{}: expected {expected} bytes, found {found}", path.display())]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{}: expected {expected} data, found {found}", path.display())]
    DtypeMismatch {
        path: PathBuf,
        expected: &'static str,
        found: &'static str,
    },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{}: {reason}", path.display())]
    Pgm { path: PathBuf, reason: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("synthesis: {0}")]
    Synth(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    /// Arguments that parse but do not make sense together.
    #[error("usage: {0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Self {
        let path = path.into();
        move |source| Error::Json { path, source }
    }
}
