use std::io;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint file (magic {found:?})")]
    Magic { found: [u8; 4] },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] sketchmotion_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }

    /// Process exit status: 2 numerical failure, 64 usage, 66 missing or
    /// unreadable input, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use sketchmotion_core::Error as C;
        match self {
            Error::Core(C::Diverged { .. } | C::NonFinite { .. } | C::Alignment { .. }) => 2,
            Error::Core(_) | Error::Usage(_) | Error::Parse { .. } => 64,
            Error::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => 66,
            Error::Magic { .. } | Error::Version(_) | Error::Format { .. } => 66,
            Error::Io { .. } => 1,
        }
    }
}
