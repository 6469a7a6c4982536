use thiserror::Error;

#[derive(Debug, Error)]
pub enum CpceError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CpceError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CpceError::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CpceError::Config(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CpceError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable process exit code per error class, used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            CpceError::Config(_) => 2,
            CpceError::Io { .. } => 3,
            CpceError::Shape(_) => 4,
            CpceError::Format { .. } => 5,
            CpceError::Numerical(_) => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, CpceError>;
