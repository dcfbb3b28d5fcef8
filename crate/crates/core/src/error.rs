use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate phase at bin {bin}, frame {frame}: sin/cos modulus {modulus:.4} < 0.5")]
    DegeneratePhase { bin: usize, frame: usize, modulus: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("{path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Manifest { .. } => 2,
            Error::Dependency(_) => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
