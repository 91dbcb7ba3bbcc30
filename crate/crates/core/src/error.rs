use thiserror::Error;

/// Errors produced by the decoding library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("alist line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("decoder diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("training diverged at iteration {iteration}")]
    TrainingDiverged { iteration: usize },

    #[error("imaginary residual {imag:e} exceeds tolerance {tol:e}")]
    ImaginaryResidual { imag: f64, tol: f64 },

    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::LengthMismatch { expected, got })
    }
}
