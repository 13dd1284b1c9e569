use std::io;

use thiserror::Error;

pub type Result<T, E = StegoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum StegoError {
    /// Operand shapes do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Invalid hyperparameters or geometry.
    #[error("configuration error: {0}")]
    Config(String),
    /// Message length does not fit the configured layout.
    #[error("layout error: {0}")]
    Layout(String),
    /// Malformed payload (out-of-range element, bad bit value).
    #[error("data error: {0}")]
    Data(String),
    /// NaN or infinity encountered in checked mode.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Optimizer or parameter store in an unusable state.
    #[error("state error: {0}")]
    State(String),
    /// Corrupt or unsupported file contents.
    #[error("format error: {0}")]
    Format(String),
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl StegoError {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            StegoError::Config(_) | StegoError::Layout(_) => 3,
            _ => 1,
        }
    }
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::StegoError::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
