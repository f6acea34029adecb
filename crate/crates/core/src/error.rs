use std::io;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes, channel counts, kernel sizes or flags that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),
    /// A named tensor or leaf that is not present.
    #[error("lookup error: {0}")]
    Lookup(String),
    /// Malformed or truncated file contents.
    #[error("format error: {0}")]
    Format(String),
    /// A weight file written for a different model spec.
    #[error("incompatible weights: {0}")]
    Incompatible(String),
    /// Well-formed input whose values are invalid (e.g. a label out of range).
    #[error("data error: {0}")]
    Data(String),
    /// Training produced a non-finite loss.
    #[error("numeric divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    /// An integer tally did not fit its type.
    #[error("arithmetic overflow: {0}")]
    Overflow(String),
    /// An exported operation produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(format!($($arg)*))
    };
}

macro_rules! ensure_config {
    ($cond:expr, $($arg:tt)*) => {
        let holds: bool = $cond;
        if !holds {
            return Err($crate::error::Error::Config(format!($($arg)*)));
        }
    };
}

pub(crate) use config_err;
pub(crate) use ensure_config;
