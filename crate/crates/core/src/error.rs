//! Crate-wide error type and the process exit codes the CLI maps it to.

use thiserror::Error;

/// Unified error for every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration file or parameter failed validation.
    #[error("config: {0}")]
    Config(String),

    /// An input violated a documented precondition (wrong dimension, NaN
    /// state, empty batch, ...).
    #[error("contract: {0}")]
    Contract(String),

    /// A state, window, or model was used in an order the API forbids.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A numeric procedure diverged or produced non-finite values.
    #[error("numeric: {0}")]
    Numeric(String),

    /// A phase was launched without the artifacts it depends on.
    #[error("missing dependency: {0}")]
    MissingDependency(String),

    /// Filesystem or serialization failure while reading/writing artifacts.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Prefixes the message with a closed-loop step index, preserving the
    /// error class, so a mid-episode failure reports where in the episode it
    /// happened. I/O errors pass through untouched (they carry their own
    /// source).
    pub fn at_step(self, t: usize) -> Error {
        match self {
            Error::Config(m) => Error::Config(format!("step {t}: {m}")),
            Error::Contract(m) => Error::Contract(format!("step {t}: {m}")),
            Error::InvalidState(m) => Error::InvalidState(format!("step {t}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("step {t}: {m}")),
            Error::MissingDependency(m) => Error::MissingDependency(format!("step {t}: {m}")),
            Error::Io(e) => Error::Io(e),
        }
    }

    /// Exit code reported by the CLI. Success is 0; each failure class gets a
    /// stable code so scripts can tell a bad config from a diverged solve.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingDependency(_) => 3,
            Error::Contract(_) | Error::InvalidState(_) => 4,
            Error::Numeric(_) => 5,
            Error::Io(_) => 6,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for building a `Contract` error from format arguments.
#[macro_export]
macro_rules! contract_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(format!($($arg)*))
    };
}

/// Returns a `Contract` error unless every coordinate of `xs` is finite.
pub fn ensure_finite(what: &str, xs: &[f64]) -> Result<()> {
    if let Some(i) = xs.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidState(format!(
            "{what}: non-finite value {} at index {i}",
            xs[i]
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_and_nonzero() {
        let errs = [
            Error::Config("x".into()),
            Error::MissingDependency("x".into()),
            Error::Contract("x".into()),
            Error::Numeric("x".into()),
            Error::Io(std::io::Error::other("x")),
        ];
        let mut codes: Vec<i32> = errs.iter().map(|e| e.exit_code()).collect();
        assert!(codes.iter().all(|&c| c != 0));
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), errs.len());
    }

    #[test]
    fn invalid_state_shares_contract_code() {
        assert_eq!(
            Error::InvalidState("x".into()).exit_code(),
            Error::Contract("x".into()).exit_code()
        );
    }

    #[test]
    fn ensure_finite_flags_nan_position() {
        assert!(ensure_finite("v", &[1.0, 2.0]).is_ok());
        let err = ensure_finite("v", &[1.0, f64::NAN]).unwrap_err();
        assert!(err.to_string().contains("index 1"));
    }
}
