use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model, estimator or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value appeared while integrating.
    #[error("integration blew up at t = {t}")]
    Blowup { t: f64 },

    /// The adaptive controller shrank the step below the underflow limit.
    #[error("step size underflow at t = {t} (dt = {dt:e})")]
    Stiff { t: f64, dt: f64 },

    /// Advective CFL limit violated; `advisory_dt` would satisfy it.
    #[error("CFL violation at t = {t}: dt = {dt:e}, advisory dt = {advisory_dt:e}")]
    Cfl { t: f64, dt: f64, advisory_dt: f64 },

    /// Too many consecutive deferred parameter updates.
    #[error("estimator gave up after {skips} consecutive degenerate updates at t = {t}: {dump}")]
    PermanentDegeneracy { skips: usize, t: f64, dump: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Blowup { .. } | Error::Stiff { .. } | Error::Cfl { .. } => 3,
            Error::PermanentDegeneracy { .. } => 4,
            Error::Io { .. } => 1,
        }
    }
}
