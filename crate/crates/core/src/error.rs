//! Error type shared across the pipeline stages.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed geometry: {0}")]
    MalformedGeometry(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("empty sample: {0}")]
    EmptySample(String),

    #[error("integration became stiff at t={t} (dt={dt}): {diagnostic}")]
    Stiffness { t: f64, dt: f64, diagnostic: String },

    #[error("system not converged: residual {residual:.3e} at t={t} days")]
    NotConverged { residual: f64, t: f64 },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad configuration or invalid inputs, as
    /// opposed to failures that occur while processing valid inputs. The CLI
    /// maps the former to exit code 2 and the latter to exit code 1.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Config(_)
                | Error::Format(_)
                | Error::MalformedGeometry(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
