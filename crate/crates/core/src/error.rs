use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
///
/// Variants are grouped by the exit-code class the CLI maps them to:
/// contract violations, I/O, and checkpoint compatibility.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("singular matrix: pivot {pivot} has magnitude {magnitude:e}")]
    Singular { pivot: usize, magnitude: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("outside the Cayley domain: {0}")]
    Domain(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("degenerate neuron {index}: norm {norm:e}")]
    DegenerateNeuron { index: usize, norm: f64 },

    #[error("neurons {first} and {second} coincide after normalization; energy is infinite")]
    InfiniteEnergy { first: usize, second: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("incompatible inputs: {0}")]
    Compatibility(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
