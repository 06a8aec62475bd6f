use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("cell {cell} has non-positive volume at timestep {n}")]
    NonPositiveVolume { cell: usize, n: usize },
    #[error("node {node} has non-positive Jacobian at timestep {n}")]
    NonPositiveJacobian { node: usize, n: usize },
    #[error("Poisson ratio {nu} of {material} must lie in [0, 0.5)")]
    InvalidPoisson { material: &'static str, nu: f64 },
    #[error("particle {particle} at timestep {n} left the guard band")]
    OutOfGuardBand { particle: usize, n: usize },
    #[error("axis {axis} has odd length {len} at pooling scale {scale}")]
    AxisNotEven { axis: usize, len: usize, scale: usize },
    #[error("imaging thresholds must satisfy {0}")]
    ThresholdOrder(String),
    #[error("case has no tumor-core cells")]
    EmptyCore,
    #[error("recurrence mask is empty")]
    EmptyRecurrence,
    #[error("target volume of {target} cells exceeds the {available} admissible cells")]
    UnreachableVolume { target: usize, available: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(PathBuf),
    #[error("unsupported archive schema: {0}")]
    UnsupportedSchema(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("optimization diverged at iteration {iter}")]
    Diverged { iter: usize },
    #[error("non-finite gradient in term {term}")]
    NonFiniteGradient { term: &'static str },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
}

/// Broad failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numeric,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidGrid(_)
            | Error::InvalidPoisson { .. }
            | Error::AxisNotEven { .. }
            | Error::ThresholdOrder(_)
            | Error::Config(_) => ErrorKind::Config,
            Error::Io { .. }
            | Error::Manifest { .. }
            | Error::ChecksumMismatch(_)
            | Error::UnsupportedSchema(_)
            | Error::ShapeMismatch(_) => ErrorKind::Io,
            _ => ErrorKind::Numeric,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
