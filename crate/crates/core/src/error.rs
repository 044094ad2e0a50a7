use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not line up.
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A matrix was built with zero rows or columns, or with the wrong
    /// amount of data.
    InvalidShape { rows: usize, cols: usize, len: usize },
    /// NaN or infinity where only finite values are allowed.
    NonFinite { context: String },
    NotSquare { rows: usize, cols: usize },
    NotSymmetric { max_asymmetry: f64 },
    NotOrthonormal { max_deviation: f64 },
    /// Jacobi sweeps exhausted before the off-diagonal mass vanished.
    NoConvergence { sweeps: usize, off_diagonal: f64 },
    InvalidRank { rank: usize, max: usize },
    InvalidArgument(String),
    EmptyCalibration,
    UnknownLayer(String),
    /// A layer was asked to take an adapter twice, or an adapter operation
    /// hit a pristine layer.
    LayerState(String),
    /// Backward was called with a cache from an older parameter state.
    StaleCache,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch { op, left, right } => write!(
                f,
                "{op}: dimension mismatch between {}x{} and {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::InvalidShape { rows, cols, len } => {
                write!(f, "invalid matrix shape {rows}x{cols} with {len} values")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::NotSquare { rows, cols } => write!(f, "matrix is not square ({rows}x{cols})"),
            Error::NotSymmetric { max_asymmetry } => {
                write!(f, "matrix is not symmetric (max asymmetry {max_asymmetry:e})")
            }
            Error::NotOrthonormal { max_deviation } => {
                write!(f, "basis is not orthonormal (max deviation {max_deviation:e})")
            }
            Error::NoConvergence { sweeps, off_diagonal } => write!(
                f,
                "eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off_diagonal:e})"
            ),
            Error::InvalidRank { rank, max } => write!(f, "rank {rank} outside 1..={max}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::EmptyCalibration => write!(f, "no calibration samples were accumulated"),
            Error::UnknownLayer(name) => write!(f, "unknown layer `{name}`"),
            Error::LayerState(msg) => write!(f, "{msg}"),
            Error::StaleCache => write!(f, "forward cache does not match the current parameters"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
