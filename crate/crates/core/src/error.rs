use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    Shape(String),
    /// An operation produced or received a NaN or infinite value.
    NonFinite(&'static str),
    /// `log` of a non-positive value.
    LogDomain,
    /// `backward` called with a non-scalar loss.
    NonScalarLoss(usize),
    /// `backward` called twice on the same tape.
    TapeConsumed,
    /// A camera or grid failed validation.
    InvalidCamera(String),
    InvalidGrid(String),
    /// Projection of a point lying in the camera's principal plane.
    ProjectionAtInfinity,
    /// Point-line distance against a degenerate line.
    DegenerateLine,
    /// Query cell is behind the camera.
    InvisibleCell { i: usize, j: usize },
    InvalidConfig(String),
    /// Rejection sampling could not place a box.
    Placement { index: usize, tries: usize },
    /// Training loss became non-finite.
    Diverged { step: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::NonFinite(op) => write!(f, "non-finite value in {op}"),
            Error::LogDomain => f.write_str("log of a non-positive value"),
            Error::NonScalarLoss(n) => write!(f, "backward needs a scalar loss, got {n} elements"),
            Error::TapeConsumed => f.write_str("tape already consumed by a previous backward"),
            Error::InvalidCamera(msg) => write!(f, "invalid camera: {msg}"),
            Error::InvalidGrid(msg) => write!(f, "invalid grid: {msg}"),
            Error::ProjectionAtInfinity => f.write_str("point projects to infinity (|depth| < 1e-9)"),
            Error::DegenerateLine => f.write_str("degenerate epipolar line"),
            Error::InvisibleCell { i, j } => write!(f, "cell ({i}, {j}) is not visible"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Placement { index, tries } => {
                write!(f, "could not place box {index} after {tries} tries")
            }
            Error::Diverged { step } => write!(f, "training diverged at step {step} (non-finite loss)"),
        }
    }
}

impl core::error::Error for Error {}
