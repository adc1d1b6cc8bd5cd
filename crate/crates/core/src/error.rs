use thiserror::Error;

/// Errors raised by the library. Messages are stable enough to match on in tests.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("on switching manifold: side required")]
    SideRequired,
    #[error("outside stable sliding region (aL = {a_l}, aR = {a_r})")]
    OutsideSlidingRegion { a_l: f64, a_r: f64 },
    #[error("sliding boundary reached at t = {time}, x = {point:?}")]
    SlidingBoundaryReached { time: f64, point: Vec<f64> },
    #[error("no passage within horizon {horizon}")]
    NoPassage { horizon: f64 },
    #[error("passage not reached within {steps} steps")]
    PassageNotReached { steps: u64 },
    #[error("sliding segment does not reach boundary")]
    NoSlidingRoot,
    #[error("normal-form check failed: {0}")]
    NormalForm(String),
    #[error("tangential passage: formula invalid")]
    TangentialPassage,
    #[error("degenerate covariance: regularize or reject")]
    DegenerateCovariance,
    #[error("non-decaying boundary layer")]
    NonDecayingBoundaryLayer,
    #[error("insufficient samples (n = {0})")]
    InsufficientSamples(usize),
    #[error("not an escape point: {0}")]
    NotEscapePoint(String),
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("root finding failed: {0}")]
    Root(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
