use thiserror::Error;

/// Errors raised by the geometry, simulation and potential-theory layers.
///
/// Decoding failures of the loop surgery have their own type,
/// [`crate::surgery::DecodeError`], so that each failing deduction step is
/// visible to callers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("points belong to different tori")]
    GeometryMismatch,
    #[error("degenerate bulk fraction delta={delta}: floor((1-delta)N) = {side} < 1")]
    DegenerateDelta { delta: f64, side: i64 },
    #[error("trajectory length budget exceeded: requested {requested}, budget {budget}")]
    StepBudget { requested: u64, budget: u64 },
    #[error("walk ran {ran} steps but {needed} are required")]
    InsufficientRun { ran: u64, needed: u64 },
    #[error("vertex never visited at or after time {from}")]
    NeverVisited { from: u64 },
    #[error("empty path segment ({from}, {to}]")]
    EmptySegment { from: usize, to: usize },
    #[error("index {index} out of range for path of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("loop anchor mismatch at index {index}")]
    AnchorMismatch { index: usize },
    #[error("not a nearest-neighbour path: step {index} is not a unit move")]
    NotAPath { index: usize },
    #[error("malformed excursion sets: {0}")]
    MalformedSets(String),
    #[error("Green table radius {radius} exceeded by |x|_inf = {requested}")]
    GreenRadius { radius: usize, requested: i64 },
    #[error("linear system is singular or ill-conditioned (condition estimate {condition:e})")]
    Singular { condition: f64 },
    #[error("set too large for dense solve: {size} > {limit}")]
    SetTooLarge { size: usize, limit: usize },
    #[error("set diameter too large for the torus capacity convention: {0}")]
    DiameterTooLarge(String),
    #[error("empty set")]
    EmptySet,
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("surgery precondition violated: {0}")]
    Precondition(String),
    #[error("loops inserted in the first step intersect: {0}")]
    Disjointness(String),
    #[error("loop construction rejected: {0}")]
    LoopConstruction(String),
    #[error("path length overflow: {0}")]
    LengthOverflow(String),
    #[error("truncation budget exceeded: {0}")]
    Truncation(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("format: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
