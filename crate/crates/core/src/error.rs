use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A box used as an anchor or regression target has zero width or height.
    DegenerateAnchor,
    /// A box violates `x1 <= x2`, `y1 <= y2` or has a non-finite coordinate.
    InvalidBox,
    NonFiniteDelta,
    UnknownClass(String),
    AliasConflict(String),
    InvalidView(String),
    EmptyAnchors,
    InvalidThresholds { pos: f64, neg: f64 },
    UnknownStrategy(String),
    ShapeMismatch { expected: usize, found: usize },
    InvalidConfig(String),
    DegenerateScenario(String),
    Diverged { step: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DegenerateAnchor => write!(f, "degenerate anchor"),
            Error::InvalidBox => write!(f, "invalid box"),
            Error::NonFiniteDelta => write!(f, "non-finite box delta"),
            Error::UnknownClass(name) => write!(f, "unknown class `{name}`"),
            Error::AliasConflict(msg) => write!(f, "conflicting alias table: {msg}"),
            Error::InvalidView(msg) => write!(f, "invalid dataset view: {msg}"),
            Error::EmptyAnchors => write!(f, "empty anchor list"),
            Error::InvalidThresholds { pos, neg } => {
                write!(f, "negative threshold {neg} exceeds positive threshold {pos}")
            }
            Error::UnknownStrategy(tag) => write!(f, "unknown strategy `{tag}`"),
            Error::ShapeMismatch { expected, found } => {
                write!(f, "shape mismatch: expected {expected} entries, found {found}")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::DegenerateScenario(msg) => write!(f, "degenerate scenario: {msg}"),
            Error::Diverged { step } => write!(f, "training diverged at step {step}"),
        }
    }
}

impl core::error::Error for Error {}
