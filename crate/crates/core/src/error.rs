use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("frequency {freq_hz} Hz outside [0, {nyquist_hz}] Hz")]
    OutOfBand { freq_hz: f64, nyquist_hz: f64 },
    #[error("signal too short: {len} samples, need at least {needed}")]
    TooShort { len: usize, needed: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("poisoned graph: {0}")]
    Poisoned(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown source kind `{0}`")]
    UnknownKind(String),
    #[error("degenerate scene: {0}")]
    DegenerateScene(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("empty input: {0}")]
    Empty(String),
}

/// `format!` into an owned `String` without pulling in std.
macro_rules! msg {
    ($($arg:tt)*) => { alloc::format!($($arg)*) };
}
pub(crate) use msg;
