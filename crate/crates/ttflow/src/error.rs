use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("unfolding position {k} out of range for a {d}-way tensor")]
    UnfoldingOutOfRange { k: usize, d: usize },

    #[error("reference tensor has zero norm")]
    ZeroReference,

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("singular interface matrix at level {level} (condition estimate {cond:.3e})")]
    SingularInterface { level: usize, cond: f64 },

    #[error("DEIM failed at level {level}: {reason}")]
    Deim { level: usize, reason: String },

    #[error("ill-conditioned frame at level {level}: cond {cond:.3e} exceeds {limit:.1e}; refresh the index sets")]
    IllConditioned { level: usize, cond: f64, limit: f64 },

    #[error("non-finite value after {stage} at level {level}")]
    NonFinite { stage: String, level: usize },

    #[error("rank {rank} at level {level} exceeds the cap {cap}")]
    RankExplosion { level: usize, rank: usize, cap: usize },

    #[error("solution blew up: norm {norm:.3e} exceeds {limit:.3e} at t = {t}")]
    BlowUp { t: f64, norm: f64, limit: f64 },

    #[error("dense size {0} exceeds the memory guard")]
    TooLarge(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("format error: {0}")]
    Format(String),
}

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

pub type Result<T> = std::result::Result<T, Error>;
