use thiserror::Error;

/// Errors produced anywhere in the search pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension mismatch at layer {layer}: expected input {expected:?}, got {got:?}")]
    DimensionMismatch {
        layer: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value produced at node {node} ({kind})")]
    NonFinite { node: usize, kind: &'static str },

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("invalid bit-width {0}: must lie in [1, 32]")]
    InvalidBitWidth(u32),

    #[error("invalid quantizer state: {0}")]
    InvalidQuantizer(String),

    #[error("empty calibration stream")]
    EmptyCalibration,

    #[error("invalid search space: {0}")]
    InvalidSearchSpace(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("game has {players} players; exact enumeration supports at most {max}, use the Monte-Carlo estimator instead")]
    TooManyPlayers { players: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid budget: {0}")]
    InvalidBudget(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("IDX format error: {0}")]
    Idx(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 2 configuration, 3 data, 4 numerical, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::InvalidBitWidth(_)
            | Error::InvalidSearchSpace(_)
            | Error::InvalidPolicy(_)
            | Error::InvalidBudget(_)
            | Error::InvalidQuantizer(_)
            | Error::TooManyPlayers { .. } => 2,
            Error::Data(_)
            | Error::Idx(_)
            | Error::Checkpoint(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Shape(_)
            | Error::DimensionMismatch { .. }
            | Error::EmptyCalibration => 3,
            Error::Numerical(_) | Error::NonFinite { .. } => 4,
            Error::BackwardBeforeForward => 1,
        }
    }

    /// Stable short name for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::BackwardBeforeForward => "backward_before_forward",
            Error::InvalidBitWidth(_) => "invalid_bit_width",
            Error::InvalidQuantizer(_) => "invalid_quantizer",
            Error::EmptyCalibration => "empty_calibration",
            Error::InvalidSearchSpace(_) => "invalid_search_space",
            Error::InvalidPolicy(_) => "invalid_policy",
            Error::TooManyPlayers { .. } => "too_many_players",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidBudget(_) => "invalid_budget",
            Error::Data(_) => "data",
            Error::Idx(_) => "idx",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Numerical(_) => "numerical",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
