use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the toolkit.
///
/// Every variant maps to a stable machine-readable code (see [`Error::code`])
/// and to a CLI exit class (see [`Error::exit_code`]).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    // data / ingestion
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("empty file")]
    EmptyFile,
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("bad specification: {0}")]
    BadSpec(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("too few rows: {0}")]
    TooFewRows(String),
    #[error("instrument is not binary: {0}")]
    NonBinaryInstrument(String),

    // numerical degeneracy
    #[error("rank-deficient design: {0}")]
    RankDeficient(String),
    #[error("irrelevant instrument: {0}")]
    IrrelevantInstrument(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("degenerate instrument: {0}")]
    DegenerateInstrument(String),
    #[error("no null value accepted on the grid (minimal-p point {min_p_point}, p = {min_p})")]
    EmptyInterval { min_p_point: f64, min_p: f64 },
    #[error("conditional matrix is not stochastic: {0}")]
    NonStochastic(String),
    #[error("functional has no solvable moment: {0}")]
    NotSolvable(String),
    #[error("singular jacobian: {0}")]
    SingularJacobian(String),
    #[error("moment is not proportional to the functional's representer: {0}")]
    NotProportional(String),
    #[error("degenerate functional: {0}")]
    DegenerateFunctional(String),
    #[error("column-space condition fails: {0}")]
    ColumnSpaceFailure(String),
    #[error("quadrature too coarse: {0}")]
    QuadratureTooCoarse(String),
    #[error("density near zero: {0}")]
    DensityNearZero(String),
    #[error("invalid step: {0}")]
    InvalidStep(String),
    #[error("perturbation path infeasible: {0}")]
    PathInfeasible(String),
    #[error("singular score matrix: {0}")]
    SingularScoreMatrix(String),

    // io
    #[error("io error: {0}")]
    Io(String),
    #[error("json error: {0}")]
    Json(String),
}

impl Error {
    /// Stable identifier used in machine-readable error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MissingColumn(_) => "MissingColumn",
            Error::Parse { .. } => "ParseError",
            Error::EmptyFile => "EmptyFile",
            Error::InvalidDataset(_) => "InvalidDataset",
            Error::BadSpec(_) => "BadSpec",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::IndexOutOfRange(_) => "IndexOutOfRange",
            Error::NonFinite(_) => "NonFinite",
            Error::TooFewRows(_) => "TooFewRows",
            Error::NonBinaryInstrument(_) => "NonBinaryInstrument",
            Error::RankDeficient(_) => "RankDeficient",
            Error::IrrelevantInstrument(_) => "IrrelevantInstrument",
            Error::DegenerateVariance(_) => "DegenerateVariance",
            Error::DegenerateInstrument(_) => "DegenerateInstrument",
            Error::EmptyInterval { .. } => "EmptyInterval",
            Error::NonStochastic(_) => "NonStochastic",
            Error::NotSolvable(_) => "NotSolvable",
            Error::SingularJacobian(_) => "SingularJacobian",
            Error::NotProportional(_) => "NotProportional",
            Error::DegenerateFunctional(_) => "DegenerateFunctional",
            Error::ColumnSpaceFailure(_) => "ColumnSpaceFailure",
            Error::QuadratureTooCoarse(_) => "QuadratureTooCoarse",
            Error::DensityNearZero(_) => "DensityNearZero",
            Error::InvalidStep(_) => "InvalidStep",
            Error::PathInfeasible(_) => "PathInfeasible",
            Error::SingularScoreMatrix(_) => "SingularScoreMatrix",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
        }
    }

    /// True for errors signalling a numerically degenerate problem
    /// (no identification, singular systems) rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient(_)
                | Error::IrrelevantInstrument(_)
                | Error::DegenerateVariance(_)
                | Error::DegenerateInstrument(_)
                | Error::EmptyInterval { .. }
                | Error::NonStochastic(_)
                | Error::NotSolvable(_)
                | Error::SingularJacobian(_)
                | Error::NotProportional(_)
                | Error::DegenerateFunctional(_)
                | Error::ColumnSpaceFailure(_)
                | Error::QuadratureTooCoarse(_)
                | Error::DensityNearZero(_)
                | Error::PathInfeasible(_)
                | Error::SingularScoreMatrix(_)
        )
    }

    /// CLI exit code: 2 for data errors, 3 for numerical degeneracy.
    pub fn exit_code(&self) -> i32 {
        if self.is_numerical() {
            3
        } else {
            2
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
