use std::fmt;
use std::path::PathBuf;

/// Which labeled field of a structured response was absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Summary,
    Name,
    Score,
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Field::Summary => "summary",
            Field::Name => "name",
            Field::Score => "score",
        })
    }
}

#[derive(Debug)]
pub enum Error {
    Io { path: PathBuf, source: std::io::Error },
    Json(serde_json::Error),
    Config(String),

    // corpus
    MalformedRecord { line: usize, reason: String },
    DanglingFunction { apk_id: String },
    DuplicateKey(String),

    // prompt
    CodeTooLong { estimate: usize, budget: usize },
    MissingField(Field),
    NoNumericScore,
    NothingFits { smallest_block: usize, budget: usize },

    // backend
    Transport(String),
    Protocol(String),
    BudgetExceeded { needed: usize, context: usize },

    // metrics
    EmptyVector,
    LengthMismatch { left: usize, right: usize },
    UnsupportedSupport { index: usize },
    CoverageMismatch(String),
    AccuracyGate { actual: f64, gate: f64 },
    DegenerateData(String),
    ZeroConfidence { apk_id: String },
    MissingReference { apk_id: String },

    // report
    EmptyList,
    UnknownFormat(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable tag, used in error JSONL entries.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Config(_) => "config",
            Error::MalformedRecord { .. } => "malformed_record",
            Error::DanglingFunction { .. } => "dangling_function",
            Error::DuplicateKey(_) => "duplicate_key",
            Error::CodeTooLong { .. } => "code_too_long",
            Error::MissingField(_) => "missing_field",
            Error::NoNumericScore => "no_numeric_score",
            Error::NothingFits { .. } => "nothing_fits",
            Error::Transport(_) => "transport",
            Error::Protocol(_) => "protocol",
            Error::BudgetExceeded { .. } => "budget_exceeded",
            Error::EmptyVector => "empty_vector",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::UnsupportedSupport { .. } => "unsupported_support",
            Error::CoverageMismatch(_) => "coverage_mismatch",
            Error::AccuracyGate { .. } => "accuracy_gate",
            Error::DegenerateData(_) => "degenerate_data",
            Error::ZeroConfidence { .. } => "zero_confidence",
            Error::MissingReference { .. } => "missing_reference",
            Error::EmptyList => "empty_list",
            Error::UnknownFormat(_) => "unknown_format",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "{}: {}", path.display(), source),
            Error::Json(e) => write!(f, "json: {e}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::MalformedRecord { line, reason } => {
                write!(f, "malformed record at line {line}: {reason}")
            }
            Error::DanglingFunction { apk_id } => {
                write!(f, "function references unknown apk_id {apk_id:?}")
            }
            Error::DuplicateKey(key) => write!(f, "duplicate key {key}"),
            Error::CodeTooLong { estimate, budget } => {
                write!(f, "prompt needs ~{estimate} tokens, budget is {budget}")
            }
            Error::MissingField(which) => write!(f, "response is missing the {which} field"),
            Error::NoNumericScore => f.write_str("no numeric score after the score label"),
            Error::NothingFits { smallest_block, budget } => write!(
                f,
                "top-ranked block needs {smallest_block} tokens, budget is {budget}"
            ),
            Error::Transport(msg) => write!(f, "transport error: {msg}"),
            Error::Protocol(msg) => write!(f, "protocol error: {msg}"),
            Error::BudgetExceeded { needed, context } => write!(
                f,
                "prompt plus response needs {needed} tokens, context is {context}"
            ),
            Error::EmptyVector => f.write_str("empty score vector"),
            Error::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            Error::UnsupportedSupport { index } => {
                write!(f, "q is zero where p is positive (index {index})")
            }
            Error::CoverageMismatch(msg) => write!(f, "coverage mismatch: {msg}"),
            Error::AccuracyGate { actual, gate } => write!(
                f,
                "classifier held-out accuracy {actual:.4} is below the gate {gate:.4}"
            ),
            Error::DegenerateData(msg) => write!(f, "degenerate training data: {msg}"),
            Error::ZeroConfidence { apk_id } => {
                write!(f, "zero confidence for the predicted class of {apk_id}")
            }
            Error::MissingReference { apk_id } => {
                write!(f, "no reference description for {apk_id}")
            }
            Error::EmptyList => f.write_str("cannot aggregate an empty list"),
            Error::UnknownFormat(fmt) => write!(f, "unknown report format {fmt:?}"),
        }
    }
}

/// The wrapped cause is already part of `Display`.
impl std::error::Error for Error {}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
