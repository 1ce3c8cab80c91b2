use std::fmt;

/// Crate-wide error type.
///
/// Variants map onto the failure classes of the pipeline: shape and geometry
/// violations, contract breaches (values outside a guaranteed range), broken
/// archives, bad datasets and bad configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes do not conform for an operation; names the offending axes.
    Shape { op: &'static str, detail: String },
    /// Image or network geometry is invalid (patch divisibility, input sizes).
    Geometry(String),
    /// An argument is out of its documented domain.
    Argument(String),
    /// A value violated an operation's contract (e.g. scores outside (0,1)).
    Contract(String),
    /// An embedding row has zero norm and cannot be normalized.
    DegenerateEmbedding { row: usize },
    /// Optimizer/tape state is inconsistent (e.g. trainable tensor without a gradient).
    TrainingState(String),
    /// Hard-negative mining found no candidate with a differing identity.
    Mining(String),
    /// A weight archive is corrupt; `offset` is the file position of the failure.
    Integrity { offset: u64, detail: String },
    /// Archive contents do not match the receiving network.
    Structural(String),
    /// Weight transfer matched nothing between source and target.
    Transfer(String),
    /// Dataset ingestion failed; names the offending file or stem.
    Ingest(String),
    /// Run configuration is invalid.
    Config(String),
    /// File parsing failed (PGM/PPM/CSV).
    Parse(String),
    /// Underlying I/O failure.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::Geometry(msg) => write!(f, "geometry error: {msg}"),
            Error::Argument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::DegenerateEmbedding { row } => {
                write!(f, "degenerate embedding: row {row} has zero norm")
            }
            Error::TrainingState(msg) => write!(f, "training state error: {msg}"),
            Error::Mining(msg) => write!(f, "mining error: {msg}"),
            Error::Integrity { offset, detail } => {
                write!(f, "archive integrity error at byte {offset}: {detail}")
            }
            Error::Structural(msg) => write!(f, "structural mismatch: {msg}"),
            Error::Transfer(msg) => write!(f, "transfer error: {msg}"),
            Error::Ingest(msg) => write!(f, "ingestion error: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Io(msg) => write!(f, "i/o error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
