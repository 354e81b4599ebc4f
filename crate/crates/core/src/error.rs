use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Backend,
    Assertion,
    Io,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid label space: {0}")]
    LabelSpace(String),

    #[error("invalid template `{template}`: {reason}")]
    Template { template: String, reason: String },

    #[error("{path}:{line}: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}:{line}: {source}")]
    AtRecord {
        path: PathBuf,
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown label `{label}` (expected one of {expected:?})")]
    UnknownLabel { label: String, expected: Vec<String> },

    #[error("duplicate example id `{0}`")]
    DuplicateId(String),

    #[error("example `{id}` is missing field `{field}`")]
    MissingField { id: String, field: String },

    #[error("{name} = {value} is outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("clean subset would be empty ({size} examples, fraction {fraction})")]
    EmptySubset { size: usize, fraction: f64 },

    #[error("cannot embed empty text")]
    EmptyText,

    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("embedding provider mismatch: index built with `{index}`, queried with `{provider}`")]
    ProviderMismatch { index: String, provider: String },

    #[error("requested {requested} demonstrations but only {available} are retrievable")]
    NotEnoughCandidates { requested: usize, available: usize },

    #[error("index is empty")]
    EmptyIndex,

    #[error("corrupt index file: {0}")]
    IndexFormat(String),

    #[error("training diverged at iteration {iteration} (loss = {loss})")]
    Divergence { iteration: usize, loss: f64 },

    #[error("unknown example id `{0}`")]
    UnknownId(String),

    #[error("confidence estimate for demonstration `{id}` failed: {source}")]
    Estimator {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("rectifier chunk {chunk} failed: {source}")]
    RectifierChunk {
        chunk: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("rectifier output unparseable at {fallbacks} of {total} positions")]
    SystematicParseFailure { fallbacks: usize, total: usize },

    #[error("rectifier output unparseable at position {position} (strict mode): `{completion}`")]
    StrictParse { position: usize, completion: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },

    #[error("HTTP {status} from {endpoint}: {body}")]
    HttpStatus {
        endpoint: String,
        status: u16,
        body: String,
    },

    #[error("protocol mismatch from {endpoint}: {reason}")]
    Protocol { endpoint: String, reason: String },

    #[error(
        "continuation does not start on a token boundary (offset {offset}); \
         format candidates with a leading separator such as a space"
    )]
    TokenAlignment { offset: usize },

    #[error("prompt of {chars} characters exceeds the configured limit of {limit}")]
    PromptTooLong { chars: usize, limit: usize },

    #[error("no recorded interaction for request {hash} in cassette {path}")]
    CassetteMiss { hash: String, path: PathBuf },

    #[error("oracle world has no ground truth for `{0}`")]
    OracleUnknown(String),

    #[error("could not parse prompt: {0}")]
    PromptParse(String),

    #[error("assertion failed: {0}")]
    Assertion(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_)
            | Error::LabelSpace(_)
            | Error::Template { .. }
            | Error::OutOfRange { .. }
            | Error::ProviderMismatch { .. }
            | Error::DimMismatch { .. }
            | Error::NotEnoughCandidates { .. } => ErrorKind::Config,
            Error::Transport { .. }
            | Error::HttpStatus { .. }
            | Error::Protocol { .. }
            | Error::TokenAlignment { .. }
            | Error::PromptTooLong { .. }
            | Error::CassetteMiss { .. }
            | Error::SystematicParseFailure { .. }
            | Error::StrictParse { .. } => ErrorKind::Backend,
            Error::RectifierChunk { source, .. }
            | Error::Estimator { source, .. }
            | Error::AtRecord { source, .. } => source.kind(),
            Error::Assertion(_) => ErrorKind::Assertion,
            Error::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Data,
        }
    }

    /// Transport failures and server-side statuses worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            Error::Transport { .. } => true,
            Error::HttpStatus { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}
