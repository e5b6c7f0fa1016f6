use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite parameter: {0}")]
    NonFinite(String),

    #[error("aliasing: T*max(omega) = {product} must be below pi")]
    Aliasing { product: f64 },

    #[error("window constraint violated: 2n+ell = {lhs} exceeds M-1 = {limit} (M = {m})")]
    Window { lhs: usize, limit: usize, m: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate root at z = 0")]
    DegenerateRoot,

    #[error("missing message from PDC {pdc} at iteration {k}")]
    MissingMessage { pdc: usize, k: usize },

    #[error("duplicate message from PDC {pdc} at iteration {k}")]
    DuplicateMessage { pdc: usize, k: usize },

    #[error("unexpected message from PDC {pdc} at iteration {k}")]
    UnexpectedSender { pdc: usize, k: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("i/o error at {path}: {message}")]
    Io { path: String, message: String },

    #[error("scenario {scenario}: {source}")]
    Scenario {
        scenario: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Stable machine-readable kind tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFinite(_) => "non_finite",
            Error::Aliasing { .. } => "aliasing",
            Error::Window { .. } => "window",
            Error::Dimension(_) => "dimension",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DegenerateRoot => "degenerate_root",
            Error::MissingMessage { .. } => "missing_message",
            Error::DuplicateMessage { .. } => "duplicate_message",
            Error::UnexpectedSender { .. } => "unexpected_sender",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Scenario { source, .. } => source.kind(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
