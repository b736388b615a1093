use thiserror::Error;

pub type Result<T> = std::result::Result<T, WishError>;

#[derive(Debug, Error)]
pub enum WishError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("malformed mask: {0}")]
    Format(String),

    #[error("line {line}: {message}")]
    Line { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt payload: {0}")]
    Corrupt(String),

    #[error("sample id mismatch: {0}")]
    IdMismatch(String),

    #[error("non-finite {component} loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        component: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("layout infeasible for scene {0} after bounded retries")]
    Layout(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl WishError {
    /// True for errors caused by bad user input (configs, data files, ids)
    /// rather than failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            WishError::Shape(_)
                | WishError::NonFinite(_)
                | WishError::Domain(_)
                | WishError::Empty(_)
                | WishError::Format(_)
                | WishError::Line { .. }
                | WishError::Config(_)
                | WishError::Version { .. }
                | WishError::Corrupt(_)
                | WishError::IdMismatch(_)
                | WishError::Json(_)
        )
    }
}
