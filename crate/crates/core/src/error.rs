use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("singular schedule at t={t}: {reason}")]
    SingularSchedule { t: usize, reason: &'static str },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("division by zero at t={t}: alpha_bar is 1")]
    DivisionByZero { t: usize },

    #[error("unknown conditioning label `{0}`")]
    UnknownConditioning(String),

    #[error("backend error{}: {reason}", context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    Backend {
        context: Option<String>,
        reason: String,
    },

    #[error("backend timed out: {0}")]
    BackendTimeout(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unsupported backend: {0}")]
    UnsupportedBackend(String),

    #[error("schema error: missing or malformed field `{0}`")]
    Schema(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("composition error: {0}")]
    Composition(String),

    #[error("missing mask: {0}")]
    MissingMask(String),

    #[error("missing attention features: {0}")]
    MissingFeature(String),

    #[error("empty plan: no edit groups to allocate")]
    EmptyPlan,

    #[error("empty region: mask selects no pixels")]
    EmptyRegion,

    #[error("internal consistency violated: {0}")]
    InternalConsistency(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn backend(reason: impl Into<String>) -> Self {
        Error::Backend {
            context: None,
            reason: reason.into(),
        }
    }

    /// Attaches a location (step, branch) to backend failures; other errors pass through.
    pub fn with_context(self, ctx: impl Into<String>) -> Self {
        match self {
            Error::Backend { context, reason } => Error::Backend {
                context: Some(match context {
                    Some(inner) => format!("{}, {}", ctx.into(), inner),
                    None => ctx.into(),
                }),
                reason,
            },
            other => other,
        }
    }

    /// True for failures caused by the noise-prediction backend rather than by inputs.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::Backend { .. }
                | Error::BackendTimeout(_)
                | Error::Protocol(_)
                | Error::UnsupportedBackend(_)
        )
    }
}
