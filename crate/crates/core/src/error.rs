use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid variable `{name}`: {reason}")]
    InvalidVariable { name: String, reason: String },

    #[error("unknown variable `{0}`")]
    UnknownVariable(String),

    #[error("variable index {0} out of range")]
    VariableIndex(usize),

    #[error("state {state} out of range for variable `{variable}` with {arity} states")]
    StateOutOfRange {
        variable: String,
        state: usize,
        arity: usize,
    },

    #[error("unknown state `{state}` for variable `{variable}`")]
    UnknownState { variable: String, state: String },

    #[error("invalid structure: {0}")]
    InvalidStructure(String),

    #[error("cycle detected in parent graph involving `{0}`")]
    Cycle(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameters for `{variable}` row {row}: {reason}")]
    InvalidParameters {
        variable: String,
        row: usize,
        reason: String,
    },

    #[error("network file: {0}")]
    NetworkFormat(String),

    #[error("dataset line {line}: {reason}")]
    Dataset { line: usize, reason: String },

    #[error("incomplete case: variable `{0}` is unobserved")]
    IncompleteCase(String),

    #[error("evidence has zero probability{}", case_suffix(*.case))]
    ZeroProbability { case: Option<usize> },

    #[error("state space of {0} joint configurations is too large for enumeration")]
    StateSpaceTooLarge(u128),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parameters are not a fixpoint (residual {residual:.3e} >= {tol:.1e})")]
    NotAFixpoint { residual: f64, tol: f64 },

    #[error("dimension {dim} exceeds limit {limit}")]
    DimensionTooLarge { dim: usize, limit: usize },

    #[error("eigenvalue solver did not converge")]
    EigenNonConvergence,

    #[error("spectral analysis: {0}")]
    Spectral(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("arm `{arm}`: {source}")]
    InArm {
        arm: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn case_suffix(case: Option<usize>) -> String {
    match case {
        Some(i) => format!(" (case {i})"),
        None => String::new(),
    }
}

impl Error {
    /// True for failures of the numerics rather than of the input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::ZeroProbability { .. } | Error::EigenNonConvergence | Error::Spectral(_) => true,
            Error::AtIteration { source, .. } | Error::InArm { source, .. } => {
                source.is_numerical()
            }
            _ => false,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn with_case(self, index: usize) -> Self {
        match self {
            Error::ZeroProbability { case: None } => Error::ZeroProbability { case: Some(index) },
            other => other,
        }
    }
}
