use std::fmt;

use serde::Serialize;

/// A single broken invariant found while validating a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Name of the offending layer, when the problem is attributable to one.
    pub layer: Option<String>,
    pub message: String,
}

impl Violation {
    pub fn model(message: impl Into<String>) -> Self {
        Self { layer: None, message: message.into() }
    }

    pub fn layer(layer: impl Into<String>, message: impl Into<String>) -> Self {
        Self { layer: Some(layer.into()), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.layer {
            Some(layer) => write!(f, "layer `{layer}`: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

fn join_violations(violations: &[Violation]) -> String {
    violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt container: {0}")]
    Corruption(String),

    #[error("validation failed: {}", join_violations(.0))]
    Validation(Vec<Violation>),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid pruning plan: {0}")]
    Plan(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// The filter (or matrix) has no nonzero entry, so it has no rank-1 direction.
    #[error("degenerate filter: all weights are zero")]
    DegenerateFilter,

    #[error("power iteration did not converge after {iterations} iterations (last relative change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI error object.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format(_) => "format",
            Error::Corruption(_) => "corruption",
            Error::Validation(_) => "validation",
            Error::Argument(_) => "argument",
            Error::Plan(_) => "plan",
            Error::Numerical(_) | Error::NoConvergence { .. } => "numerical",
            Error::DegenerateFilter => "degenerate_filter",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
