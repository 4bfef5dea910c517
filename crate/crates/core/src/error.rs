use thiserror::Error;

use crate::quadcost::VariableKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("unknown variable {0:?}")]
    UnknownKey(VariableKey),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// The normal matrix of a strict Gauss-Newton solve lost rank.
    #[error("singular normal matrix: rank {rank} of {dim}")]
    Singular { rank: usize, dim: usize },

    #[error("marginalization error: {0}")]
    Marginalization(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("association error: {0}")]
    Association(String),

    #[error("filter state error: {0}")]
    State(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn layout(msg: impl Into<String>) -> Self {
        Error::Layout(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn model(msg: impl Into<String>) -> Self {
        Error::Model(msg.into())
    }
}
