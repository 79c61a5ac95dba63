//! Error type shared by all core modules.

use alloc::string::String;
use core::fmt;

/// Errors produced by the core engine and the models built on it.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Tensor or graph shape mismatch; `node` names the offending graph node
    /// or operation.
    Shape { node: String, detail: String },
    /// A computed value contained NaN or infinity.
    NonFinite { node: String },
    /// A named input, parameter, or segment was not found.
    Missing { kind: &'static str, name: String },
    /// Invalid argument or state outside the shape system.
    Invalid { detail: String },
    /// Malformed serialized data.
    Decode { detail: String },
}

impl CoreError {
    pub fn invalid(detail: impl Into<String>) -> Self {
        CoreError::Invalid {
            detail: detail.into(),
        }
    }

    pub fn decode(detail: impl Into<String>) -> Self {
        CoreError::Decode {
            detail: detail.into(),
        }
    }
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape { node, detail } => {
                write!(f, "shape mismatch at node {node}: {detail}")
            }
            CoreError::NonFinite { node } => {
                write!(f, "non-finite value produced at node {node}")
            }
            CoreError::Missing { kind, name } => write!(f, "unknown {kind}: {name}"),
            CoreError::Invalid { detail } => write!(f, "invalid argument: {detail}"),
            CoreError::Decode { detail } => write!(f, "decode error: {detail}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
