//! Error type shared across the core crate.

use alloc::string::String;
use core::fmt;

/// Errors surfaced by core operations.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Tensor shapes are incompatible for the requested operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// A value that must be finite was NaN or infinite.
    NonFinite { op: &'static str, detail: String },
    /// An invalid configuration was supplied (bad bins, missing pose, ...).
    Config { detail: String },
    /// A materialization would exceed the configured element budget.
    Resource { detail: String },
    /// A scene specification is degenerate (zero-volume object, ...).
    Spec { detail: String },
    /// A label or index is out of the valid range.
    Data { detail: String },
    /// A geometric construction failed (e.g. no pixel-column overlap).
    Geometry { detail: String },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            CoreError::NonFinite { op, detail } => write!(f, "non-finite value in {op}: {detail}"),
            CoreError::Config { detail } => write!(f, "configuration error: {detail}"),
            CoreError::Resource { detail } => write!(f, "resource limit exceeded: {detail}"),
            CoreError::Spec { detail } => write!(f, "scene specification error: {detail}"),
            CoreError::Data { detail } => write!(f, "data error: {detail}"),
            CoreError::Geometry { detail } => write!(f, "geometry error: {detail}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
