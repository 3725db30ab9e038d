//! Desk-scale laboratory for semi-supervised domain adaptation.
//!
//! The training objective combines four ingredients over a weakly and a
//! strongly augmented view of each unlabeled target sample:
//!
//! * supervised cross-entropy on source and labeled-target samples,
//! * an inter-domain alignment loss that transports target features onto
//!   source class prototypes through an entropic optimal-transport coupling
//!   solved on the weak view and applied to the strong view,
//! * an intra-domain class-wise contrastive clustering loss built from the
//!   cross-correlation of the two views' batch predictions,
//! * a confidence-thresholded pseudo-label consistency loss.
//!
//! Everything runs on a small reverse-mode autodiff core over dense `f64`
//! tensors, so every gradient in the system can be (and is) checked against
//! central finite differences.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod losses;
pub mod model;
pub mod ot;
pub mod prototypes;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use tensor::Tensor;

use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// configuration problems exit 2, runtime/divergence problems exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate feature: row {row} has norm {norm:.3e} below floor {floor:.1e}")]
    DegenerateFeature { row: usize, norm: f64, floor: f64 },

    #[error("class {class} has no samples")]
    MissingClass { class: usize },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("config error: {0}")]
    Config(String),

    #[error("shot split error: {0}")]
    SplitError(String),

    #[error("non-finite value in {context} at iteration {iteration}")]
    NonFinite { context: String, iteration: usize },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}:{line}: {detail}")]
    ParseError {
        path: String,
        line: usize,
        detail: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the CLI contract: 2 for configuration/usage errors,
    /// 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidParameter(_)
            | Error::ParseError { .. }
            | Error::SplitError(_)
            | Error::Io { .. } => 2,
            _ => 3,
        }
    }
}
