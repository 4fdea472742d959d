use std::fmt;

use serde::{Deserialize, Serialize};

use crate::repr_store::ClassId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("non-finite entry at row {row}, column {col}")]
    NonFiniteEntry { row: usize, col: usize },

    #[error("sample {row} coincides with the clean reference mean")]
    DegenerateSample { row: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("total variance is zero")]
    ZeroVariance,

    #[error("residual objective is degenerate (lambda* = {lambda:e})")]
    DegenerateObjective { lambda: f64 },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("need at least 3 classes, got {got}")]
    TooFewClasses { got: usize },

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("all entries are identical")]
    DegenerateInput,

    #[error("neighborhood graph is disconnected")]
    Disconnected,

    #[error("distance profile has zero norm")]
    DegenerateDistances,

    #[error("infeasible generator config: {0}")]
    InfeasibleConfig(String),

    #[error("class {class_id}: {source}")]
    InClass {
        class_id: ClassId,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_class(self, class_id: &ClassId) -> Error {
        Error::InClass {
            class_id: class_id.clone(),
            source: Box::new(self),
        }
    }

    /// Innermost error, with class context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::InClass { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Non-fatal conditions attached to per-class records and run reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warning {
    /// All J statistics are equal, so the anomaly index is identically zero.
    DegenerateSpread,
    /// Every EM restart collapsed onto one component; J was set to 0.
    CollapsedMixture,
    /// The leading eigenvalue of the residual Gram matrix is (near) repeated.
    DegenerateTopSpace,
    /// The class lies entirely inside its latent subspace.
    DegenerateObjective,
    /// Total variance of the class is zero.
    ZeroVariance,
    /// Too few samples to optimize or fit the class.
    TooFewSamples,
    /// The eigensolver did not converge for this class.
    NumericalFailure,
    /// The class has no J statistic and was left out of the cross-class step.
    ExcludedFromDetection,
    /// The two k-means clusters had equal size.
    TieBroken,
    /// The poisoned cluster is a single sample.
    SuspiciousSingleton,
    /// Selected component count was clamped to m - 1.
    ComponentsClamped,
    /// Weights were spread evenly; k-means could not split the class.
    UnsplittableWeights,
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        f.write_str(&s)
    }
}
