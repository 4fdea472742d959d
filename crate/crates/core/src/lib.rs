//! Detection and removal of poisoned training samples from per-class
//! representation sets.
//!
//! Each class is modeled as a low-rank linear subspace plus noise. A weight
//! vector over the class's samples is found that maximizes coherence with
//! the residual after projecting out the dominant subspace; poisoned samples
//! receive large weights. A likelihood-ratio test of bimodality on these
//! weights, standardized across classes, flags infected classes, and 1-D
//! k-means on the weights separates the poisoned samples.

pub mod coherence;
pub mod detect;
pub mod error;
pub mod flatten;
pub mod linalg;
pub mod mitigate;
pub mod pipeline;
pub mod repr_store;
pub mod subspace;
pub mod synth;

pub use error::{Error, Result, Warning};
pub use repr_store::{ClassId, LabeledDataset, RepresentationMatrix};
