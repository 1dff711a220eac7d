//! Temporal phase segmentation from sparse frame annotations.
//!
//! The crate provides everything needed to train and evaluate a multi-stage
//! dilated temporal convolutional model when only a handful of frames per
//! video carry labels:
//!
//! - [`seq`]: feature/label/annotation containers and probability matrices
//! - [`io`]: on-disk formats for features, labels, annotations, checkpoints
//! - [`model`]: the temporal convolutional network, backprop, and Adam
//! - [`losses`]: focal classification, entropy, confidence, and smoothness
//!   terms with analytic gradients
//! - [`stc`]: alignment losses over ordered phase transcripts, including the
//!   star-augmented variant that tolerates missing phases
//! - [`pseudolabel`]: uncertainty-gated label diffusion and the second-stage
//!   relabeling scheme
//! - [`supervise`]: simulators that degrade dense labels into the sparse
//!   annotation regimes
//! - [`metrics`]: frame-level and relaxed-boundary evaluation
//! - [`synthdata`]: synthetic workflow generator for end-to-end runs

pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pseudolabel;
pub mod seq;
pub mod stc;
pub mod supervise;
pub mod synthdata;

pub use error::{Error, Result};
pub use seq::{
    AnnotationEntry, AnnotationSet, FeatureSequence, Hyperparams, PhaseLabelSequence,
    ProbabilityMatrix, Provenance, normalize_logits,
};
