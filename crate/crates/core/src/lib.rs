//! Dual-stream airway segmentation: a shared encoder learns features that
//! transfer from a clean imaging domain, a second encoder captures features
//! specific to a noisy domain, and their projected outputs are summed before
//! decoding. The clean path is refined with channel attention and trained to
//! regress a signed distance map of the airway.
//!
//! Everything runs on deterministic synthetic airway phantoms, so the crate
//! ships its own phantom generator, exact distance transform, small
//! reverse-mode tensor engine and tree-topology metrics.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod pipeline;
pub mod sdm;
pub mod train;
pub mod volcore;

pub use error::{FdaError, Result};
