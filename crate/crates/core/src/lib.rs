//! Pose-invariant facial cloaking against embedding-based retrieval.
//!
//! The pipeline: a synthetic face [`world`] renders identities with exact UV
//! maps; [`fr`] trains small differentiable embedders; [`ppt`] learns a
//! bounded per-user protection texture in UV space and applies it through
//! differentiable grid sampling; [`retrieval`] measures what a feature-search
//! intruder can still find; [`robustness`] models an adaptive intruder who
//! filters images before embedding.

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod fr;
pub mod grid;
pub mod ppt;
pub mod retrieval;
pub mod robustness;
pub mod world;

pub use error::{CoreError, Result};
