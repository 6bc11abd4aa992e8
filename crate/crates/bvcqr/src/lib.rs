//! Bayesian growth-trajectory regression for chemical-mixture panels.
//!
//! The pipeline: read an exposure panel ([`panel`]), reduce it to quartile
//! indices ([`preprocess`]), assemble the sparse longitudinal design
//! ([`design`]), evaluate the hierarchical joint density and its gradient
//! ([`model`]), draw from the posterior with a no-U-turn Hamiltonian Monte
//! Carlo sampler ([`sampler`]), and summarize chemical effects
//! ([`posterior`]). [`simulate`] generates benchmark panels with known
//! ground truth; [`report`] persists draws and summaries.

pub mod design;
pub mod error;
pub mod math;
pub mod model;
pub mod panel;
pub mod posterior;
pub mod preprocess;
pub mod report;
pub mod sampler;
pub mod simulate;

pub use error::{Error, Result};
