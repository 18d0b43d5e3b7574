//! Hierarchical ensemble segmentation of lung-like slices.
//!
//! A lung network and a class network run as one differentiable cascade
//! ([`model::HUNetCompound`]), trained with weighted Dice and cross-entropy
//! ([`losses`]). Independently seeded members are averaged before argmax
//! ([`ensemble`]), their disagreement yields per-pixel entropy, and
//! [`severity`] turns label maps into infection extent and gravity ratios.

pub mod cli;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod severity;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
