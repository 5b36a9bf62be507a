//! Multi-input operator network (MIONet) virtual sensor for the coolant
//! fields of a PWR subchannel, plus the reduced-order oracle that produces
//! its training data.
//!
//! Module map:
//! - [`numerics`]: dense kernels, activations, seeded randomness
//! - [`model`]: network graph, analytic gradients, prediction
//! - [`training`]: loss, Adam, early stopping, cross-validation, evaluation
//! - [`oracle`]: subchannel geometry, correlations, field synthesis, datasets
//! - [`storage`]: binary dataset/checkpoint formats and JSON reports

pub mod domain;
pub mod error;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod storage;
pub mod training;

pub use domain::{BoundingBox, CenterPlaneMesh, FieldSnapshot, InputRanges, InputSample, Quantity};
pub use error::{Error, Result};
