//! Score-only black-box adversarial attacks on small image classifiers.
//!
//! The crate contains everything needed to run the SimBA family of greedy
//! coordinate attacks (SimBA, SimBA+, SimBA++) and LeBA, which keeps a white-box
//! surrogate model in sync with the victim by fitting both its outputs and its
//! input-gradients to query feedback:
//!
//! - [`tensor`]: dense arrays and a reverse-mode autodiff engine that supports
//!   differentiating through gradients.
//! - [`nets`]: MLP / small CNN classifiers, training and weight files.
//! - [`attack`]: attack loss, l2 clipping, transfer steps and the attack loops.
//! - [`hoga`]: the surrogate update from buffered query tuples.
//! - [`oracle`]: the metered score oracle, input defenses and a TCP wire protocol.
//! - [`harness`]: datasets, experiment configs, campaigns and reports.
//!
//! The numeric core is generic over [`tensor::Scalar`]; everything above it is
//! instantiated at `f64` through the aliases below.

pub mod attack;
pub mod error;
pub mod harness;
pub mod hoga;
pub mod nets;
pub mod oracle;
pub mod tensor;

pub use error::{Error, Result};

/// Dense `f64` tensor used across the attack stack.
pub type Tensor = tensor::Tensor<f64>;
/// `f64` autodiff graph.
pub type Graph = tensor::Graph<f64>;
pub use tensor::NodeId;
