//! Expectation propagation for sparse sign-constrained perceptron learning
//! (1-bit compressed sensing) with spike-and-slab weight priors.

pub mod datagen;
pub mod ep;
pub mod finite_temp;
pub mod free_energy;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod oracle;
pub mod special;
pub mod tilted;
