//! Domain-decomposed physics-informed networks for incompressible flow.

pub mod autodiff;
pub mod network;
pub mod physics;
pub mod benchmarks;
pub mod decomposition;
pub mod runtime;
pub mod evaluation;
