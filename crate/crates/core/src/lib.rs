//! Deterministic federated-learning simulator.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`kernel`]: dense `f64` tensors and layer kernels with
//!   hand-written backward passes.
//! * [`train`]: learning-rate schedule, gradient clipping, SGD.
//! * [`model`]: MLP / TinyCNN / TinyMetaFormer builders and role-tagged
//!   parameter sets.
//! * [`data`] and [`partition`]: datasets, client shards and heterogeneity
//!   diagnostics.
//! * [`fed`]: the round protocol with FedAVG, FedAVGM, FedProx, SCAFFOLD
//!   and FedBN.
//! * [`analysis`]: centralized baseline, weight divergence, accuracy.
//! * [`harness`]: experiment configuration, orchestration and result files.

pub mod analysis;
pub mod data;
pub mod error;
pub mod fed;
pub mod harness;
pub mod kernel;
pub mod model;
pub mod partition;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{FedError, Result};
pub use tensor::Tensor;
