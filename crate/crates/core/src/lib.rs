//! Deterministic federated-learning simulator core.
//!
//! The crate hosts a BN-bearing neural-network stack, dataset synthesis and
//! non-IID partitioning, backdoor attack trainers, server-side defenses
//! (including the OOD-indicator detection protocol), and the FedAVG round
//! engine. All numeric kernels are generic over [`scalar::Scalar`]; the
//! engine and the shipped experiments pin `f64` through the aliases below.

pub mod attacks;
pub mod data;
pub mod defenses;
pub mod engine;
pub mod error;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod update;

pub mod nn;
pub mod train;

pub use error::{Error, Result};

/// Client identifier within one experiment.
pub type ClientId = u32;

/// Scalar used by the engine, the CLI, and every shipped experiment.
pub type F = f64;

/// Model state at the default scalar.
pub type Model = nn::ModelState<F>;
/// Flat parameter vector at the default scalar.
pub type Flat = nn::FlatVector<F>;
