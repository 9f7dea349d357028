//! Deterministic single-process federated learning simulator.
//!
//! Local training is the E-step and server aggregation the M-step of hard-EM
//! on a hierarchical prior over client parameters. Gaussian priors give
//! FedAvg/FedProx, Laplace priors the coordinate-wise median, mixtures of
//! Gaussians an ensemble, and spike-and-slab priors FedSparse, which learns
//! structured sparsity and shrinks both directions of communication.

pub mod clients;
pub mod comms;
pub mod data;
pub mod error;
pub mod gates;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod runner;
pub mod scalar;
pub mod server;
pub mod strategy;

pub use error::{FedError, Result};
pub use scalar::Scalar;
pub use strategy::Strategy;

/// Simulation precision; matches the 32-bit float wire format.
pub type Real = f32;
pub type Matrix = nn::DenseMatrix<Real>;
pub type Params = nn::GroupedParams<Real>;
pub type Batch = nn::Batch<Real>;
pub type Optimizer = optim::OptimizerState<Real>;
pub type Gates = gates::GateState<Real>;

/// Shadow precision for gradient checks and oracles.
pub type Params64 = nn::GroupedParams<f64>;
