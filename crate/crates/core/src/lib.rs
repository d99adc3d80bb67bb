//! Deterministic simulator for federated training across heterogeneous cloud
//! platforms.
//!
//! The crate is organised bottom-up:
//!
//! * [`params`] – flat parameter vectors, the two small models and their
//!   analytic gradients.
//! * [`datagen`] – synthetic class-conditional data and the fixed, Dirichlet
//!   and throughput-driven partitioners.
//! * [`netsim`] – top-k compression with error feedback, wire accounting,
//!   protocol profiles and link timing.
//! * [`aggregate`] – FedAvg, loss-softmax weighting, gradient aggregation,
//!   asynchronous merging and the Gaussian mechanism.
//! * [`engine`] – synchronous barrier rounds and the event-driven
//!   asynchronous loop.
//! * [`cli`] – experiment files, metrics/summary output and the comparison
//!   table used by the `fedsim` binary.
//!
//! All randomness is drawn from seeded ChaCha generators, so a configuration
//! and its seed fully determine every output.

pub mod aggregate;
pub mod cli;
pub mod datagen;
pub mod engine;
mod error;
pub mod netsim;
pub mod params;
pub mod rng;

pub use error::{Error, Result};
