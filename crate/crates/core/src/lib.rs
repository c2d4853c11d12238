//! Secure cooperative gradient coding: deterministic simulation and analysis.
//!
//! The crate builds the two coding objects at the heart of the scheme: a
//! cyclic gradient-code pair `(G, C)` with `C * G = 1` and a secret-key
//! generator matrix `A` with zero column sums and rank `K - 1`, and then
//! simulates federated training rounds over unreliable Bernoulli links:
//! clients mask their updates with correlated Gaussian keys, share them with
//! neighbors, relay partial sums, and the server either recovers the global
//! update exactly (the keys cancel in the combinator sum) or skips the round.
//!
//! On top of the simulator sit the analysis tools: mutual-information and
//! differential-privacy accountants for every protocol layer, exact and
//! Monte Carlo outage probabilities, and the accumulation/convergence bounds
//! with their polylogarithm evaluation.

pub mod config;
pub mod convergence;
pub mod gradient_code;
pub mod linalg;
pub mod network;
pub mod privacy;
pub mod protocol;
pub mod reliability;
pub mod rng;
pub mod secret_keys;
pub mod trainer;

pub use gradient_code::{build_code, GcCode};
pub use network::{sample_links, LinkRealization, NetworkModel};
pub use secret_keys::{
    construct_fair_cyclic, construct_fair_general, construct_general, sample_keys,
    verify_conditions, GeneratorMatrix, SecretKeySet,
};
