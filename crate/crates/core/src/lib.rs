//! Neural construction heuristic for the Euclidean travelling salesman problem.
//!
//! A reversible-residual attention encoder embeds the nodes; a multi-pointer
//! decoder, biased toward short edges and clipped with `C·tanh`, builds tours
//! one node at a time from every start node. Training uses REINFORCE with
//! per-instance mean/standard-deviation normalized rewards. Exact and
//! heuristic baselines plus a TSPLIB reader back the evaluation harness.

pub mod baselines;
pub mod bench;
pub mod error;
pub mod instance;
pub mod neural;
pub mod policy;
pub mod rollout;
pub mod training;
pub mod tsplib;

pub use error::{Error, Result};
pub use instance::{Instance, Tour};
pub use policy::{ModelConfig, Policy};
