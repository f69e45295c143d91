//! Safe model-based reinforcement learning with Gaussian process dynamics.
//!
//! The crate is organized around one episodic loop: fit a GP posterior to the
//! transitions seen so far (`gp`), draw a population of plausible dynamics
//! functions and truncate them to the running confidence bands (`sampler`),
//! plan an open-loop action sequence that is safe under every sampled model
//! while still reaching informative states (`planner`), execute it on the real
//! environment (`envs`), and repeat until exploration is no longer feasible
//! (`learner`).

pub mod envs;
pub mod error;
pub mod gp;
pub mod kernel;
pub mod learner;
pub mod planner;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
pub use gp::{GpPosterior, MeanFn, PriorSpec};
pub use kernel::{KernelKind, KernelSpec};

/// A state-action input to the dynamics model, `z = encode(x, a)`.
pub type QueryPoint = Vec<f64>;
