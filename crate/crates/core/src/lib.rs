//! Policy-contrastive imitation learning at desk scale: environments,
//! replay, an off-policy actor-critic learner, contrastive reward models,
//! baselines, divergence checks and the experiment harness.

pub mod baselines;
pub mod envs;
mod error;
pub mod harness;
pub mod pcil;
pub mod method;
pub mod penalty;
pub mod registry;
pub mod replay;
pub mod rl;
pub mod theory;

pub use error::{Error, Result};
