//! Recurrent actor-critic agent for Zipfian navigation tasks.
//!
//! The agent couples a convolutional encoder and LSTM controller with two
//! buffers: a familiarity buffer that scores visited states for rarity
//! through the moving average of their contrastive loss, and an episodic
//! memory holding the rare states' hidden activations, which are
//! retrieved by key similarity and reinstated as an extra LSTM input.

pub mod augment;
pub mod config;
pub mod error;
pub mod familiarity;
pub mod learner;
pub mod memory;
pub mod model;
pub mod rl;
pub mod rollout;

pub use augment::{augment, gaussian_noise, random_cutout, AugmentConfig};
pub use config::{Config, EnvKind, Mode};
pub use error::AgentError;
pub use familiarity::{FamiliarityBuffer, FamiliarityDims, FamiliarityEntry};
pub use learner::{train, TrainResult};
pub use memory::{compute_key_in_graph, compute_key_plain, KeyProjection, MemBuffer, MemEntry};
pub use model::{act_step, argmax_action, obs_to_chw, sample_action, AgentNet, NetDims};
pub use rollout::{run_trial, AnyEnv};
