//! Zipfian navigation environments: trial sampling that follows a power
//! law over maps and target objects, a partially observable gridworld,
//! and a raycast first-person 3D variant. Both render 84x84 RGB frames
//! that embed the current map ID and the target object's color in the
//! top-left corner.

pub mod error;
pub mod gridworld;
pub mod map;
pub mod obs;
pub mod threed;
pub mod zipf;

pub use error::EnvError;
pub use gridworld::{Gridworld, GRID_ACTIONS};
pub use map::{generate_maps, reachable_cells, MapSpec, ObjectSpec};
pub use obs::{apply_overlay, map_id_gray, Observation, IMG_H, IMG_W, PATCH};
pub use threed::{ThreeDWorld, THREED_ACTIONS};
pub use zipf::{sample_trial, zipf_pmf, TrialSampler, ZipfParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialStatus {
    Running,
    Success,
    Failure,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
}

/// Reset/step protocol shared by both environments. One instance is owned
/// by one actor; a trial runs from `reset` until `step` reports done.
pub trait Env {
    fn n_actions(&self) -> usize;
    fn map(&self) -> &MapSpec;
    fn reset(&mut self, target: usize) -> Result<Observation, EnvError>;
    fn step(&mut self, action: usize) -> Result<StepResult, EnvError>;
}
