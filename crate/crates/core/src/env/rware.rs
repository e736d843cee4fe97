//! Adapter seam for an external multi-robot warehouse simulator.
//!
//! The warehouse task itself is not reimplemented here; instead this module
//! defines the backend trait such a simulator must satisfy and a wrapper
//! that converts its per-agent rewards into the shared team scalar the rest
//! of the crate expects. Registering the template without linking a backend
//! yields [`super::EnvError::AdapterNotBundled`] at construction time.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{Env, StepResult};

fn default_obs_width() -> usize {
    71
}
fn default_action_count() -> usize {
    5
}
fn default_horizon() -> usize {
    500
}

/// Shape metadata for the external simulator; used to size networks before
/// any backend instance exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RwareParams {
    pub obs_width: usize,
    pub action_count: usize,
    pub horizon: usize,
}

impl Default for RwareParams {
    fn default() -> Self {
        Self {
            obs_width: default_obs_width(),
            action_count: default_action_count(),
            horizon: default_horizon(),
        }
    }
}

/// One backend step with the simulator's native per-agent rewards.
pub struct BackendStep {
    pub observations: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub done: bool,
}

/// What an external roster-parameterized simulator must provide.
pub trait RosterBackend: Send {
    fn roster(&self) -> usize;
    fn obs_width(&self) -> usize;
    fn action_count(&self) -> usize;
    fn horizon(&self) -> usize;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<Vec<f64>>;
    fn step(&mut self, actions: &[usize]) -> BackendStep;
}

/// Wraps a backend, summing its per-agent rewards into one shared scalar so
/// individual credit becomes a team signal.
pub struct SharedRewardAdapter {
    backend: Box<dyn RosterBackend>,
}

impl SharedRewardAdapter {
    pub fn new(backend: Box<dyn RosterBackend>) -> Self {
        Self { backend }
    }
}

impl Env for SharedRewardAdapter {
    fn roster(&self) -> usize {
        self.backend.roster()
    }

    fn obs_width(&self) -> usize {
        self.backend.obs_width()
    }

    fn action_count(&self) -> usize {
        self.backend.action_count()
    }

    fn horizon(&self) -> usize {
        self.backend.horizon()
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        self.backend.reset(rng)
    }

    fn step(&mut self, actions: &[usize]) -> StepResult {
        let out = self.backend.step(actions);
        debug_assert_eq!(out.rewards.len(), self.backend.roster());
        StepResult {
            observations: out.observations,
            team_reward: out.rewards.iter().sum(),
            done: out.done,
        }
    }
}
