//! Episode collection: running the shared-parameter actor in an environment
//! and recording everything the learner needs to recompute the trajectory.
//!
//! Collection stores behavior log-probabilities and value estimates taken at
//! sampling time; the learner later replays the same observations through the
//! current networks, so nothing else network-dependent is kept. Values come
//! either from a centralized estimator over the joint observation set or from
//! the actor's own local value head — exactly one of the two must be present.

use ndarray::Array1;
use rand::RngCore;
use thiserror::Error;

use crate::env::Env;
use crate::policy::{ActorNet, Categorical, PolicyError};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("episode needs exactly one value source: local head {local}, central estimator {central}")]
    AmbiguousValueSource { local: bool, central: bool },
    #[error("episode field `{field}` has length {got}, expected {expected}")]
    LengthMismatch { field: &'static str, got: usize, expected: usize },
    #[error("action {action} out of range for {action_count} actions")]
    ActionOutOfRange { action: usize, action_count: usize },
}

/// Centralized state-value estimate of a joint observation set.
pub trait ValueEstimator {
    fn value(&self, observations: &[Vec<f64>]) -> f64;
}

/// Behavior value estimates for an episode of `T` steps; always `T + 1`
/// entries, the last being the bootstrap value of the post-episode state.
#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    /// One centralized value per time step.
    Centralized(Vec<f64>),
    /// One value per agent per time step (independent learners).
    PerAgent(Vec<Vec<f64>>),
}

impl Values {
    pub fn len(&self) -> usize {
        match self {
            Values::Centralized(v) => v.len(),
            Values::PerAgent(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One complete episode as sampled from the environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeData {
    pub roster: usize,
    /// Joint observations indexed `[t][agent]`, `t = 0..=T`; the final entry
    /// is the post-episode observation used only for value bootstrapping.
    pub observations: Vec<Vec<Vec<f64>>>,
    /// Actions indexed `[t][agent]`, `t = 0..T`.
    pub actions: Vec<Vec<usize>>,
    /// Log-probabilities of the sampled actions under the behavior policy.
    pub behavior_log_probs: Vec<Vec<f64>>,
    /// Shared team reward per step.
    pub rewards: Vec<f64>,
    /// Episode-termination flag per step.
    pub dones: Vec<bool>,
    /// Behavior value estimates (see [`Values`]).
    pub values: Values,
}

impl EpisodeData {
    /// Number of environment steps.
    pub fn steps(&self) -> usize {
        self.rewards.len()
    }

    /// Number of (agent, step) pairs, the unit minibatches are packed in.
    pub fn pairs(&self) -> usize {
        self.roster * self.steps()
    }

    /// Undiscounted team return.
    pub fn raw_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Structural consistency check against the environment's shapes.
    pub fn check(&self, obs_width: usize, action_count: usize) -> Result<(), RolloutError> {
        let t = self.steps();
        let expect = |field, got, expected| {
            if got != expected {
                Err(RolloutError::LengthMismatch { field, got, expected })
            } else {
                Ok(())
            }
        };
        expect("observations", self.observations.len(), t + 1)?;
        expect("actions", self.actions.len(), t)?;
        expect("behavior_log_probs", self.behavior_log_probs.len(), t)?;
        expect("dones", self.dones.len(), t)?;
        expect("values", self.values.len(), t + 1)?;
        for obs_t in &self.observations {
            expect("observations[t]", obs_t.len(), self.roster)?;
            for o in obs_t {
                expect("observation", o.len(), obs_width)?;
            }
        }
        for acts in &self.actions {
            expect("actions[t]", acts.len(), self.roster)?;
            for &a in acts {
                if a >= action_count {
                    return Err(RolloutError::ActionOutOfRange { action: a, action_count });
                }
            }
        }
        if let Values::PerAgent(v) = &self.values {
            for vt in v {
                expect("values[t]", vt.len(), self.roster)?;
            }
        }
        Ok(())
    }
}

/// A set of episodes gathered between learner updates.
#[derive(Debug, Default)]
pub struct RolloutBatch {
    pub episodes: Vec<EpisodeData>,
}

impl RolloutBatch {
    pub fn pair_count(&self) -> usize {
        self.episodes.iter().map(EpisodeData::pairs).sum()
    }

    pub fn step_count(&self) -> usize {
        self.episodes.iter().map(EpisodeData::steps).sum()
    }
}

/// Runs one episode with the stochastic policy, recording training data.
///
/// `env_rng` drives the environment layout, `policy_rng` the action sampling;
/// the two streams keep environment randomness identical across methods that
/// consume different amounts of policy randomness.
pub fn collect_episode<P: rand::Rng>(
    env: &mut dyn Env,
    actor: &ActorNet,
    central_values: Option<&dyn ValueEstimator>,
    env_rng: &mut dyn RngCore,
    policy_rng: &mut P,
) -> Result<EpisodeData, RolloutError> {
    let local = actor.cfg.local_value;
    if local == central_values.is_some() {
        return Err(RolloutError::AmbiguousValueSource { local, central: central_values.is_some() });
    }
    let n = env.roster();
    let mut obs = env.reset(env_rng);
    let mut states: Vec<Array1<f64>> = (0..n).map(|_| actor.initial_state()).collect();

    let mut observations = Vec::new();
    let mut actions = Vec::new();
    let mut log_probs = Vec::new();
    let mut rewards = Vec::new();
    let mut dones = Vec::new();
    let mut central = Vec::new();
    let mut per_agent = Vec::new();

    loop {
        if let Some(est) = central_values {
            central.push(est.value(&obs));
        }
        let mut step_actions = Vec::with_capacity(n);
        let mut step_logps = Vec::with_capacity(n);
        let mut step_values = Vec::with_capacity(n);
        for i in 0..n {
            let (step, _) = actor.forward_step(&obs[i], &states[i].view());
            let dist = Categorical::from_logits(&step.logits.view())?;
            let a = dist.sample(policy_rng);
            step_actions.push(a);
            step_logps.push(dist.log_prob(a));
            if let Some(v) = step.value {
                step_values.push(v);
            }
            states[i] = step.h;
        }
        if local {
            per_agent.push(step_values);
        }
        observations.push(obs.clone());
        let result = env.step(&step_actions);
        actions.push(step_actions);
        log_probs.push(step_logps);
        rewards.push(result.team_reward);
        dones.push(result.done);
        obs = result.observations;
        if result.done {
            break;
        }
        debug_assert!(rewards.len() <= env.horizon(), "environment failed to terminate");
    }

    // Bootstrap values of the post-episode state. The advantage recursion
    // masks these with (1 - done) at a terminal step, so computing them
    // unconditionally is safe and keeps the layout uniform.
    observations.push(obs.clone());
    let values = if local {
        let mut final_vals = Vec::with_capacity(n);
        for i in 0..n {
            let (step, _) = actor.forward_step(&obs[i], &states[i].view());
            final_vals.push(step.value.expect("local value head present"));
        }
        per_agent.push(final_vals);
        Values::PerAgent(per_agent)
    } else {
        central.push(central_values.expect("checked above").value(&obs));
        Values::Centralized(central)
    };

    let episode = EpisodeData {
        roster: n,
        observations,
        actions,
        behavior_log_probs: log_probs,
        rewards,
        dones,
        values,
    };
    episode.check(env.obs_width(), env.action_count())?;
    Ok(episode)
}

/// Runs one episode with greedy decentralized execution and returns the
/// undiscounted team return (no training data retained).
pub fn greedy_return(
    env: &mut dyn Env,
    actor: &ActorNet,
    env_rng: &mut dyn RngCore,
) -> Result<f64, RolloutError> {
    let n = env.roster();
    let mut obs = env.reset(env_rng);
    let mut states: Vec<Array1<f64>> = (0..n).map(|_| actor.initial_state()).collect();
    let mut total = 0.0;
    loop {
        let mut step_actions = Vec::with_capacity(n);
        for i in 0..n {
            let (step, _) = actor.forward_step(&obs[i], &states[i].view());
            let dist = Categorical::from_logits(&step.logits.view())?;
            step_actions.push(dist.greedy());
            states[i] = step.h;
        }
        let result = env.step(&step_actions);
        total += result.team_reward;
        obs = result.observations;
        if result.done {
            return Ok(total);
        }
    }
}
