//! Clipped-surrogate policy optimization with optional centralized critics
//! and context distillation.
//!
//! One `Learner` owns the shared actor, a critic, a single Adam instance over
//! both, and (for the set-structured critic) an EMA shadow of the teacher
//! that supplies detached distillation targets. An update consumes a batch of
//! whole episodes:
//!
//! 1. advantages and return targets come from the behavior values stored at
//!    collection time (generalized advantage estimation);
//! 2. advantages are normalized over every (agent, step) pair in the batch;
//! 3. for each epoch, episodes are shuffled and greedily packed into
//!    minibatches of roughly `minibatch_pairs` pairs — episodes are never
//!    split, because the recurrent actor must replay from its initial state;
//! 4. per-episode gradient passes run through [`ExecMode`] and are reduced
//!    in input order, so sequential and parallel execution is bit-identical.
//!
//! The total objective is `L_PPO + λ_V·L_V − λ_H·H + λ_D·L_distill`, where
//! the surrogate and entropy average over pairs, the value error averages
//! over value predictions (per step for centralized critics, per pair for
//! local heads), and the distillation Huber term averages over pairs and
//! context dimensions. The teacher side of the distillation target is an EMA
//! shadow evaluated without gradients, so distillation shapes the actor only.

use ndarray::Array1;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::ExecMode;
use crate::nn::{clip_grad_norm, global_grad_norm, Adam, ParamEntry, ParamEntryMut, Params};
use crate::policy::{ActorNet, ActorStepGrad, Categorical, PolicyError};
use crate::rng::stream2;
use crate::rollout::{EpisodeData, RolloutBatch, ValueEstimator, Values};
use crate::teacher::{EmaTeacher, MeanPoolCritic, PaddedCritic, SetTeacherCritic};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("update called with an empty batch")]
    EmptyBatch,
    #[error("value layout mismatch: {0}")]
    ValueLayout(&'static str),
    #[error("non-finite {what} in update {update}; aborting before applying")]
    NonFinite { what: &'static str, update: u64 },
}

// ---------------------------------------------------------------------------
// Advantage estimation and per-term losses
// ---------------------------------------------------------------------------

/// Generalized advantage estimation over one reward/value sequence.
///
/// `values` must hold `T + 1` entries (the last is the bootstrap value of the
/// post-episode state); a set `dones[t]` severs both the bootstrap and the
/// advantage recursion at `t`. Returns `(advantages, return_targets)` where
/// the targets are `A_t + V_t`.
pub fn gae(
    rewards: &[f64],
    dones: &[bool],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let t_steps = rewards.len();
    assert_eq!(dones.len(), t_steps);
    assert_eq!(values.len(), t_steps + 1, "values must include the bootstrap entry");
    let mut adv = vec![0.0; t_steps];
    let mut acc = 0.0;
    for t in (0..t_steps).rev() {
        let mask = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * mask * values[t + 1] - values[t];
        acc = delta + gamma * lambda * mask * acc;
        adv[t] = acc;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Clipped surrogate for one pair. Returns the loss contribution and its
/// derivative with respect to the *new* log-probability.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> (f64, f64) {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    let unclipped_obj = ratio * advantage;
    let clipped_obj = clipped * advantage;
    if unclipped_obj <= clipped_obj {
        // dr/dlogp = r, so dL/dlogp = -A·r.
        (-unclipped_obj, -advantage * ratio)
    } else {
        // The clipped branch is active only when the ratio sits outside the
        // trust region, where the clamp has zero derivative.
        (-clipped_obj, 0.0)
    }
}

/// Huber penalty with threshold `delta` (quadratic inside, linear outside).
pub fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Derivative of [`huber`] with respect to `x`.
pub fn huber_grad(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        x
    } else {
        delta * x.signum()
    }
}

/// Threshold for the distillation Huber term.
pub const HUBER_DELTA: f64 = 1.0;

/// Normalizes to zero mean and unit (population) standard deviation.
pub fn normalized(xs: &[f64]) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    xs.iter().map(|x| (x - mean) / denom).collect()
}

// ---------------------------------------------------------------------------
// Critic
// ---------------------------------------------------------------------------

/// The value function paired with the shared actor.
pub enum Critic {
    /// No centralized critic: the actor's own value head is used.
    Local,
    /// Joint observation vector padded to the maximum roster, plus mask.
    Padded(PaddedCritic),
    /// Permutation-invariant mean pooling over per-agent embeddings.
    MeanPool(MeanPoolCritic),
    /// Set-structured teacher with coordination tokens (the distillation
    /// source).
    SetTeacher(SetTeacherCritic),
}

impl Critic {
    pub fn zeros_like(&self) -> Critic {
        match self {
            Critic::Local => Critic::Local,
            Critic::Padded(c) => Critic::Padded(c.zeros_like()),
            Critic::MeanPool(c) => Critic::MeanPool(c.zeros_like()),
            Critic::SetTeacher(c) => Critic::SetTeacher(c.zeros_like()),
        }
    }

    pub fn is_local(&self) -> bool {
        matches!(self, Critic::Local)
    }

    /// Centralized estimator for episode collection; `None` for local-value
    /// actors, which read values off their own head instead.
    pub fn estimator(&self) -> Option<&dyn ValueEstimator> {
        match self {
            Critic::Local => None,
            other => Some(other),
        }
    }
}

impl ValueEstimator for Critic {
    fn value(&self, observations: &[Vec<f64>]) -> f64 {
        match self {
            Critic::Local => unreachable!("local critics have no centralized estimator"),
            Critic::Padded(c) => c.forward(observations).value,
            Critic::MeanPool(c) => c.forward(observations).value,
            Critic::SetTeacher(c) => c.forward(observations).value,
        }
    }
}

impl Params for Critic {
    fn params(&self) -> Vec<ParamEntry<'_>> {
        match self {
            Critic::Local => Vec::new(),
            Critic::Padded(c) => c.params(),
            Critic::MeanPool(c) => c.params(),
            Critic::SetTeacher(c) => c.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<ParamEntryMut<'_>> {
        match self {
            Critic::Local => Vec::new(),
            Critic::Padded(c) => c.params_mut(),
            Critic::MeanPool(c) => c.params_mut(),
            Critic::SetTeacher(c) => c.params_mut(),
        }
    }
}

// ---------------------------------------------------------------------------
// Learner
// ---------------------------------------------------------------------------

/// Optimization hyperparameters for one run.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct LearnerConfig {
    pub lr: f64,
    /// Target minibatch size in (agent, step) pairs; whole episodes are
    /// packed until this is reached.
    pub minibatch_pairs: usize,
    pub epochs: usize,
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    /// Distillation weight λ_D; 0 disables the term entirely.
    pub distill_coef: f64,
    /// EMA time constant for the teacher shadow.
    pub ema_tau: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            minibatch_pairs: 128,
            epochs: 4,
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            distill_coef: 0.0,
            ema_tau: 0.01,
        }
    }
}

/// Scalar diagnostics of one learner update, averaged over everything the
/// update touched.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub update: u64,
    pub episodes: usize,
    pub pairs: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub distill_loss: f64,
    pub total_loss: f64,
    /// Mean pre-clip global gradient norm across minibatch steps.
    pub grad_norm: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    /// Mean context-reliance gate over pairs (context-conditioned actors).
    pub mean_gate: Option<f64>,
    /// Mean clipped reliance over pairs.
    pub mean_reliance: Option<f64>,
}

/// Per-episode advantage/return targets, fixed for the whole update.
struct Targets {
    /// Advantages indexed `[t][agent]`, already normalized.
    adv: Vec<Vec<f64>>,
    ret: ReturnTargets,
}

enum ReturnTargets {
    Central(Vec<f64>),
    PerAgent(Vec<Vec<f64>>),
}

#[derive(Debug, Default, Clone, Copy)]
struct PassSums {
    policy: f64,
    value: f64,
    entropy: f64,
    distill: f64,
    kl: f64,
    clip_hits: usize,
    pairs: usize,
    value_terms: usize,
    gate: f64,
    reliance: f64,
    ctx_pairs: usize,
}

impl PassSums {
    fn add(&mut self, o: &PassSums) {
        self.policy += o.policy;
        self.value += o.value;
        self.entropy += o.entropy;
        self.distill += o.distill;
        self.kl += o.kl;
        self.clip_hits += o.clip_hits;
        self.pairs += o.pairs;
        self.value_terms += o.value_terms;
        self.gate += o.gate;
        self.reliance += o.reliance;
        self.ctx_pairs += o.ctx_pairs;
    }
}

#[derive(Clone, Copy)]
struct Denoms {
    pairs: f64,
    values: f64,
    distill: f64,
}

pub struct Learner {
    pub actor: ActorNet,
    pub critic: Critic,
    /// Shadow teacher supplying detached distillation targets; present
    /// exactly when the critic is the set-structured teacher.
    pub ema: Option<EmaTeacher>,
    pub opt: Adam,
    pub cfg: LearnerConfig,
    pub exec: ExecMode,
    /// Seed for minibatch shuffling (derived per update and epoch).
    pub seed: u64,
    pub updates_done: u64,
}

fn param_sizes(actor: &ActorNet, critic: &Critic) -> Vec<usize> {
    actor
        .params()
        .iter()
        .chain(critic.params().iter())
        .map(|p| p.data.len())
        .collect()
}

impl Learner {
    pub fn new(actor: ActorNet, critic: Critic, cfg: LearnerConfig, exec: ExecMode, seed: u64) -> Self {
        let ema = match &critic {
            Critic::SetTeacher(t) => Some(EmaTeacher::new(t, cfg.ema_tau)),
            _ => None,
        };
        let opt = Adam::new(cfg.lr, &param_sizes(&actor, &critic));
        Self { actor, critic, ema, opt, cfg, exec, seed, updates_done: 0 }
    }

    /// Whether distillation is active for this learner.
    fn distill_active(&self) -> bool {
        self.cfg.distill_coef > 0.0 && self.actor.ctx.is_some() && self.ema.is_some()
    }

    /// Computes normalized advantages and return targets for a batch.
    fn prepare_targets(&self, batch: &RolloutBatch) -> Result<Vec<Targets>, LearnerError> {
        let mut targets = Vec::with_capacity(batch.episodes.len());
        for ep in &batch.episodes {
            let t_steps = ep.steps();
            match (&ep.values, self.critic.is_local()) {
                (Values::Centralized(vals), false) => {
                    let (a, r) = gae(&ep.rewards, &ep.dones, vals, self.cfg.gamma, self.cfg.gae_lambda);
                    let adv = a.iter().map(|&x| vec![x; ep.roster]).collect();
                    targets.push(Targets { adv, ret: ReturnTargets::Central(r[..t_steps].to_vec()) });
                }
                (Values::PerAgent(vals), true) => {
                    let mut adv = vec![vec![0.0; ep.roster]; t_steps];
                    let mut ret = vec![vec![0.0; ep.roster]; t_steps];
                    for i in 0..ep.roster {
                        let col: Vec<f64> = vals.iter().map(|vt| vt[i]).collect();
                        let (a, r) = gae(&ep.rewards, &ep.dones, &col, self.cfg.gamma, self.cfg.gae_lambda);
                        for t in 0..t_steps {
                            adv[t][i] = a[t];
                            ret[t][i] = r[t];
                        }
                    }
                    targets.push(Targets { adv, ret: ReturnTargets::PerAgent(ret) });
                }
                (Values::Centralized(_), true) => {
                    return Err(LearnerError::ValueLayout(
                        "local critic requires per-agent behavior values",
                    ))
                }
                (Values::PerAgent(_), false) => {
                    return Err(LearnerError::ValueLayout(
                        "centralized critic requires centralized behavior values",
                    ))
                }
            }
        }

        // Normalize advantages over every pair in the update batch.
        let flat: Vec<f64> = targets
            .iter()
            .flat_map(|t| t.adv.iter().flatten().copied())
            .collect();
        let norm = normalized(&flat);
        let mut k = 0;
        for t in &mut targets {
            for row in &mut t.adv {
                for a in row.iter_mut() {
                    *a = norm[k];
                    k += 1;
                }
            }
        }
        Ok(targets)
    }

    /// One gradient pass over a single episode; returns parameter-shaped
    /// gradient accumulators and raw loss sums.
    fn episode_pass(
        &self,
        ep: &EpisodeData,
        tg: &Targets,
        denoms: Denoms,
    ) -> Result<(ActorNet, Critic, PassSums), LearnerError> {
        let mut ag = self.actor.zeros_like();
        let mut cg = self.critic.zeros_like();
        let mut sums = PassSums::default();
        let t_steps = ep.steps();
        let distill = self.distill_active();

        // Detached distillation targets from the EMA shadow teacher.
        let shadow_contexts: Option<Vec<ndarray::Array2<f64>>> = distill.then(|| {
            let shadow = &self.ema.as_ref().expect("distill implies ema").shadow;
            (0..t_steps).map(|t| shadow.contexts_for(&ep.observations[t])).collect()
        });

        // Actor: replay each agent's episode, then backpropagate through time.
        for i in 0..ep.roster {
            let mut h = self.actor.initial_state();
            let mut caches = Vec::with_capacity(t_steps);
            let mut d_logits = Vec::with_capacity(t_steps);
            let mut d_values = Vec::with_capacity(t_steps);
            let mut d_contexts: Vec<Option<Array1<f64>>> = Vec::with_capacity(t_steps);
            for t in 0..t_steps {
                let (step, cache) = self.actor.forward_step(&ep.observations[t][i], &h.view());
                h = step.h;
                let dist = Categorical::from_logits(&step.logits.view())?;
                let action = ep.actions[t][i];
                let lp_new = dist.log_prob(action);
                let lp_old = ep.behavior_log_probs[t][i];
                let ratio = (lp_new - lp_old).exp();
                let (loss, d_loss_d_logp) = clipped_surrogate(ratio, tg.adv[t][i], self.cfg.clip);
                sums.policy += loss;
                sums.kl += lp_old - lp_new;
                if (ratio - 1.0).abs() > self.cfg.clip {
                    sums.clip_hits += 1;
                }
                sums.entropy += dist.entropy();
                sums.pairs += 1;
                if let (Some(g), Some(rho)) = (step.gate, step.reliance) {
                    sums.gate += g;
                    sums.reliance += rho;
                    sums.ctx_pairs += 1;
                }

                let mut dl = dist.d_log_prob(action) * d_loss_d_logp;
                dl -= &(dist.d_entropy() * self.cfg.entropy_coef);
                dl /= denoms.pairs;
                d_logits.push(dl);

                if self.critic.is_local() {
                    let v = step.value.expect("local value head");
                    let r = match &tg.ret {
                        ReturnTargets::PerAgent(rt) => rt[t][i],
                        _ => unreachable!("layout checked in prepare_targets"),
                    };
                    let diff = v - r;
                    sums.value += diff * diff;
                    sums.value_terms += 1;
                    d_values.push(self.cfg.value_coef * 2.0 * diff / denoms.values);
                } else {
                    d_values.push(0.0);
                }

                if let Some(contexts) = &shadow_contexts {
                    let chat = step.context.as_ref().expect("context path present");
                    let target = contexts[t].row(i);
                    let mut dc = Array1::zeros(chat.len());
                    for j in 0..chat.len() {
                        let diff = chat[j] - target[j];
                        sums.distill += huber(diff, HUBER_DELTA);
                        dc[j] = self.cfg.distill_coef * huber_grad(diff, HUBER_DELTA) / denoms.distill;
                    }
                    d_contexts.push(Some(dc));
                } else {
                    d_contexts.push(None);
                }
                caches.push(cache);
            }

            let mut dh = self.actor.initial_state();
            for t in (0..t_steps).rev() {
                let gin = ActorStepGrad {
                    d_logits: d_logits[t].view(),
                    d_value: d_values[t],
                    d_context: d_contexts[t].as_ref().map(|a| a.view()),
                };
                dh = self.actor.backward_step(&caches[t], &gin, &dh, &mut ag);
            }
        }

        // Centralized critic: one value regression per step.
        if let ReturnTargets::Central(ret) = &tg.ret {
            for t in 0..t_steps {
                let obs_set = &ep.observations[t];
                let dv_scale = self.cfg.value_coef * 2.0 / denoms.values;
                match (&self.critic, &mut cg) {
                    (Critic::Padded(c), Critic::Padded(g)) => {
                        let fwd = c.forward(obs_set);
                        let diff = fwd.value - ret[t];
                        sums.value += diff * diff;
                        c.backward(&fwd, dv_scale * diff, g);
                    }
                    (Critic::MeanPool(c), Critic::MeanPool(g)) => {
                        let fwd = c.forward(obs_set);
                        let diff = fwd.value - ret[t];
                        sums.value += diff * diff;
                        c.backward(&fwd, dv_scale * diff, g);
                    }
                    (Critic::SetTeacher(c), Critic::SetTeacher(g)) => {
                        let fwd = c.forward(obs_set);
                        let diff = fwd.value - ret[t];
                        sums.value += diff * diff;
                        c.backward(&fwd, dv_scale * diff, g);
                    }
                    _ => unreachable!("gradient layout mirrors critic layout"),
                }
                sums.value_terms += 1;
            }
        }

        Ok((ag, cg, sums))
    }

    /// The exact scalar objective the gradient pass differentiates, for
    /// verification. Same episode set, same denominators.
    #[cfg(test)]
    fn minibatch_loss(&self, eps: &[&EpisodeData], tgs: &[&Targets], denoms: Denoms) -> f64 {
        let mut total = 0.0;
        for (ep, tg) in eps.iter().zip(tgs) {
            let t_steps = ep.steps();
            let shadow_contexts: Option<Vec<ndarray::Array2<f64>>> = self.distill_active().then(|| {
                let shadow = &self.ema.as_ref().unwrap().shadow;
                (0..t_steps).map(|t| shadow.contexts_for(&ep.observations[t])).collect()
            });
            for i in 0..ep.roster {
                let mut h = self.actor.initial_state();
                for t in 0..t_steps {
                    let (step, _) = self.actor.forward_step(&ep.observations[t][i], &h.view());
                    h = step.h;
                    let dist = Categorical::from_logits(&step.logits.view()).unwrap();
                    let action = ep.actions[t][i];
                    let ratio = (dist.log_prob(action) - ep.behavior_log_probs[t][i]).exp();
                    let (loss, _) = clipped_surrogate(ratio, tg.adv[t][i], self.cfg.clip);
                    total += loss / denoms.pairs;
                    total -= self.cfg.entropy_coef * dist.entropy() / denoms.pairs;
                    if self.critic.is_local() {
                        let r = match &tg.ret {
                            ReturnTargets::PerAgent(rt) => rt[t][i],
                            _ => unreachable!(),
                        };
                        let diff = step.value.unwrap() - r;
                        total += self.cfg.value_coef * diff * diff / denoms.values;
                    }
                    if let Some(contexts) = &shadow_contexts {
                        let chat = step.context.as_ref().unwrap();
                        let target = contexts[t].row(i);
                        for j in 0..chat.len() {
                            total += self.cfg.distill_coef * huber(chat[j] - target[j], HUBER_DELTA)
                                / denoms.distill;
                        }
                    }
                }
            }
            if let ReturnTargets::Central(ret) = &tg.ret {
                for t in 0..t_steps {
                    let v = self.critic.value(&ep.observations[t]);
                    let diff = v - ret[t];
                    total += self.cfg.value_coef * diff * diff / denoms.values;
                }
            }
        }
        total
    }

    fn denoms_for(&self, eps: &[&EpisodeData]) -> Denoms {
        let pairs: usize = eps.iter().map(|e| e.pairs()).sum();
        let values = if self.critic.is_local() {
            pairs
        } else {
            eps.iter().map(|e| e.steps()).sum()
        };
        let distill = pairs * self.actor.cfg.context_dim.max(1);
        Denoms { pairs: pairs as f64, values: values as f64, distill: distill as f64 }
    }

    /// One gradient step over a set of episodes (a packed minibatch).
    fn minibatch_step(
        &mut self,
        eps: &[&EpisodeData],
        tgs: &[&Targets],
        sums: &mut PassSums,
        norms: &mut Vec<f64>,
    ) -> Result<(), LearnerError> {
        let denoms = self.denoms_for(eps);

        let results = self.exec.map_indexed(eps.len(), |k| self.episode_pass(eps[k], tgs[k], denoms));
        let mut total_ag: Option<ActorNet> = None;
        let mut total_cg: Option<Critic> = None;
        for res in results {
            let (ag, cg, s) = res?;
            sums.add(&s);
            match &mut total_ag {
                None => total_ag = Some(ag),
                Some(t) => add_params(t, &ag),
            }
            match &mut total_cg {
                None => total_cg = Some(cg),
                Some(t) => add_params_critic(t, &cg),
            }
        }
        let ag = total_ag.expect("non-empty minibatch");
        let cg = total_cg.expect("non-empty minibatch");

        let grads: Vec<ParamEntry<'_>> =
            ag.params().into_iter().chain(cg.params()).collect();
        let norm = global_grad_norm(&grads);
        if !norm.is_finite() {
            return Err(LearnerError::NonFinite { what: "gradient norm", update: self.updates_done });
        }
        drop(grads);

        // Clip in a gradient-shaped mutable view, then apply Adam.
        let mut ag = ag;
        let mut cg = cg;
        {
            let mut gmut: Vec<ParamEntryMut<'_>> =
                ag.params_mut().into_iter().chain(cg.params_mut()).collect();
            clip_grad_norm(&mut gmut, self.cfg.max_grad_norm);
        }
        let grads: Vec<ParamEntry<'_>> =
            ag.params().into_iter().chain(cg.params()).collect();
        let mut pmut: Vec<ParamEntryMut<'_>> = self
            .actor
            .params_mut()
            .into_iter()
            .chain(self.critic.params_mut())
            .collect();
        self.opt.step(&mut pmut, &grads);
        norms.push(norm);
        Ok(())
    }

    /// Runs one full optimization update over a batch of episodes.
    pub fn update(&mut self, batch: &RolloutBatch) -> Result<UpdateMetrics, LearnerError> {
        if batch.episodes.is_empty() {
            return Err(LearnerError::EmptyBatch);
        }
        let targets = self.prepare_targets(batch)?;
        for t in &targets {
            for row in &t.adv {
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(LearnerError::NonFinite { what: "advantage", update: self.updates_done });
                }
            }
        }

        let mut sums = PassSums::default();
        let mut norms = Vec::new();
        let n_eps = batch.episodes.len();
        let mut order: Vec<usize> = (0..n_eps).collect();
        for epoch in 0..self.cfg.epochs {
            let mut rng = stream2(self.seed, "shuffle", self.updates_done, epoch as u64);
            order.shuffle(&mut rng);
            let mut start = 0;
            while start < n_eps {
                let mut end = start;
                let mut pairs = 0;
                while end < n_eps && pairs < self.cfg.minibatch_pairs {
                    pairs += batch.episodes[order[end]].pairs();
                    end += 1;
                }
                let eps: Vec<&EpisodeData> =
                    order[start..end].iter().map(|&k| &batch.episodes[k]).collect();
                let tgs: Vec<&Targets> = order[start..end].iter().map(|&k| &targets[k]).collect();
                self.minibatch_step(&eps, &tgs, &mut sums, &mut norms)?;
                start = end;
            }
        }

        // Shadow teacher trails the live teacher once per update.
        if let (Some(ema), Critic::SetTeacher(t)) = (&mut self.ema, &self.critic) {
            ema.update(t);
        }
        self.updates_done += 1;

        let pairs = sums.pairs.max(1) as f64;
        let value_terms = sums.value_terms.max(1) as f64;
        let policy_loss = sums.policy / pairs;
        let value_loss = sums.value / value_terms;
        let entropy = sums.entropy / pairs;
        let distill_elems = pairs * self.actor.cfg.context_dim.max(1) as f64;
        let distill_loss = sums.distill / distill_elems;
        let total_loss = policy_loss + self.cfg.value_coef * value_loss
            - self.cfg.entropy_coef * entropy
            + self.cfg.distill_coef * distill_loss;
        if !total_loss.is_finite() {
            return Err(LearnerError::NonFinite { what: "total loss", update: self.updates_done - 1 });
        }
        Ok(UpdateMetrics {
            update: self.updates_done - 1,
            episodes: batch.episodes.len(),
            pairs: batch.pair_count(),
            policy_loss,
            value_loss,
            entropy,
            distill_loss,
            total_loss,
            grad_norm: norms.iter().sum::<f64>() / norms.len().max(1) as f64,
            clip_fraction: sums.clip_hits as f64 / pairs,
            approx_kl: sums.kl / pairs,
            mean_gate: (sums.ctx_pairs > 0).then(|| sums.gate / sums.ctx_pairs as f64),
            mean_reliance: (sums.ctx_pairs > 0).then(|| sums.reliance / sums.ctx_pairs as f64),
        })
    }
}

/// Element-wise gradient accumulation across same-shaped modules.
fn add_params(dst: &mut ActorNet, src: &ActorNet) {
    let srcs = src.params();
    for (d, s) in dst.params_mut().iter_mut().zip(&srcs) {
        debug_assert_eq!(d.name, s.name);
        for (dv, sv) in d.data.iter_mut().zip(s.data) {
            *dv += sv;
        }
    }
}

fn add_params_critic(dst: &mut Critic, src: &Critic) {
    let srcs = src.params();
    for (d, s) in dst.params_mut().iter_mut().zip(&srcs) {
        debug_assert_eq!(d.name, s.name);
        for (dv, sv) in d.data.iter_mut().zip(s.data) {
            *dv += sv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::spread::SpreadEnv;
    use crate::policy::{ActorConfig, ConditioningMode};
    use crate::rng::stream;
    use crate::rollout::collect_episode;
    use crate::teacher::TeacherConfig;
    use approx::assert_relative_eq;

    // -- advantage estimation ------------------------------------------------

    #[test]
    fn gae_known_values() {
        // γ = λ = 1, zero values: advantage is the undiscounted reward-to-go.
        let (a, r) = gae(&[1.0, 1.0], &[false, true], &[0.0, 0.0, 0.0], 1.0, 1.0);
        assert_eq!(a, vec![2.0, 1.0]);
        assert_eq!(r, vec![2.0, 1.0]);

        // λ = 0 reduces to one-step temporal-difference errors.
        let (a, _) = gae(&[1.0, 2.0], &[false, true], &[0.5, 0.25, 9.0], 0.9, 0.0);
        assert_relative_eq!(a[0], 1.0 + 0.9 * 0.25 - 0.5, epsilon = 1e-12);
        assert_relative_eq!(a[1], 2.0 - 0.25, epsilon = 1e-12);

        // A done at t = 0 severs both the bootstrap and the recursion: the
        // large terminal value never leaks into either advantage.
        let (a, _) = gae(&[1.0, 1.0], &[true, true], &[0.0, 0.0, 5.0], 0.9, 0.9);
        assert_eq!(a, vec![1.0, 1.0]);
    }

    #[test]
    fn gae_matches_quadratic_forward_sum() {
        use rand::Rng;
        let mut rng = stream(31, "gae", 0);
        let t = 17;
        let rewards: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..=t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut dones = vec![false; t];
        dones[5] = true;
        dones[t - 1] = true;
        let (gamma, lambda) = (0.97, 0.93);
        let (fast, _) = gae(&rewards, &dones, &values, gamma, lambda);

        // O(T²) definition: A_t = Σ_{l≥t} (γλ)^{l−t} δ_l, stopping at a done.
        for t0 in 0..t {
            let mut acc = 0.0;
            let mut w = 1.0;
            for l in t0..t {
                let mask = if dones[l] { 0.0 } else { 1.0 };
                let delta = rewards[l] + gamma * mask * values[l + 1] - values[l];
                acc += w * delta;
                if dones[l] {
                    break;
                }
                w *= gamma * lambda;
            }
            assert_relative_eq!(fast[t0], acc, epsilon = 1e-12);
        }
    }

    // -- loss terms ----------------------------------------------------------

    #[test]
    fn surrogate_known_values() {
        // Ratio 1: loss is -A, gradient -A.
        let (l, g) = clipped_surrogate(1.0, 0.7, 0.2);
        assert_relative_eq!(l, -0.7, epsilon = 1e-12);
        assert_relative_eq!(g, -0.7, epsilon = 1e-12);

        // Positive advantage, ratio far above the clip: clipped branch, no
        // gradient.
        let (l, g) = clipped_surrogate(2.0, 1.0, 0.15);
        assert_relative_eq!(l, -1.15, epsilon = 1e-12);
        assert_eq!(g, 0.0);

        // Negative advantage keeps the pessimistic (unclipped) branch, so the
        // gradient survives.
        let (l, g) = clipped_surrogate(2.0, -1.0, 0.15);
        assert_relative_eq!(l, 2.0, epsilon = 1e-12);
        assert_relative_eq!(g, 2.0, epsilon = 1e-12);

        // Zero advantage contributes nothing.
        let (l, g) = clipped_surrogate(1.7, 0.0, 0.15);
        assert_eq!((l, g), (0.0, 0.0));
    }

    #[test]
    fn huber_known_values() {
        assert_eq!(huber(0.0, 1.0), 0.0);
        assert_relative_eq!(huber(0.5, 1.0), 0.125, epsilon = 1e-15);
        assert_relative_eq!(huber(3.0, 1.0), 2.5, epsilon = 1e-15);
        assert_relative_eq!(huber(-3.0, 1.0), 2.5, epsilon = 1e-15);
        assert_eq!(huber_grad(0.5, 1.0), 0.5);
        assert_eq!(huber_grad(3.0, 1.0), 1.0);
        assert_eq!(huber_grad(-3.0, 1.0), -1.0);
    }

    #[test]
    fn advantage_normalization_is_exact() {
        use rand::Rng;
        let mut rng = stream(33, "norm", 0);
        let xs: Vec<f64> = (0..257).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let n = normalized(&xs);
        let mean = n.iter().sum::<f64>() / n.len() as f64;
        let var = n.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n.len() as f64;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-6, "std {}", var.sqrt());
    }

    // -- learner fixtures ------------------------------------------------------

    fn actor_cfg(with_context: bool, local_value: bool, mode: ConditioningMode) -> ActorConfig {
        ActorConfig {
            obs_width: 22,
            action_count: 5,
            mlp_widths: vec![12],
            rnn_dim: 8,
            context_dim: 4,
            rho_min: -3.0,
            rho_max: 2.0,
            mode,
            local_value,
            with_context,
            hyper_hidden: 8,
        }
    }

    fn teacher_cfg() -> TeacherConfig {
        TeacherConfig {
            obs_width: 22,
            embed_dim: 4,
            phi_widths: vec![10],
            tokens: 3,
            value_widths: vec![10],
            size_feature: true,
            max_roster: 4,
        }
    }

    fn spread_batch(learner: &Learner, episodes: usize, seed: u64) -> RolloutBatch {
        let mut batch = RolloutBatch::default();
        for e in 0..episodes as u64 {
            let mut env = SpreadEnv::new(3, Default::default());
            let ep = collect_episode(
                &mut env,
                &learner.actor,
                learner.critic.estimator(),
                &mut stream(seed, "env", e),
                &mut stream(seed, "policy", e),
            )
            .unwrap();
            batch.episodes.push(ep);
        }
        batch
    }

    fn teacher_learner(distill: f64, mode: ConditioningMode, seed: u64) -> Learner {
        let actor = ActorNet::new(actor_cfg(true, false, mode), &mut stream(seed, "init", 0));
        let critic = Critic::SetTeacher(SetTeacherCritic::new(teacher_cfg(), &mut stream(seed, "init", 1)));
        let cfg = LearnerConfig {
            lr: 1e-3,
            minibatch_pairs: 64,
            epochs: 2,
            distill_coef: distill,
            ema_tau: 0.05,
            ..Default::default()
        };
        Learner::new(actor, critic, cfg, ExecMode::Sequential, seed)
    }

    // -- behavioral tests ------------------------------------------------------

    #[test]
    fn update_improves_nothing_with_zero_learning_rate_but_counts_advance() {
        let mut learner = teacher_learner(0.3, ConditioningMode::Film, 41);
        learner.cfg.lr = 0.0;
        learner.opt.lr = 0.0;
        // Make the shadow observably different from the live teacher.
        if let Some(ema) = &mut learner.ema {
            for p in ema.shadow.params_mut().iter_mut() {
                for v in p.data.iter_mut() {
                    *v += 0.5;
                }
            }
        }
        let batch = spread_batch(&learner, 2, 42);
        let before: Vec<Vec<f64>> = learner
            .actor
            .params()
            .iter()
            .chain(learner.critic.params().iter())
            .map(|p| p.data.to_vec())
            .collect();
        let shadow_before: Vec<f64> =
            learner.ema.as_ref().unwrap().shadow.params()[0].data.to_vec();
        let metrics = learner.update(&batch).unwrap();

        let after: Vec<Vec<f64>> = learner
            .actor
            .params()
            .iter()
            .chain(learner.critic.params().iter())
            .map(|p| p.data.to_vec())
            .collect();
        assert_eq!(before, after, "zero learning rate must not move parameters");
        // The shadow still trails toward the (unchanged) live teacher.
        let shadow_after: Vec<f64> =
            learner.ema.as_ref().unwrap().shadow.params()[0].data.to_vec();
        assert_ne!(shadow_before, shadow_after);
        assert_eq!(learner.updates_done, 1);
        assert_eq!(metrics.update, 0);
        assert!(metrics.total_loss.is_finite());
    }

    #[test]
    fn distillation_targets_are_detached_from_the_live_teacher() {
        // Same seeds, same data; only λ_D differs. Because targets come from
        // the frozen shadow, the teacher-critic gradient must be identical.
        let l0 = teacher_learner(0.0, ConditioningMode::Film, 43);
        let mut l1 = teacher_learner(1.0, ConditioningMode::Film, 43);
        l1.cfg.distill_coef = 1.0;
        let batch = spread_batch(&l0, 1, 44);
        let t0 = l0.prepare_targets(&batch).unwrap();
        let t1 = l1.prepare_targets(&batch).unwrap();

        let denoms0 = l0.denoms_for(&[&batch.episodes[0]]);
        let (a0, c0, _) = l0.episode_pass(&batch.episodes[0], &t0[0], denoms0).unwrap();
        let denoms1 = l1.denoms_for(&[&batch.episodes[0]]);
        let (a1, c1, _) = l1.episode_pass(&batch.episodes[0], &t1[0], denoms1).unwrap();

        for (p0, p1) in c0.params().iter().zip(c1.params().iter()) {
            assert_eq!(p0.data, p1.data, "teacher gradients must not see λ_D");
        }
        // The actor's context head, by contrast, must feel the distillation.
        // (Under full modulation it also gets policy gradients, so the λ_D = 0
        // gradient is nonzero — the two just cannot coincide.)
        let find = |net: &ActorNet, name: &str| -> Vec<f64> {
            net.params()
                .iter()
                .find(|p| p.name == name)
                .map(|p| p.data.to_vec())
                .unwrap()
        };
        let w0 = find(&a0, "ctx.context.w");
        let w1 = find(&a1, "ctx.context.w");
        assert_ne!(w0, w1);
    }

    #[test]
    fn gate_off_learner_matches_bare_actor_gradients_exactly() {
        // An actor whose gate is forced off must produce bit-identical
        // gradients on the shared trunk/GRU/policy parameters to an actor
        // without the context machinery at all (given λ_D = 0).
        let seed = 47;
        let gated = ActorNet::new(
            actor_cfg(true, false, ConditioningMode::GateOff),
            &mut stream(seed, "init", 0),
        );
        let mut bare = ActorNet::new(
            actor_cfg(false, false, ConditioningMode::Film),
            &mut stream(seed, "init", 2),
        );
        bare.trunk = gated.trunk.clone();
        bare.gru = gated.gru.clone();
        bare.policy = gated.policy.clone();

        let critic = || Critic::Padded(crate::teacher::PaddedCritic::new(22, 4, &[10], &mut stream(seed, "init", 1)));
        let cfg = LearnerConfig { distill_coef: 0.0, ..Default::default() };
        let lg = Learner::new(gated, critic(), cfg.clone(), ExecMode::Sequential, seed);
        let lb = Learner::new(bare, critic(), cfg, ExecMode::Sequential, seed);

        let batch = spread_batch(&lg, 1, 48);
        let tg = lg.prepare_targets(&batch).unwrap();
        let tb = lb.prepare_targets(&batch).unwrap();
        let d = lg.denoms_for(&[&batch.episodes[0]]);
        let (ag, _, _) = lg.episode_pass(&batch.episodes[0], &tg[0], d).unwrap();
        let (ab, _, _) = lb.episode_pass(&batch.episodes[0], &tb[0], d).unwrap();

        for pb in ab.params() {
            let pg = ag.params().iter().find(|p| p.name == pb.name).map(|p| p.data.to_vec()).unwrap();
            for (x, y) in pb.data.iter().zip(&pg) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {}", pb.name);
            }
        }
        // And the context machinery receives exactly zero gradient.
        for p in ag.params() {
            if p.name.starts_with("ctx.") {
                assert!(p.data.iter().all(|&v| v == 0.0), "param {}", p.name);
            }
        }
    }

    #[test]
    fn sequential_and_parallel_updates_are_bit_identical() {
        let mut seq = teacher_learner(0.3, ConditioningMode::Film, 49);
        let mut par = teacher_learner(0.3, ConditioningMode::Film, 49);
        par.exec = ExecMode::Parallel;
        let batch = spread_batch(&seq, 3, 50);
        seq.update(&batch).unwrap();
        par.update(&batch).unwrap();
        for (a, b) in seq.actor.params().iter().zip(par.actor.params().iter()) {
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {}", a.name);
            }
        }
        for (a, b) in seq.critic.params().iter().zip(par.critic.params().iter()) {
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {}", a.name);
            }
        }
    }

    #[test]
    fn non_finite_parameters_abort_the_update() {
        let mut learner = teacher_learner(0.0, ConditioningMode::Film, 51);
        let batch = spread_batch(&learner, 1, 52);
        // Poison one trunk weight; the forward pass then yields non-finite
        // logits, which must surface as an error instead of corrupting state.
        learner.actor.params_mut()[0].data[0] = f64::NAN;
        let err = learner.update(&batch).unwrap_err();
        match err {
            LearnerError::Policy(_) | LearnerError::NonFinite { .. } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn local_value_actor_trains_against_its_own_head() {
        let actor = ActorNet::new(actor_cfg(false, true, ConditioningMode::Film), &mut stream(53, "init", 0));
        let cfg = LearnerConfig { minibatch_pairs: 32, epochs: 2, ..Default::default() };
        let mut learner = Learner::new(actor, Critic::Local, cfg, ExecMode::Sequential, 53);
        let batch = spread_batch(&learner, 2, 54);
        let before: Vec<f64> = learner.actor.params()[0].data.to_vec();
        let metrics = learner.update(&batch).unwrap();
        assert!(metrics.value_loss > 0.0);
        assert!(metrics.total_loss.is_finite());
        let after: Vec<f64> = learner.actor.params()[0].data.to_vec();
        assert_ne!(before, after, "training must move the trunk");
    }

    #[test]
    fn mismatched_value_layout_is_rejected() {
        // Episodes collected with a centralized estimator, consumed by a
        // local-critic learner.
        let central = teacher_learner(0.0, ConditioningMode::Film, 55);
        let batch = spread_batch(&central, 1, 56);
        let actor = ActorNet::new(actor_cfg(false, true, ConditioningMode::Film), &mut stream(55, "init", 9));
        let mut local = Learner::new(actor, Critic::Local, LearnerConfig::default(), ExecMode::Sequential, 55);
        let err = local.update(&batch).unwrap_err();
        assert!(matches!(err, LearnerError::ValueLayout(_)));
    }

    /// Finite differences on the actor-side terms (surrogate, entropy,
    /// distillation) with the value term switched off so the loss magnitude
    /// stays O(1) and central differences keep their precision.
    #[test]
    fn actor_objective_gradients_match_finite_differences() {
        use rand::Rng;
        let mut learner = teacher_learner(0.37, ConditioningMode::Film, 57);
        learner.cfg.value_coef = 0.0;
        // Separate the shadow from the live teacher so the distillation term
        // is non-trivial.
        if let Some(ema) = &mut learner.ema {
            let mut rng = stream(58, "shadow", 0);
            for p in ema.shadow.params_mut().iter_mut() {
                for v in p.data.iter_mut() {
                    *v += rng.gen_range(-0.05..0.05);
                }
            }
        }
        let batch = spread_batch(&learner, 1, 59);
        let targets = learner.prepare_targets(&batch).unwrap();
        let denoms = learner.denoms_for(&[&batch.episodes[0]]);
        let (ag, _, _) = learner
            .episode_pass(&batch.episodes[0], &targets[0], denoms)
            .unwrap();
        let analytic: Vec<Vec<f64>> = ag.params().iter().map(|p| p.data.to_vec()).collect();

        let mut rng = stream(60, "fd", 0);
        let mut worst = 0.0f64;
        for a in 0..analytic.len() {
            let len = analytic[a].len();
            for _ in 0..4usize.min(len) {
                let i = rng.gen_range(0..len);
                let orig = learner.actor.params()[a].data[i];
                let h = 1e-6 * orig.abs().max(1.0);
                learner.actor.params_mut()[a].data[i] = orig + h;
                let fp = learner.minibatch_loss(&[&batch.episodes[0]], &[&targets[0]], denoms);
                learner.actor.params_mut()[a].data[i] = orig - h;
                let fm = learner.minibatch_loss(&[&batch.episodes[0]], &[&targets[0]], denoms);
                learner.actor.params_mut()[a].data[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic[a][i];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "max rel err {worst}");
    }

    /// Finite differences on the centralized value term through the teacher
    /// critic (large gradients, so the big loss magnitude is harmless).
    #[test]
    fn value_objective_gradients_match_finite_differences() {
        use rand::Rng;
        let learner = teacher_learner(0.0, ConditioningMode::Film, 63);
        let batch = spread_batch(&learner, 1, 64);
        let targets = learner.prepare_targets(&batch).unwrap();
        let denoms = learner.denoms_for(&[&batch.episodes[0]]);
        let (_, cg, _) = learner
            .episode_pass(&batch.episodes[0], &targets[0], denoms)
            .unwrap();
        let analytic: Vec<Vec<f64>> = cg.params().iter().map(|p| p.data.to_vec()).collect();

        let mut learner = learner;
        let mut rng = stream(65, "fd", 0);
        let mut worst = 0.0f64;
        for a in 0..analytic.len() {
            let len = analytic[a].len();
            for _ in 0..4usize.min(len) {
                let i = rng.gen_range(0..len);
                let orig = learner.critic.params()[a].data[i];
                let h = 1e-6 * orig.abs().max(1.0);
                learner.critic.params_mut()[a].data[i] = orig + h;
                let fp = learner.minibatch_loss(&[&batch.episodes[0]], &[&targets[0]], denoms);
                learner.critic.params_mut()[a].data[i] = orig - h;
                let fm = learner.minibatch_loss(&[&batch.episodes[0]], &[&targets[0]], denoms);
                learner.critic.params_mut()[a].data[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic[a][i];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-4);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "max rel err {worst}");
    }

    #[test]
    fn training_reduces_value_error_on_a_fixed_batch() {
        // Repeatedly updating on the same batch must drive the critic toward
        // the frozen return targets.
        let mut learner = teacher_learner(0.0, ConditioningMode::Film, 61);
        learner.cfg.entropy_coef = 0.0;
        learner.cfg.lr = 3e-3;
        learner.opt.lr = 3e-3;
        let batch = spread_batch(&learner, 2, 62);
        let first = learner.update(&batch).unwrap();
        let mut last = first.clone();
        for _ in 0..12 {
            last = learner.update(&batch).unwrap();
        }
        assert!(
            last.value_loss < first.value_loss,
            "value loss should fall: {} -> {}",
            first.value_loss,
            last.value_loss
        );
    }
}
