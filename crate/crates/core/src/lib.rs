//! Cooperative multi-agent reinforcement learning with open team sizes.
//!
//! The crate trains recurrent, parameter-shared PPO actors on benchmark tasks
//! whose agent count varies between episodes, and evaluates how well the
//! resulting policies generalize to team sizes never seen during training.
//! Four method variants share one learner:
//!
//! * `ippo` — independent PPO with a local value head per agent,
//! * `mappo` — centralized critic over a padded, masked joint observation,
//! * `pic` — permutation-invariant critic (mean-pooled per-agent embeddings),
//! * `pc3d` — a set-structured teacher critic that builds coordination tokens
//!   via cross-attention and distills personalized context vectors into each
//!   decentralized actor, which consumes them through gated FiLM modulation
//!   (or a gated hypernetwork head).
//!
//! Everything is plain `f64` with hand-written backward passes, so runs are
//! bit-reproducible given a configuration and a master seed, and every
//! gradient is checkable against finite differences.

pub mod checkpoint;
pub mod config;
pub mod curriculum;
pub mod env;
pub mod exec;
pub mod harness;
pub mod learner;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod teacher;
