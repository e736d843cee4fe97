//! Run configuration: presets, file loading, validation, and model assembly.
//!
//! A [`RunConfig`] pins everything a training run needs — task template,
//! method, ablation switch, seed, budgets, optimizer settings, network
//! shapes, curriculum, and roster splits. Configs come from named presets
//! (`spread-paper`, `lbf-paper`, `rware-paper`, `spread-desk`) that a TOML
//! file extends with a method, a seed, and optional overrides. Validation
//! errors are reported before any run state is created so the harness can
//! exit with a configuration failure rather than a runtime one.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curriculum::{validate_stages, CurriculumError, CurriculumStage, RosterSplit};
use crate::env::TaskSpec;
use crate::exec::ExecMode;
use crate::learner::{Critic, Learner, LearnerConfig};
use crate::policy::{ActorConfig, ActorNet, ConditioningMode};
use crate::rng::stream;
use crate::teacher::{MeanPoolCritic, PaddedCritic, SetTeacherCritic, TeacherConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown preset `{0}` (available: spread-paper, lbf-paper, rware-paper, spread-desk)")]
    UnknownPreset(String),
    #[error("could not read config file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error("ablation `{ablation}` applies only to {required}, got method `{method}`")]
    AblationMethod { ablation: &'static str, required: &'static str, method: &'static str },
    #[error("curriculum stage {stage} draws roster {count}, which is not in the training split")]
    CurriculumOutsideTrain { stage: usize, count: usize },
    #[error("{split} split contains roster {count}, outside the template's range {lo}..={hi}")]
    SplitOutsideTemplate { split: &'static str, count: usize, lo: usize, hi: usize },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Method and ablation switches
// ---------------------------------------------------------------------------

/// Which learner family to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Independent learners: each agent bootstraps from its own value head.
    Ippo,
    /// Shared actor with a padded joint-observation critic.
    Mappo,
    /// Shared actor with a permutation-invariant mean-pooled critic.
    Pic,
    /// Set-structured teacher critic distilled into the actors (FiLM head).
    Pc3d,
    /// Same as `pc3d`, but conditioning via a hypernetwork correction of the
    /// policy head instead of feature-wise modulation.
    HyperPc3d,
}

/// All methods, in reporting order.
pub const METHODS: [Method; 5] =
    [Method::Ippo, Method::Mappo, Method::Pic, Method::Pc3d, Method::HyperPc3d];

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ippo => "ippo",
            Method::Mappo => "mappo",
            Method::Pic => "pic",
            Method::Pc3d => "pc3d",
            Method::HyperPc3d => "hyper-pc3d",
        }
    }

    pub fn from_name(name: &str) -> Option<Method> {
        METHODS.into_iter().find(|m| m.name() == name)
    }

    /// Whether the actor carries the context / reliance / modulation stack.
    pub fn has_context(self) -> bool {
        matches!(self, Method::Pc3d | Method::HyperPc3d)
    }

    /// Whether a centralized critic is trained alongside the actor.
    pub fn centralized(self) -> bool {
        !matches!(self, Method::Ippo)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Surgical switches for the context-distillation stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Pin the reliance gate to 0: modulation structurally present but inert.
    GateOff,
    /// Pin the reliance gate to 1: modulation always fully applied.
    GateOn,
    /// Keep the architecture but train without the distillation loss.
    NoDistill,
}

/// Ablations in reporting order (the identity row first).
pub const ABLATIONS: [Ablation; 4] =
    [Ablation::None, Ablation::GateOff, Ablation::GateOn, Ablation::NoDistill];

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::GateOff => "gate_off",
            Ablation::GateOn => "gate_on",
            Ablation::NoDistill => "no_distill",
        }
    }

    pub fn from_name(name: &str) -> Option<Ablation> {
        ABLATIONS.into_iter().find(|a| a.name() == name)
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// ---------------------------------------------------------------------------
// Shape sections
// ---------------------------------------------------------------------------

/// Actor network shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorShape {
    /// Widths of the tanh trunk between observation and the recurrent cell.
    pub mlp_widths: Vec<usize>,
    pub rnn_dim: usize,
}

/// Centralized-critic shape. `value_widths` applies to every centralized
/// critic; the embedding fields matter only for the pooled and set-structured
/// ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticShape {
    /// Hidden widths of the value head.
    pub value_widths: Vec<usize>,
    /// Per-agent embedding / token / context dimensionality `d`.
    pub embed_dim: usize,
    /// Hidden widths of the shared per-agent encoder.
    pub phi_widths: Vec<usize>,
    /// Number of coordination tokens `K` (set-structured critic only).
    pub tokens: usize,
    /// Append the normalized roster size to the value-head input.
    pub size_feature: bool,
}

/// Student-side context read-out parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextShape {
    /// Hard clip range for the reliance scalar.
    pub rho_min: f64,
    pub rho_max: f64,
    /// Hidden width of the hypernetwork conditioner (hyper variant only).
    pub hyper_hidden: usize,
}

// ---------------------------------------------------------------------------
// The full run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub method: Method,
    pub ablation: Ablation,
    pub seed: u64,
    /// Total training episodes.
    pub episodes: usize,
    /// Run one optimizer update per this many collected episodes.
    pub update_every: usize,
    /// Safety cap on buffered (agent, step) pairs; the newest whole episodes
    /// are kept when it binds.
    pub buffer_pairs: usize,
    /// Greedy evaluation rollouts per roster count.
    pub eval_rollouts: usize,
    /// Rollouts per roster count for context-alignment diagnostics.
    pub diag_rollouts: usize,
    /// Write a checkpoint every this many updates (the final state is always
    /// written).
    pub checkpoint_every: usize,
    pub learner: LearnerConfig,
    pub actor: ActorShape,
    pub critic: CriticShape,
    pub context: ContextShape,
    pub curriculum: Vec<CurriculumStage>,
    pub splits: RosterSplit,
    /// Execution mode; excluded from the fingerprint because both modes
    /// produce bit-identical results.
    #[serde(default)]
    pub exec: ExecMode,
}

impl RunConfig {
    /// The conditioning mode the actor is actually built with, after
    /// resolving the ablation switch.
    pub fn effective_mode(&self) -> ConditioningMode {
        match (self.method, self.ablation) {
            (Method::HyperPc3d, _) => ConditioningMode::Hyper,
            (_, Ablation::GateOff) => ConditioningMode::GateOff,
            (_, Ablation::GateOn) => ConditioningMode::GateOn,
            _ => ConditioningMode::Film,
        }
    }

    /// Learner settings after resolving method and ablation: only the
    /// context-carrying methods distill, and `no_distill` forces the weight
    /// to zero while keeping the architecture.
    pub fn effective_learner(&self) -> LearnerConfig {
        let mut lc = self.learner.clone();
        if !self.method.has_context() || self.ablation == Ablation::NoDistill {
            lc.distill_coef = 0.0;
        }
        lc
    }

    /// Checks internal consistency. Everything caught here is a
    /// configuration error, reported before any run state exists.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.ablation != Ablation::None && !self.method.has_context() {
            return Err(ConfigError::AblationMethod {
                ablation: self.ablation.name(),
                required: "pc3d or hyper-pc3d",
                method: self.method.name(),
            });
        }
        // Gate pinning is defined on the feature-wise modulation path; the
        // hypernetwork variant only supports the distillation ablation.
        if matches!(self.ablation, Ablation::GateOff | Ablation::GateOn)
            && self.method == Method::HyperPc3d
        {
            return Err(ConfigError::AblationMethod {
                ablation: self.ablation.name(),
                required: "pc3d",
                method: self.method.name(),
            });
        }

        validate_stages(&self.curriculum)?;
        self.splits.validate()?;
        for (s, stage) in self.curriculum.iter().enumerate() {
            for &count in &stage.counts {
                if !self.splits.train.contains(&count) {
                    return Err(ConfigError::CurriculumOutsideTrain { stage: s, count });
                }
            }
        }
        let spec = self.task.template_spec();
        let splits: [(&str, &BTreeSet<usize>); 3] = [
            ("train", &self.splits.train),
            ("validation", &self.splits.validation),
            ("test", &self.splits.test),
        ];
        for (name, counts) in splits {
            for &count in counts {
                if !spec.admits(count) {
                    return Err(ConfigError::SplitOutsideTemplate {
                        split: name,
                        count,
                        lo: spec.roster_lo,
                        hi: spec.roster_hi,
                    });
                }
            }
        }
        if self.splits.train.is_empty() {
            return Err(ConfigError::Invalid("training split is empty".into()));
        }

        let check = |ok: bool, msg: &str| -> Result<(), ConfigError> {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Invalid(msg.into()))
            }
        };
        check(self.episodes > 0, "episodes must be positive")?;
        check(self.update_every > 0, "update_every must be positive")?;
        check(self.buffer_pairs > 0, "buffer_pairs must be positive")?;
        check(self.eval_rollouts > 0, "eval_rollouts must be positive")?;
        check(self.diag_rollouts > 0, "diag_rollouts must be positive")?;
        check(self.checkpoint_every > 0, "checkpoint_every must be positive")?;
        check(self.learner.lr > 0.0, "learning rate must be positive")?;
        check(self.learner.minibatch_pairs > 0, "minibatch_pairs must be positive")?;
        check(self.learner.epochs > 0, "epochs must be positive")?;
        check(self.learner.clip > 0.0, "clip range must be positive")?;
        check(
            self.learner.gamma > 0.0 && self.learner.gamma <= 1.0,
            "gamma must lie in (0, 1]",
        )?;
        check(
            (0.0..=1.0).contains(&self.learner.gae_lambda),
            "gae_lambda must lie in [0, 1]",
        )?;
        check(self.learner.entropy_coef >= 0.0, "entropy_coef must be non-negative")?;
        check(self.learner.value_coef > 0.0, "value_coef must be positive")?;
        check(self.learner.max_grad_norm > 0.0, "max_grad_norm must be positive")?;
        check(self.learner.distill_coef >= 0.0, "distill_coef must be non-negative")?;
        check(
            (0.0..=1.0).contains(&self.learner.ema_tau),
            "ema_tau must lie in [0, 1]",
        )?;
        check(self.context.rho_min < self.context.rho_max, "rho_min must be below rho_max")?;
        check(!self.actor.mlp_widths.is_empty(), "actor needs at least one trunk layer")?;
        check(self.actor.rnn_dim > 0, "rnn_dim must be positive")?;
        if self.learner.distill_coef > 0.0 && !self.method.has_context() {
            return Err(ConfigError::Invalid(
                "distill_coef > 0 requires a context-carrying method".into(),
            ));
        }
        if self.method.has_context() {
            check(self.critic.embed_dim > 0, "embed_dim must be positive")?;
            check(self.critic.tokens > 0, "tokens must be positive")?;
        }
        if self.method == Method::HyperPc3d {
            check(self.context.hyper_hidden > 0, "hyper_hidden must be positive")?;
        }
        Ok(())
    }

    /// Content hash of everything that affects results. The execution mode
    /// is normalized away: sequential and parallel runs are bit-identical,
    /// so their checkpoints must interchange.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.exec = ExecMode::Sequential;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        crate::checkpoint::fingerprint(&json)
    }

    /// Directory-friendly run label: `method[+ablation]-seed<k>`.
    pub fn run_label(&self) -> String {
        if self.ablation == Ablation::None {
            format!("{}-seed{}", self.method, self.seed)
        } else {
            format!("{}+{}-seed{}", self.method, self.ablation, self.seed)
        }
    }

    /// Builds the actor configuration implied by this run.
    pub fn actor_config(&self) -> ActorConfig {
        let spec = self.task.template_spec();
        let with_context = self.method.has_context();
        ActorConfig {
            obs_width: spec.obs_width,
            action_count: spec.action_count,
            mlp_widths: self.actor.mlp_widths.clone(),
            rnn_dim: self.actor.rnn_dim,
            context_dim: if with_context { self.critic.embed_dim } else { 0 },
            rho_min: self.context.rho_min,
            rho_max: self.context.rho_max,
            mode: self.effective_mode(),
            local_value: !self.method.centralized(),
            with_context,
            hyper_hidden: self.context.hyper_hidden,
        }
    }

    /// Instantiates the full learner (actor, critic, optimizer) for this
    /// configuration. Initialization draws from streams derived from the
    /// seed, so two builds of the same config are bit-identical.
    pub fn build(&self) -> Result<Learner, ConfigError> {
        self.validate()?;
        let spec = self.task.template_spec();
        let mut actor_rng = stream(self.seed, "init-actor", 0);
        let actor = ActorNet::new(self.actor_config(), &mut actor_rng);

        let mut critic_rng = stream(self.seed, "init-critic", 0);
        let critic = match self.method {
            Method::Ippo => Critic::Local,
            Method::Mappo => Critic::Padded(PaddedCritic::new(
                spec.obs_width,
                spec.roster_hi,
                &self.critic.value_widths,
                &mut critic_rng,
            )),
            Method::Pic => Critic::MeanPool(MeanPoolCritic::new(
                spec.obs_width,
                self.critic.embed_dim,
                &self.critic.phi_widths,
                &self.critic.value_widths,
                self.critic.size_feature,
                spec.roster_hi,
                &mut critic_rng,
            )),
            Method::Pc3d | Method::HyperPc3d => Critic::SetTeacher(SetTeacherCritic::new(
                TeacherConfig {
                    obs_width: spec.obs_width,
                    embed_dim: self.critic.embed_dim,
                    phi_widths: self.critic.phi_widths.clone(),
                    tokens: self.critic.tokens,
                    value_widths: self.critic.value_widths.clone(),
                    size_feature: self.critic.size_feature,
                    max_roster: spec.roster_hi,
                },
                &mut critic_rng,
            )),
        };

        Ok(Learner::new(actor, critic, self.effective_learner(), self.exec, self.seed))
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Preset names accepted by [`preset`]; a bare task id aliases its `-paper`
/// preset.
pub const PRESETS: [&str; 4] = ["spread-paper", "lbf-paper", "rware-paper", "spread-desk"];

/// The tuned configuration for `(preset, method)`.
///
/// Within a task, the mappo / pic / pc3d rows share every optimizer and
/// actor setting and differ only in critic shape (plus the distillation
/// extras); ippo is tuned independently.
pub fn preset(name: &str, method: Method) -> Result<RunConfig, ConfigError> {
    let cfg = match name {
        "spread" | "spread-paper" => spread_paper(method),
        "lbf" | "lbf-paper" => lbf_paper(method),
        "rware" | "rware-paper" => rware_paper(method),
        "spread-desk" => spread_desk(method),
        other => return Err(ConfigError::UnknownPreset(other.to_string())),
    };
    debug_assert!(cfg.validate().is_ok(), "preset `{name}`/{method} must validate");
    Ok(cfg)
}

fn default_context() -> ContextShape {
    ContextShape { rho_min: -3.0, rho_max: 2.0, hyper_hidden: 64 }
}

fn spread_paper(method: Method) -> RunConfig {
    let (learner, actor) = match method {
        Method::Ippo => (
            LearnerConfig {
                lr: 1.46e-4,
                minibatch_pairs: 128,
                epochs: 6,
                clip: 0.25,
                gamma: 0.99,
                gae_lambda: 0.99,
                entropy_coef: 6.61e-4,
                value_coef: 0.5,
                max_grad_norm: 0.5,
                distill_coef: 0.0,
                ema_tau: 0.0,
            },
            ActorShape { mlp_widths: vec![96, 128, 128, 96], rnn_dim: 128 },
        ),
        _ => (
            LearnerConfig {
                lr: 1.84e-3,
                minibatch_pairs: 128,
                epochs: 8,
                clip: 0.15,
                gamma: 0.985,
                gae_lambda: 0.99,
                entropy_coef: 1.28e-3,
                value_coef: 0.25,
                max_grad_norm: 2.0,
                distill_coef: if method.has_context() { 0.257 } else { 0.0 },
                ema_tau: if method.has_context() { 0.02 } else { 0.0 },
            },
            ActorShape { mlp_widths: vec![128, 256, 128], rnn_dim: 128 },
        ),
    };
    let critic = match method {
        Method::Pic => CriticShape {
            value_widths: vec![128, 128],
            embed_dim: 48,
            phi_widths: vec![160, 96],
            tokens: 0,
            size_feature: false,
        },
        Method::Pc3d | Method::HyperPc3d => CriticShape {
            value_widths: vec![192, 160],
            embed_dim: 48,
            phi_widths: vec![96, 96],
            tokens: 4,
            size_feature: true,
        },
        // ippo ignores this section; mappo uses only the value widths.
        _ => CriticShape {
            value_widths: vec![128, 96],
            embed_dim: 0,
            phi_widths: vec![],
            tokens: 0,
            size_feature: false,
        },
    };
    RunConfig {
        task: TaskSpec::from_id("spread").unwrap(),
        method,
        ablation: Ablation::None,
        seed: 0,
        episodes: 20_000,
        update_every: if method == Method::Ippo { 2 } else { 8 },
        buffer_pairs: if method == Method::Ippo { 8192 } else { 200_000 },
        eval_rollouts: 100,
        diag_rollouts: 8,
        checkpoint_every: 100,
        learner,
        actor,
        critic,
        context: default_context(),
        curriculum: vec![
            CurriculumStage::new(0.133, &[1, 2], &[0.40, 0.60]),
            CurriculumStage::new(0.167, &[1, 2, 4], &[0.18, 0.27, 0.55]),
            CurriculumStage::new(0.200, &[1, 2, 4, 6], &[0.10, 0.15, 0.30, 0.45]),
            CurriculumStage::new(0.500, &[1, 2, 4, 6, 8], &[0.06, 0.09, 0.18, 0.27, 0.40]),
        ],
        splits: RosterSplit::new(&[1, 2, 4, 6, 8], &[3, 5, 7], &[9, 10]),
        exec: ExecMode::default(),
    }
}

fn lbf_paper(method: Method) -> RunConfig {
    let (learner, actor) = match method {
        Method::Ippo => (
            LearnerConfig {
                lr: 1.22e-3,
                minibatch_pairs: 128,
                epochs: 6,
                clip: 0.25,
                gamma: 0.99,
                gae_lambda: 0.95,
                entropy_coef: 8.24e-3,
                value_coef: 0.25,
                max_grad_norm: 5.0,
                distill_coef: 0.0,
                ema_tau: 0.0,
            },
            ActorShape { mlp_widths: vec![128, 256, 128], rnn_dim: 64 },
        ),
        _ => (
            LearnerConfig {
                lr: 4.63e-4,
                minibatch_pairs: 256,
                epochs: 8,
                clip: 0.25,
                gamma: 0.985,
                gae_lambda: 0.93,
                entropy_coef: 1.11e-2,
                value_coef: 2.0,
                max_grad_norm: 5.0,
                distill_coef: if method.has_context() { 0.0193 } else { 0.0 },
                ema_tau: if method.has_context() { 0.0025 } else { 0.0 },
            },
            ActorShape { mlp_widths: vec![64, 64], rnn_dim: 128 },
        ),
    };
    let critic = match method {
        Method::Pic => CriticShape {
            value_widths: vec![160, 128],
            embed_dim: 96,
            phi_widths: vec![96, 64],
            tokens: 0,
            size_feature: true,
        },
        Method::Pc3d | Method::HyperPc3d => CriticShape {
            value_widths: vec![160, 128],
            embed_dim: 48,
            phi_widths: vec![160, 96],
            tokens: 4,
            size_feature: true,
        },
        _ => CriticShape {
            value_widths: vec![160, 160],
            embed_dim: 0,
            phi_widths: vec![],
            tokens: 0,
            size_feature: false,
        },
    };
    RunConfig {
        task: TaskSpec::from_id("lbf").unwrap(),
        method,
        ablation: Ablation::None,
        seed: 0,
        episodes: 12_000,
        update_every: if method == Method::Ippo { 16 } else { 2 },
        buffer_pairs: if method == Method::Ippo { 8192 } else { 200_000 },
        eval_rollouts: 100,
        diag_rollouts: 8,
        checkpoint_every: 100,
        learner,
        actor,
        critic,
        context: ContextShape { rho_min: -2.0, rho_max: 1.5, hyper_hidden: 64 },
        curriculum: vec![
            CurriculumStage::new(0.20, &[2], &[1.0]),
            CurriculumStage::new(0.25, &[2, 4], &[0.35, 0.65]),
            CurriculumStage::new(0.25, &[2, 4, 6], &[0.15, 0.25, 0.60]),
            CurriculumStage::new(0.30, &[2, 4, 6], &[0.10, 0.20, 0.70]),
        ],
        splits: RosterSplit::new(&[2, 4, 6], &[3, 5], &[7, 8]),
        exec: ExecMode::default(),
    }
}

fn rware_paper(method: Method) -> RunConfig {
    let (learner, actor) = match method {
        Method::Ippo => (
            LearnerConfig {
                lr: 2.06e-4,
                minibatch_pairs: 64,
                epochs: 8,
                clip: 0.10,
                gamma: 0.97,
                gae_lambda: 0.97,
                entropy_coef: 2.49e-3,
                value_coef: 0.25,
                max_grad_norm: 1.0,
                distill_coef: 0.0,
                ema_tau: 0.0,
            },
            ActorShape { mlp_widths: vec![96, 128, 128, 96], rnn_dim: 192 },
        ),
        _ => (
            LearnerConfig {
                lr: 1.24e-4,
                minibatch_pairs: 64,
                epochs: 6,
                clip: 0.25,
                gamma: 0.99,
                gae_lambda: 0.97,
                entropy_coef: 2.34e-4,
                value_coef: 0.5,
                max_grad_norm: 10.0,
                distill_coef: if method.has_context() { 0.0154 } else { 0.0 },
                ema_tau: if method.has_context() { 0.0025 } else { 0.0 },
            },
            ActorShape { mlp_widths: vec![128, 256, 128], rnn_dim: 32 },
        ),
    };
    let critic = match method {
        Method::Pic => CriticShape {
            value_widths: vec![96, 96],
            embed_dim: 160,
            phi_widths: vec![48, 48],
            tokens: 0,
            size_feature: true,
        },
        Method::Pc3d | Method::HyperPc3d => CriticShape {
            value_widths: vec![96, 96],
            embed_dim: 96,
            phi_widths: vec![96, 96],
            tokens: 5,
            size_feature: false,
        },
        _ => CriticShape {
            value_widths: vec![128, 96],
            embed_dim: 0,
            phi_widths: vec![],
            tokens: 0,
            size_feature: false,
        },
    };
    RunConfig {
        task: TaskSpec::from_id("rware-adapter").unwrap(),
        method,
        ablation: Ablation::None,
        seed: 0,
        episodes: 20_000,
        update_every: if method == Method::Ippo { 8 } else { 1 },
        buffer_pairs: if method == Method::Ippo { 8192 } else { 200_000 },
        eval_rollouts: 100,
        diag_rollouts: 8,
        checkpoint_every: 100,
        learner,
        actor,
        critic,
        context: default_context(),
        curriculum: vec![
            CurriculumStage::new(0.20, &[2, 4], &[0.65, 0.35]),
            CurriculumStage::new(0.25, &[2, 4, 6], &[0.30, 0.20, 0.50]),
            CurriculumStage::new(0.25, &[2, 4, 6, 8], &[0.10, 0.15, 0.25, 0.50]),
            CurriculumStage::new(0.30, &[2, 4, 6, 8], &[0.05, 0.10, 0.20, 0.65]),
        ],
        splits: RosterSplit::new(&[2, 4, 6, 8], &[3, 5, 7], &[9, 10]),
        exec: ExecMode::default(),
    }
}

/// Small coverage-task setup for quick directional experiments: the tuned
/// coverage hyperparameters on a 2500-episode budget with tiny rosters,
/// training on teams of 1–3 and holding out teams of 4.
fn spread_desk(method: Method) -> RunConfig {
    let mut cfg = spread_paper(method);
    cfg.episodes = 2500;
    cfg.eval_rollouts = 50;
    cfg.curriculum = vec![
        CurriculumStage::new(0.30, &[1, 2], &[0.40, 0.60]),
        CurriculumStage::new(0.70, &[1, 2, 3], &[0.15, 0.25, 0.60]),
    ];
    cfg.splits = RosterSplit::new(&[1, 2, 3], &[], &[4]);
    cfg
}

// ---------------------------------------------------------------------------
// Config files
// ---------------------------------------------------------------------------

/// Optional per-field overrides of [`LearnerConfig`].
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerOverride {
    pub lr: Option<f64>,
    pub minibatch_pairs: Option<usize>,
    pub epochs: Option<usize>,
    pub clip: Option<f64>,
    pub gamma: Option<f64>,
    pub gae_lambda: Option<f64>,
    pub entropy_coef: Option<f64>,
    pub value_coef: Option<f64>,
    pub max_grad_norm: Option<f64>,
    pub distill_coef: Option<f64>,
    pub ema_tau: Option<f64>,
}

impl LearnerOverride {
    fn apply(&self, lc: &mut LearnerConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { lc.$f = v; } )* };
        }
        set!(
            lr,
            minibatch_pairs,
            epochs,
            clip,
            gamma,
            gae_lambda,
            entropy_coef,
            value_coef,
            max_grad_norm,
            distill_coef,
            ema_tau
        );
    }
}

/// A run description on disk: a preset extended with a method, a seed, and
/// optional overrides. Unknown keys are rejected so typos fail loudly.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: String,
    pub method: Method,
    #[serde(default)]
    pub ablation: Option<Ablation>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub episodes: Option<usize>,
    #[serde(default)]
    pub update_every: Option<usize>,
    #[serde(default)]
    pub buffer_pairs: Option<usize>,
    #[serde(default)]
    pub eval_rollouts: Option<usize>,
    #[serde(default)]
    pub diag_rollouts: Option<usize>,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub exec: Option<ExecMode>,
    #[serde(default)]
    pub learner: LearnerOverride,
}

impl ConfigFile {
    /// Resolves the file against its preset and validates the result.
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = preset(&self.preset, self.method)?;
        if let Some(a) = self.ablation {
            cfg.ablation = a;
        }
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        set!(seed, episodes, update_every, buffer_pairs, eval_rollouts, diag_rollouts, checkpoint_every, exec);
        self.learner.apply(&mut cfg.learner);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses and resolves a TOML run description.
pub fn from_toml_str(text: &str) -> Result<RunConfig, ConfigError> {
    let file: ConfigFile = toml::from_str(text)?;
    file.resolve()
}

/// Loads a run description from a file.
pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    from_toml_str(&text)
}
