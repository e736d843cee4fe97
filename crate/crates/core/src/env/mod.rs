//! Variable-roster cooperative environments.
//!
//! Every template produces teams of a configurable size `n` drawn from an
//! admissible range, while keeping the per-agent observation width and the
//! action set fixed across rosters (missing slots are zero-padded and marked
//! with presence flags). All agents of a team receive one identical scalar
//! reward per step, and every environment is a pure function of its reset
//! RNG plus the action sequence, so episodes replay bit-for-bit.

pub mod lbf;
pub mod rware;
pub mod spread;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use lbf::LbfParams;
use rware::RwareParams;
use spread::SpreadParams;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown environment template `{0}`")]
    UnknownTemplate(String),
    #[error("template `{template}` does not admit a roster of {roster} (admissible {lo}..={hi})")]
    InadmissibleRoster { template: String, roster: usize, lo: usize, hi: usize },
    #[error("template `rware-adapter` needs an external warehouse backend; none is bundled")]
    AdapterNotBundled,
}

/// Output of one environment step.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// Per-agent observations, each of the template's fixed width.
    pub observations: Vec<Vec<f64>>,
    /// Shared team reward; every agent receives this same scalar.
    pub team_reward: f64,
    /// Whether the episode has ended (task solved or horizon reached).
    pub done: bool,
}

/// A cooperative environment instance with a fixed roster for its lifetime.
pub trait Env: Send {
    fn roster(&self) -> usize;
    fn obs_width(&self) -> usize;
    fn action_count(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Starts a fresh episode; the layout is a function of `rng` alone.
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<Vec<f64>>;
    /// Advances one step given one action index per agent.
    fn step(&mut self, actions: &[usize]) -> StepResult;
}

/// Static description of a template, independent of any roster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvTemplateSpec {
    pub id: String,
    /// Inclusive admissible roster range.
    pub roster_lo: usize,
    pub roster_hi: usize,
    pub obs_width: usize,
    pub action_count: usize,
    pub horizon: usize,
    /// Divide team returns by the roster size when reporting.
    pub normalize_return_by_roster: bool,
    /// Multiplier applied to returns in human-facing tables.
    pub report_scale: f64,
}

impl EnvTemplateSpec {
    pub fn admits(&self, roster: usize) -> bool {
        (self.roster_lo..=self.roster_hi).contains(&roster)
    }

    /// Roster size feature used by size-conditioned critics, scaled to (0, 1].
    pub fn size_feature(&self, roster: usize) -> f64 {
        roster as f64 / self.roster_hi as f64
    }

    /// Converts a raw team return into reporting units.
    pub fn report_return(&self, team_return: f64, roster: usize) -> f64 {
        let normalized = if self.normalize_return_by_roster {
            team_return / roster as f64
        } else {
            team_return
        };
        normalized * self.report_scale
    }
}

/// The environment registry, keyed by template id in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case")]
pub enum TaskSpec {
    /// Continuous coverage: spread out to cover as many landmarks as agents.
    Spread(SpreadParams),
    /// Grid-world level-based foraging.
    Lbf(LbfParams),
    /// Bridge to an external multi-robot warehouse simulator.
    RwareAdapter(RwareParams),
}

/// Template ids accepted by [`TaskSpec::from_id`].
pub const TEMPLATE_IDS: [&str; 3] = ["spread", "lbf", "rware-adapter"];

impl TaskSpec {
    /// A template with default task parameters.
    pub fn from_id(id: &str) -> Result<Self, EnvError> {
        match id {
            "spread" => Ok(TaskSpec::Spread(SpreadParams::default())),
            "lbf" => Ok(TaskSpec::Lbf(LbfParams::default())),
            "rware-adapter" => Ok(TaskSpec::RwareAdapter(RwareParams::default())),
            other => Err(EnvError::UnknownTemplate(other.to_string())),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            TaskSpec::Spread(_) => "spread",
            TaskSpec::Lbf(_) => "lbf",
            TaskSpec::RwareAdapter(_) => "rware-adapter",
        }
    }

    pub fn template_spec(&self) -> EnvTemplateSpec {
        match self {
            TaskSpec::Spread(p) => EnvTemplateSpec {
                id: "spread".into(),
                roster_lo: 1,
                roster_hi: 10,
                obs_width: spread::OBS_WIDTH,
                action_count: spread::ACTION_COUNT,
                horizon: p.horizon,
                normalize_return_by_roster: false,
                report_scale: 1.0,
            },
            TaskSpec::Lbf(p) => EnvTemplateSpec {
                id: "lbf".into(),
                roster_lo: 2,
                roster_hi: 8,
                obs_width: lbf::OBS_WIDTH,
                action_count: lbf::ACTION_COUNT,
                horizon: p.horizon,
                normalize_return_by_roster: true,
                report_scale: 100.0,
            },
            TaskSpec::RwareAdapter(p) => EnvTemplateSpec {
                id: "rware-adapter".into(),
                roster_lo: 2,
                roster_hi: 10,
                obs_width: p.obs_width,
                action_count: p.action_count,
                horizon: p.horizon,
                normalize_return_by_roster: false,
                report_scale: 1.0,
            },
        }
    }

    /// Instantiates the template for a given roster size.
    pub fn make(&self, roster: usize) -> Result<Box<dyn Env>, EnvError> {
        let spec = self.template_spec();
        if !spec.admits(roster) {
            return Err(EnvError::InadmissibleRoster {
                template: spec.id,
                roster,
                lo: spec.roster_lo,
                hi: spec.roster_hi,
            });
        }
        match self {
            TaskSpec::Spread(p) => Ok(Box::new(spread::SpreadEnv::new(roster, p.clone()))),
            TaskSpec::Lbf(p) => Ok(Box::new(lbf::LbfEnv::new(roster, p.clone()))),
            // The warehouse template only describes how a backend plugs in;
            // no simulator ships with this crate.
            TaskSpec::RwareAdapter(_) => Err(EnvError::AdapterNotBundled),
        }
    }
}

/// Team return divided by roster size, for cross-roster comparisons.
pub fn normalized_return(team_return: f64, roster: usize) -> f64 {
    team_return / roster as f64
}
