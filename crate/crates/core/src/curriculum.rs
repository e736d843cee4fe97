//! Roster curricula and train/validation/test roster splits.
//!
//! Training proceeds through stages: each stage owns a fraction of the total
//! episode budget and a categorical distribution over admissible roster
//! counts. Later stages widen the distribution toward larger teams. Splits
//! partition roster counts so that evaluation can ask for team sizes the
//! policy never saw — the held-out counts — separately from the training ones.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for fraction / probability sums.
const SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum CurriculumError {
    #[error("curriculum has no stages")]
    Empty,
    #[error("stage {0}: counts and probabilities differ in length")]
    LengthMismatch(usize),
    #[error("stage {0}: no roster counts")]
    NoCounts(usize),
    #[error("stage {0}: probabilities sum to {1}, expected 1")]
    ProbabilitySum(usize, f64),
    #[error("stage {0}: negative probability")]
    NegativeProbability(usize),
    #[error("stage fractions sum to {0}, expected 1")]
    FractionSum(f64),
    #[error("stage {0}: non-positive episode fraction")]
    NonPositiveFraction(usize),
    #[error("roster count {0} appears in more than one split")]
    OverlappingSplits(usize),
    #[error("roster count {0} is not in any split")]
    UnsplitCount(usize),
}

/// One curriculum stage: a share of the episode budget plus a categorical
/// distribution over roster counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumStage {
    /// Fraction of `total_episodes` spent in this stage.
    pub fraction: f64,
    /// Roster counts this stage can draw.
    pub counts: Vec<usize>,
    /// Sampling probability per count, aligned with `counts`.
    pub probs: Vec<f64>,
}

impl CurriculumStage {
    pub fn new(fraction: f64, counts: &[usize], probs: &[f64]) -> Self {
        Self { fraction, counts: counts.to_vec(), probs: probs.to_vec() }
    }
}

/// Checks stage-level and schedule-level consistency.
pub fn validate_stages(stages: &[CurriculumStage]) -> Result<(), CurriculumError> {
    if stages.is_empty() {
        return Err(CurriculumError::Empty);
    }
    for (s, stage) in stages.iter().enumerate() {
        if stage.counts.is_empty() {
            return Err(CurriculumError::NoCounts(s));
        }
        if stage.counts.len() != stage.probs.len() {
            return Err(CurriculumError::LengthMismatch(s));
        }
        if stage.probs.iter().any(|&p| p < 0.0) {
            return Err(CurriculumError::NegativeProbability(s));
        }
        let sum: f64 = stage.probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(CurriculumError::ProbabilitySum(s, sum));
        }
        if stage.fraction <= 0.0 {
            return Err(CurriculumError::NonPositiveFraction(s));
        }
    }
    let frac_sum: f64 = stages.iter().map(|s| s.fraction).sum();
    if (frac_sum - 1.0).abs() > SUM_TOL {
        return Err(CurriculumError::FractionSum(frac_sum));
    }
    Ok(())
}

/// Maps an episode index to its stage. Stage `s` covers episodes in
/// `[round(c_{s-1}·total), round(c_s·total))` where `c_s` is the cumulative
/// fraction; the final stage absorbs any rounding remainder.
pub fn stage_for_episode(episode: usize, total_episodes: usize, stages: &[CurriculumStage]) -> usize {
    debug_assert!(episode < total_episodes);
    let mut cum = 0.0;
    for (s, stage) in stages.iter().enumerate() {
        cum += stage.fraction;
        let boundary = (cum * total_episodes as f64).round() as usize;
        if episode < boundary {
            return s;
        }
    }
    stages.len() - 1
}

/// Draws a roster count from the stage's categorical distribution.
pub fn sample_roster(stage: &CurriculumStage, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (&count, &p) in stage.counts.iter().zip(&stage.probs) {
        cum += p;
        if u < cum {
            return count;
        }
    }
    *stage.counts.last().unwrap()
}

/// Which split a roster count belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Disjoint partition of roster counts into train / validation / test.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterSplit {
    pub train: BTreeSet<usize>,
    pub validation: BTreeSet<usize>,
    pub test: BTreeSet<usize>,
}

impl RosterSplit {
    pub fn new(train: &[usize], validation: &[usize], test: &[usize]) -> Self {
        Self {
            train: train.iter().copied().collect(),
            validation: validation.iter().copied().collect(),
            test: test.iter().copied().collect(),
        }
    }

    /// Errors if any count appears in two splits.
    pub fn validate(&self) -> Result<(), CurriculumError> {
        for &c in &self.train {
            if self.validation.contains(&c) || self.test.contains(&c) {
                return Err(CurriculumError::OverlappingSplits(c));
            }
        }
        for &c in &self.validation {
            if self.test.contains(&c) {
                return Err(CurriculumError::OverlappingSplits(c));
            }
        }
        Ok(())
    }

    /// The split containing `count`, or an error if it is in none.
    pub fn membership(&self, count: usize) -> Result<Split, CurriculumError> {
        if self.train.contains(&count) {
            Ok(Split::Train)
        } else if self.validation.contains(&count) {
            Ok(Split::Validation)
        } else if self.test.contains(&count) {
            Ok(Split::Test)
        } else {
            Err(CurriculumError::UnsplitCount(count))
        }
    }

    pub fn counts(&self, split: Split) -> &BTreeSet<usize> {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    /// All counts across the three splits, ascending.
    pub fn all_counts(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .copied()
            .collect();
        v.sort_unstable();
        v
    }
}
