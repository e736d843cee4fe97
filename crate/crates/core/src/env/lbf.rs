//! Grid-world level-based foraging.
//!
//! Leveled agents roam a grid holding leveled food items. A food is
//! collected when the combined level of all adjacent agents that choose the
//! load action at the same time reaches the food's level, which makes the
//! larger items genuinely cooperative. Each collection pays the food's share
//! of the total food level, so a fully cleared episode returns exactly 1.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Env, StepResult};

/// Observation layout: own cell scaled to [0, 1] (2) + own level (1) + three
/// nearest visible foods (offset 2, level 1, presence 1 = 4 each) + three
/// nearest visible teammates (same 4 each).
pub const OBS_WIDTH: usize = 27;
/// no-op, four moves, load.
pub const ACTION_COUNT: usize = 6;
const SLOTS: usize = 3;
const LOAD: usize = 5;

fn default_grid() -> usize {
    10
}
fn default_sight() -> usize {
    2
}
fn default_horizon() -> usize {
    50
}
fn default_max_agent_level() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfParams {
    /// Side length of the square grid.
    pub grid_size: usize,
    /// Chebyshev visibility radius for foods and teammates.
    pub sight: usize,
    pub horizon: usize,
    /// Agent levels are drawn uniformly from 1..=max_agent_level.
    pub max_agent_level: u32,
}

impl Default for LbfParams {
    fn default() -> Self {
        Self {
            grid_size: default_grid(),
            sight: default_sight(),
            horizon: default_horizon(),
            max_agent_level: default_max_agent_level(),
        }
    }
}

/// Number of food items spawned for a roster of `n` agents.
pub fn food_count(n: usize) -> usize {
    match n {
        0..=3 => 2,
        4..=6 => 3,
        _ => 4,
    }
}

#[derive(Debug, Clone)]
struct Food {
    pos: (i32, i32),
    level: u32,
    collected: bool,
}

pub struct LbfEnv {
    params: LbfParams,
    n: usize,
    levels: Vec<u32>,
    pos: Vec<(i32, i32)>,
    foods: Vec<Food>,
    /// Sum of food levels at reset; the divisor of every collection reward.
    total_food_level: f64,
    t: usize,
}

impl LbfEnv {
    pub fn new(n: usize, params: LbfParams) -> Self {
        Self {
            params,
            n,
            levels: vec![1; n],
            pos: vec![(0, 0); n],
            foods: Vec::new(),
            total_food_level: 1.0,
            t: 0,
        }
    }

    fn in_bounds(&self, cell: (i32, i32)) -> bool {
        let g = self.params.grid_size as i32;
        cell.0 >= 0 && cell.0 < g && cell.1 >= 0 && cell.1 < g
    }

    fn cell_is_free(&self, cell: (i32, i32)) -> bool {
        !self.pos.contains(&cell) && !self.foods.iter().any(|f| !f.collected && f.pos == cell)
    }

    fn sample_free_cell(&self, rng: &mut dyn RngCore) -> (i32, i32) {
        let g = self.params.grid_size as i32;
        loop {
            let cell = (rng.gen_range(0..g), rng.gen_range(0..g));
            if self.cell_is_free(cell) {
                return cell;
            }
        }
    }

    /// Cap for food levels: the combined level of the three strongest agents,
    /// so every item is collectable by some subgroup.
    fn food_level_cap(&self) -> u32 {
        let mut lv = self.levels.clone();
        lv.sort_unstable_by(|a, b| b.cmp(a));
        lv.iter().take(3).sum::<u32>().max(1)
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.observe(i)).collect()
    }

    fn observe(&self, i: usize) -> Vec<f64> {
        let g1 = (self.params.grid_size - 1) as f64;
        let own = self.pos[i];
        let sight = self.params.sight as i32;
        let mut obs = Vec::with_capacity(OBS_WIDTH);
        obs.push(own.0 as f64 / g1);
        obs.push(own.1 as f64 / g1);
        obs.push(self.levels[i] as f64);

        let visible = |cell: (i32, i32)| {
            (cell.0 - own.0).abs() <= sight && (cell.1 - own.1).abs() <= sight
        };
        let sq = |cell: (i32, i32)| {
            let dr = (cell.0 - own.0) as f64;
            let dc = (cell.1 - own.1) as f64;
            dr * dr + dc * dc
        };

        let mut foods: Vec<usize> = (0..self.foods.len())
            .filter(|&f| !self.foods[f].collected && visible(self.foods[f].pos))
            .collect();
        foods.sort_by(|&a, &b| {
            sq(self.foods[a].pos)
                .partial_cmp(&sq(self.foods[b].pos))
                .unwrap()
                .then(a.cmp(&b))
        });
        foods.truncate(SLOTS);
        for slot in 0..SLOTS {
            if let Some(&f) = foods.get(slot) {
                let food = &self.foods[f];
                obs.push((food.pos.0 - own.0) as f64);
                obs.push((food.pos.1 - own.1) as f64);
                obs.push(food.level as f64);
                obs.push(1.0);
            } else {
                obs.extend_from_slice(&[0.0; 4]);
            }
        }

        let mut mates: Vec<usize> = (0..self.n)
            .filter(|&j| j != i && visible(self.pos[j]))
            .collect();
        mates.sort_by(|&a, &b| {
            sq(self.pos[a])
                .partial_cmp(&sq(self.pos[b]))
                .unwrap()
                .then(a.cmp(&b))
        });
        mates.truncate(SLOTS);
        for slot in 0..SLOTS {
            if let Some(&j) = mates.get(slot) {
                obs.push((self.pos[j].0 - own.0) as f64);
                obs.push((self.pos[j].1 - own.1) as f64);
                obs.push(self.levels[j] as f64);
                obs.push(1.0);
            } else {
                obs.extend_from_slice(&[0.0; 4]);
            }
        }
        debug_assert_eq!(obs.len(), OBS_WIDTH);
        obs
    }
}

impl Env for LbfEnv {
    fn roster(&self) -> usize {
        self.n
    }

    fn obs_width(&self) -> usize {
        OBS_WIDTH
    }

    fn action_count(&self) -> usize {
        ACTION_COUNT
    }

    fn horizon(&self) -> usize {
        self.params.horizon
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        self.foods.clear();
        self.pos = vec![(-1, -1); self.n];
        for i in 0..self.n {
            // Mark as off-grid first so occupancy checks only see placed agents.
            let cell = self.sample_free_cell(rng);
            self.pos[i] = cell;
        }
        for i in 0..self.n {
            self.levels[i] = rng.gen_range(1..=self.params.max_agent_level);
        }
        let cap = self.food_level_cap();
        for _ in 0..food_count(self.n) {
            let cell = self.sample_free_cell(rng);
            let level = rng.gen_range(1..=cap);
            self.foods.push(Food { pos: cell, level, collected: false });
        }
        self.total_food_level = self.foods.iter().map(|f| f.level as f64).sum();
        self.t = 0;
        self.observations()
    }

    fn step(&mut self, actions: &[usize]) -> StepResult {
        assert_eq!(actions.len(), self.n, "one action per agent");

        // Movement phase: a move succeeds only into an in-bounds cell that is
        // currently empty (no agent, no uncollected food) and that no other
        // mover claims this step.
        let mut targets: Vec<(i32, i32)> = Vec::with_capacity(self.n);
        for (i, &a) in actions.iter().enumerate() {
            assert!(a < ACTION_COUNT, "action {a} out of range");
            let delta = match a {
                1 => (-1, 0),
                2 => (1, 0),
                3 => (0, -1),
                4 => (0, 1),
                _ => (0, 0),
            };
            let cand = (self.pos[i].0 + delta.0, self.pos[i].1 + delta.1);
            let blocked = !self.in_bounds(cand)
                || self.pos.contains(&cand)
                || self.foods.iter().any(|f| !f.collected && f.pos == cand);
            targets.push(if blocked { self.pos[i] } else { cand });
        }
        for i in 0..self.n {
            if targets[i] == self.pos[i] {
                continue;
            }
            let contested = (0..self.n).any(|j| j != i && targets[j] == targets[i]);
            if !contested {
                self.pos[i] = targets[i];
            }
        }
        // Contested movers stayed put; clear their stale targets so the loop
        // above has already used original claims only (evaluated before any
        // assignment could matter: targets reference pre-step occupancy).

        // Load phase: each uncollected food checks the loaders on its four
        // neighboring cells.
        let mut reward = 0.0;
        for f in self.foods.iter_mut().filter(|f| !f.collected) {
            let mut total = 0u32;
            for i in 0..self.n {
                let adjacent = (self.pos[i].0 - f.pos.0).abs() + (self.pos[i].1 - f.pos.1).abs() == 1;
                if adjacent && actions[i] == LOAD {
                    total += self.levels[i];
                }
            }
            if total >= f.level && total > 0 {
                f.collected = true;
                reward += f.level as f64 / self.total_food_level;
            }
        }

        self.t += 1;
        let done = self.t >= self.params.horizon || self.foods.iter().all(|f| f.collected);
        StepResult { observations: self.observations(), team_reward: reward, done }
    }
}
