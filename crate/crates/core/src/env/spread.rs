//! Cooperative coverage on a 2-D plane.
//!
//! `n` agents must spread out so that each of the `n` landmarks has someone
//! nearby. The team reward is the negated sum, over landmarks, of the
//! distance to the closest agent, minus a penalty per colliding agent pair —
//! so perfect coverage with no contact scores zero and everything else is
//! negative. Discrete actions push the agent along one axis through damped
//! point-mass dynamics.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Env, StepResult};

/// Observation layout: own velocity (2) + own position (2) + three nearest
/// landmark offsets (6) + three nearest teammate offsets (6) + presence
/// flags for those six slots (6).
pub const OBS_WIDTH: usize = 22;
/// no-op, +x, −x, +y, −y.
pub const ACTION_COUNT: usize = 5;
/// Landmark / teammate slots per observation.
const SLOTS: usize = 3;

fn default_horizon() -> usize {
    25
}
fn default_dt() -> f64 {
    0.1
}
fn default_damping() -> f64 {
    0.25
}
fn default_force() -> f64 {
    1.0
}
fn default_collision_radius() -> f64 {
    0.15
}
fn default_penalty() -> f64 {
    1.0
}
fn default_arena_half() -> f64 {
    1.0
}

/// Physics and reward constants; the defaults are the benchmark settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpreadParams {
    pub horizon: usize,
    /// Integration step for the point-mass dynamics.
    pub dt: f64,
    /// Per-step velocity decay in [0, 1).
    pub damping: f64,
    /// Magnitude of the applied force for the four move actions.
    pub force: f64,
    /// Agent body radius; a pair collides when centers are closer than twice this.
    pub collision_radius: f64,
    /// Reward subtracted per colliding pair per step.
    pub penalty_coeff: f64,
    /// Agents and landmarks start uniformly in [-arena_half, arena_half]².
    pub arena_half: f64,
}

impl Default for SpreadParams {
    fn default() -> Self {
        Self {
            horizon: default_horizon(),
            dt: default_dt(),
            damping: default_damping(),
            force: default_force(),
            collision_radius: default_collision_radius(),
            penalty_coeff: default_penalty(),
            arena_half: default_arena_half(),
        }
    }
}

pub struct SpreadEnv {
    params: SpreadParams,
    n: usize,
    pos: Vec<[f64; 2]>,
    vel: Vec<[f64; 2]>,
    landmarks: Vec<[f64; 2]>,
    t: usize,
}

impl SpreadEnv {
    pub fn new(n: usize, params: SpreadParams) -> Self {
        Self {
            params,
            n,
            pos: vec![[0.0; 2]; n],
            vel: vec![[0.0; 2]; n],
            landmarks: vec![[0.0; 2]; n],
            t: 0,
        }
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.observe(i)).collect()
    }

    /// Indices of the `SLOTS` nearest entries of `points` to `origin`,
    /// ordered by distance with ties broken toward the lower index.
    /// `skip` excludes the observer itself from its teammate list.
    fn nearest(origin: [f64; 2], points: &[[f64; 2]], skip: Option<usize>) -> Vec<usize> {
        let mut order: Vec<usize> = (0..points.len()).filter(|&j| Some(j) != skip).collect();
        order.sort_by(|&a, &b| {
            let da = dist2(origin, points[a]);
            let db = dist2(origin, points[b]);
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
        order.truncate(SLOTS);
        order
    }

    fn observe(&self, i: usize) -> Vec<f64> {
        let mut obs = Vec::with_capacity(OBS_WIDTH);
        obs.extend_from_slice(&self.vel[i]);
        obs.extend_from_slice(&self.pos[i]);

        let lm = Self::nearest(self.pos[i], &self.landmarks, None);
        let tm = Self::nearest(self.pos[i], &self.pos, Some(i));
        for slot in 0..SLOTS {
            if let Some(&j) = lm.get(slot) {
                obs.push(self.landmarks[j][0] - self.pos[i][0]);
                obs.push(self.landmarks[j][1] - self.pos[i][1]);
            } else {
                obs.extend_from_slice(&[0.0, 0.0]);
            }
        }
        for slot in 0..SLOTS {
            if let Some(&j) = tm.get(slot) {
                obs.push(self.pos[j][0] - self.pos[i][0]);
                obs.push(self.pos[j][1] - self.pos[i][1]);
            } else {
                obs.extend_from_slice(&[0.0, 0.0]);
            }
        }
        for slot in 0..SLOTS {
            obs.push(if slot < lm.len() { 1.0 } else { 0.0 });
        }
        for slot in 0..SLOTS {
            obs.push(if slot < tm.len() { 1.0 } else { 0.0 });
        }
        debug_assert_eq!(obs.len(), OBS_WIDTH);
        obs
    }

    /// Coverage term plus collision penalty for the current configuration.
    fn reward(&self) -> f64 {
        let coverage: f64 = self
            .landmarks
            .iter()
            .map(|&lm| {
                self.pos
                    .iter()
                    .map(|&p| dist2(lm, p).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        let mut collisions = 0usize;
        let touch = 2.0 * self.params.collision_radius;
        for a in 0..self.n {
            for b in (a + 1)..self.n {
                if dist2(self.pos[a], self.pos[b]).sqrt() < touch {
                    collisions += 1;
                }
            }
        }
        -coverage - self.params.penalty_coeff * collisions as f64
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

impl Env for SpreadEnv {
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
        let half = self.params.arena_half;
        for p in self.pos.iter_mut() {
            *p = [rng.gen_range(-half..half), rng.gen_range(-half..half)];
        }
        for v in self.vel.iter_mut() {
            *v = [0.0, 0.0];
        }
        for lm in self.landmarks.iter_mut() {
            *lm = [rng.gen_range(-half..half), rng.gen_range(-half..half)];
        }
        self.t = 0;
        self.observations()
    }

    fn step(&mut self, actions: &[usize]) -> StepResult {
        assert_eq!(actions.len(), self.n, "one action per agent");
        for (i, &a) in actions.iter().enumerate() {
            assert!(a < ACTION_COUNT, "action {a} out of range");
            let u = match a {
                1 => [1.0, 0.0],
                2 => [-1.0, 0.0],
                3 => [0.0, 1.0],
                4 => [0.0, -1.0],
                _ => [0.0, 0.0],
            };
            for k in 0..2 {
                self.vel[i][k] = self.vel[i][k] * (1.0 - self.params.damping)
                    + u[k] * self.params.force * self.params.dt;
                self.pos[i][k] += self.vel[i][k] * self.params.dt;
            }
        }
        self.t += 1;
        StepResult {
            observations: self.observations(),
            team_reward: self.reward(),
            done: self.t >= self.params.horizon,
        }
    }
}
