//! Toy continuous-action environments and their dataset generators.
//!
//! * `bandit-v0` — one state, one step, reward `1 - a^2`. Logged data only
//!   covers `|a| > 0.5`, so the best in-dataset reward is just under 0.75
//!   while the true optimum sits at `a = 0` in the uncovered gap.
//! * `stitch-v0` — a five-state graph where good trajectories exist only from
//!   one start and a policy must compose halves of two trajectory families to
//!   succeed from the other start.

use crate::data::{Dataset, Trajectory};
use crate::rng::RngStream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub action_low: f64,
    pub action_high: f64,
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub trait Env {
    fn spec(&self) -> &EnvSpec;
    /// Start a new episode and return the initial observation.
    fn reset(&mut self, rng: &mut RngStream) -> Vec<f64>;
    /// Advance one step. Actions are clipped to the env bounds internally.
    /// Stepping a finished (or never-reset) episode is a usage error.
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
}

/// Both toy environments share one action box; refinement clips against it.
pub const ACTION_LOW: f64 = -1.0;
pub const ACTION_HIGH: f64 = 1.0;

// ---------------------------------------------------------------- bandit-v0

pub const BANDIT_NAME: &str = "bandit-v0";

/// Single-state, single-step environment with reward `1 - a^2`.
pub struct BanditEnv {
    spec: EnvSpec,
    live: bool,
}

impl BanditEnv {
    pub fn new() -> Self {
        BanditEnv {
            spec: EnvSpec {
                name: BANDIT_NAME.to_string(),
                obs_dim: 1,
                act_dim: 1,
                action_low: ACTION_LOW,
                action_high: ACTION_HIGH,
                max_steps: 1,
            },
            live: false,
        }
    }

    pub fn reward(action: f64) -> f64 {
        let a = action.clamp(-1.0, 1.0);
        1.0 - a * a
    }
}

impl Default for BanditEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for BanditEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _rng: &mut RngStream) -> Vec<f64> {
        self.live = true;
        vec![0.0]
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if !self.live {
            return Err(Error::Usage("bandit episode is finished; reset first".into()));
        }
        if action.len() != 1 {
            return Err(Error::Config(format!("bandit wants 1 action dim, got {}", action.len())));
        }
        self.live = false;
        Ok(StepResult { next_obs: vec![0.0], reward: Self::reward(action[0]), done: true })
    }
}

// ---------------------------------------------------------------- stitch-v0

pub const STITCH_NAME: &str = "stitch-v0";

/// Identifies one of the five graph states; observations are one-hot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StitchState {
    S1,
    S2,
    S3,
    S4,
    S5,
}

impl StitchState {
    pub fn one_hot(self) -> Vec<f64> {
        let mut v = vec![0.0; 5];
        v[self.index()] = 1.0;
        v
    }

    pub fn index(self) -> usize {
        match self {
            StitchState::S1 => 0,
            StitchState::S2 => 1,
            StitchState::S3 => 2,
            StitchState::S4 => 3,
            StitchState::S5 => 4,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "s1" => Ok(StitchState::S1),
            "s2" => Ok(StitchState::S2),
            "s3" => Ok(StitchState::S3),
            "s4" => Ok(StitchState::S4),
            "s5" => Ok(StitchState::S5),
            other => Err(Error::Config(format!("unknown stitch state {other:?}"))),
        }
    }
}

/// Start-state policy for [`StitchEnv::reset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StitchStart {
    /// s1 or s2 with equal probability (one RNG draw per reset).
    Random,
    Fixed(StitchState),
}

/// Five-state stitching graph:
///
/// * s1 -> s3 and s2 -> s3, reward 0, action ignored;
/// * at s3, action >= 0 leads to s4 with reward 100, action < 0 leads to s5
///   with reward 0; s4 and s5 are terminal.
pub struct StitchEnv {
    spec: EnvSpec,
    start: StitchStart,
    state: Option<StitchState>,
}

impl StitchEnv {
    pub fn new(start: StitchStart) -> Self {
        StitchEnv {
            spec: EnvSpec {
                name: STITCH_NAME.to_string(),
                obs_dim: 5,
                act_dim: 1,
                action_low: ACTION_LOW,
                action_high: ACTION_HIGH,
                max_steps: 2,
            },
            start,
            state: None,
        }
    }

    pub fn current_state(&self) -> Option<StitchState> {
        self.state
    }
}

impl Env for StitchEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut RngStream) -> Vec<f64> {
        let s = match self.start {
            StitchStart::Fixed(s) => s,
            StitchStart::Random => {
                if rng.below(2) == 0 {
                    StitchState::S1
                } else {
                    StitchState::S2
                }
            }
        };
        self.state = Some(s);
        s.one_hot()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let state = self.state.ok_or_else(|| {
            Error::Usage("stitch episode is finished or was never reset".into())
        })?;
        if action.len() != 1 {
            return Err(Error::Config(format!("stitch wants 1 action dim, got {}", action.len())));
        }
        let a = action[0].clamp(self.spec.action_low, self.spec.action_high);
        let (next, reward, done) = match state {
            StitchState::S1 | StitchState::S2 => (StitchState::S3, 0.0, false),
            StitchState::S3 => {
                if a >= 0.0 {
                    (StitchState::S4, 100.0, true)
                } else {
                    (StitchState::S5, 0.0, true)
                }
            }
            StitchState::S4 | StitchState::S5 => {
                return Err(Error::Usage("stepping a terminal stitch state".into()));
            }
        };
        self.state = if done { None } else { Some(next) };
        Ok(StepResult { next_obs: next.one_hot(), reward, done })
    }
}

// ------------------------------------------------------------------ registry

/// Instantiate an environment by registry name.
pub fn make_env(name: &str) -> Result<Box<dyn Env>> {
    match name {
        BANDIT_NAME => Ok(Box::new(BanditEnv::new())),
        STITCH_NAME => Ok(Box::new(StitchEnv::new(StitchStart::Random))),
        other => Err(Error::Config(format!("unknown environment {other:?}"))),
    }
}

/// Reference returns for score normalization: (random policy, expert).
///
/// * bandit: uniform random action on [-1,1] earns `E[1 - a^2] = 2/3`;
///   the expert (a = 0) earns 1.
/// * stitch: a uniform random policy always reaches s3 and then crosses to s4
///   half the time, for an expected return of 50; the expert earns 100.
pub fn score_refs(env_name: &str) -> Result<(f64, f64)> {
    match env_name {
        BANDIT_NAME => Ok((2.0 / 3.0, 1.0)),
        STITCH_NAME => Ok((50.0, 100.0)),
        other => Err(Error::Config(format!("unknown environment {other:?}"))),
    }
}

/// Map a raw episode return onto the 0-100 scale where 0 is the random
/// reference and 100 is the expert reference.
pub fn normalized_score(env_name: &str, raw_return: f64) -> Result<f64> {
    let (random_ref, expert_ref) = score_refs(env_name)?;
    Ok(100.0 * (raw_return - random_ref) / (expert_ref - random_ref))
}

// ------------------------------------------------------------------ datasets

/// Logged bandit data: one-step episodes whose actions are uniform on
/// [-1,-0.5) u (0.5,1], half the mass on each side.
pub fn bandit_dataset(count: usize, rng: &mut RngStream) -> Dataset {
    bandit_dataset_with_mix(count, 0.5, rng)
}

/// Bandit data with a chosen fraction of positive-side actions. Every action
/// still satisfies `|a| > 0.5`; only the sign balance changes. The imbalanced
/// variants exist for behavior-cloning studies where a symmetric action
/// distribution makes the conditional mean degenerate.
pub fn bandit_dataset_with_mix(count: usize, positive_fraction: f64, rng: &mut RngStream) -> Dataset {
    assert!(
        (0.0..=1.0).contains(&positive_fraction),
        "positive_fraction must be in [0,1]"
    );
    let mut trajectories = Vec::with_capacity(count);
    for _ in 0..count {
        // u in [0,1) => magnitude in (0.5, 1] via 1 - u/2
        let mag = 1.0 - rng.uniform() * 0.5;
        let positive = rng.uniform() < positive_fraction;
        let a = if positive { mag } else { -mag };
        trajectories.push(Trajectory {
            observations: vec![vec![0.0]],
            actions: vec![vec![a]],
            rewards: vec![BanditEnv::reward(a)],
            terminals: vec![true],
        });
    }
    Dataset::new(trajectories)
}

/// Logged stitch data: exactly half the episodes are s1 -> s3 -> s4 (return
/// 100, action at s3 uniform on (0,1]) and half are s2 -> s3 -> s5 (return 0,
/// action at s3 uniform on [-1,0)). Actions at the start states are uniform
/// on [-1,1] and ignored by the dynamics. `count` must be even.
pub fn stitch_dataset(count: usize, rng: &mut RngStream) -> Result<Dataset> {
    if count % 2 != 0 {
        return Err(Error::Config(format!(
            "stitch dataset needs an even episode count, got {count}"
        )));
    }
    let mut trajectories = Vec::with_capacity(count);
    for i in 0..count {
        let good = i % 2 == 0; // alternate so any prefix is balanced
        let a0 = rng.uniform_in(-1.0, 1.0);
        // (0,1]: 1 - u with u in [0,1)
        let mag = 1.0 - rng.uniform();
        if good {
            trajectories.push(Trajectory {
                observations: vec![StitchState::S1.one_hot(), StitchState::S3.one_hot()],
                actions: vec![vec![a0], vec![mag]],
                rewards: vec![0.0, 100.0],
                terminals: vec![false, true],
            });
        } else {
            trajectories.push(Trajectory {
                observations: vec![StitchState::S2.one_hot(), StitchState::S3.one_hot()],
                actions: vec![vec![a0], vec![-mag]],
                rewards: vec![0.0, 0.0],
                terminals: vec![false, true],
            });
        }
    }
    Ok(Dataset::new(trajectories))
}
