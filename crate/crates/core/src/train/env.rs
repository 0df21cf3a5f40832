//! Small continuous-control tasks with actions in `[-1, 1]^D`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EraError, Result};

pub const HORIZON: usize = 200;

const POINTMASS_STEP: f64 = 0.05;

const PENDULUM_DT: f64 = 0.05;
const PENDULUM_G: f64 = 10.0;
const PENDULUM_MAX_TORQUE: f64 = 2.0;
const PENDULUM_MAX_SPEED: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    /// Reach the origin in the plane.
    Pointmass,
    /// Swing a torque-limited pendulum upright.
    Pendulum,
}

impl EnvKind {
    pub fn obs_dim(self) -> usize {
        match self {
            EnvKind::Pointmass => 4,
            EnvKind::Pendulum => 3,
        }
    }

    pub fn act_dim(self) -> usize {
        match self {
            EnvKind::Pointmass => 2,
            EnvKind::Pendulum => 1,
        }
    }
}

impl FromStr for EnvKind {
    type Err = EraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointmass" | "pointmass-reach-2d" => Ok(EnvKind::Pointmass),
            "pendulum" | "pendulum-swingup" => Ok(EnvKind::Pendulum),
            other => Err(EraError::InvalidConfig(format!(
                "unknown env `{other}`; expected pointmass or pendulum"
            ))),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::Pointmass => "pointmass",
            EnvKind::Pendulum => "pendulum",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// True exactly when the horizon is reached.
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct ToyEnv {
    kind: EnvKind,
    state: Vec<f64>,
    goal: [f64; 2],
    steps: usize,
    horizon: usize,
    rng: ChaCha8Rng,
}

impl ToyEnv {
    pub fn new(kind: EnvKind, seed: u64) -> Self {
        Self {
            kind,
            state: vec![0.0; 2],
            goal: [0.0, 0.0],
            steps: 0,
            horizon: HORIZON,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Places the environment in an exact state, for tests. Pointmass takes
    /// `(x, y)`, pendulum `(θ, θ̇)`.
    pub fn set_state(&mut self, state: [f64; 2]) {
        self.state = state.to_vec();
        self.steps = 0;
    }

    pub fn reset(&mut self) -> Vec<f64> {
        self.steps = 0;
        self.state = match self.kind {
            EnvKind::Pointmass => vec![self.rng.gen_range(-1.0..1.0), self.rng.gen_range(-1.0..1.0)],
            EnvKind::Pendulum => vec![self.rng.gen_range(-PI..PI), self.rng.gen_range(-1.0..1.0)],
        };
        self.observe()
    }

    pub fn observe(&self) -> Vec<f64> {
        let s = &self.state;
        match self.kind {
            EnvKind::Pointmass => vec![s[0], s[1], self.goal[0] - s[0], self.goal[1] - s[1]],
            EnvKind::Pendulum => vec![s[0].cos(), s[0].sin(), s[1]],
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<Step> {
        if action.len() != self.kind.act_dim() {
            return Err(EraError::DimensionMismatch {
                context: "env action",
                expected: self.kind.act_dim(),
                got: action.len(),
            });
        }
        if let Some(a) = action.iter().find(|a| !(-1.0..=1.0).contains(*a)) {
            return Err(EraError::Domain(format!("action {a} outside [-1, 1]")));
        }
        if self.steps >= self.horizon {
            return Err(EraError::Domain("episode already finished; call reset".into()));
        }
        let reward = match self.kind {
            EnvKind::Pointmass => {
                self.state[0] += POINTMASS_STEP * action[0];
                self.state[1] += POINTMASS_STEP * action[1];
                -(self.state[0] - self.goal[0]).hypot(self.state[1] - self.goal[1])
            }
            EnvKind::Pendulum => {
                let (th, thdot) = (self.state[0], self.state[1]);
                let a = action[0];
                let reward = -(angle_normalize(th).powi(2) + 0.1 * thdot * thdot + 0.001 * a * a);
                // unit mass and length, θ = 0 upright
                let torque = PENDULUM_MAX_TORQUE * a;
                let thdot = (thdot + (1.5 * PENDULUM_G * th.sin() + 3.0 * torque) * PENDULUM_DT)
                    .clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
                self.state = vec![th + thdot * PENDULUM_DT, thdot];
                reward
            }
        };
        self.steps += 1;
        Ok(Step {
            obs: self.observe(),
            reward,
            done: self.steps == self.horizon,
        })
    }
}

fn angle_normalize(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}
