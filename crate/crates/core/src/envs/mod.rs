//! Seedable continuous-control tasks and a vectorized stepper.
//!
//! Three small tasks stand in for large simulated benchmarks:
//!
//! - `pendulum`: torque-limited swing-up, cost `θ² + 0.1·θ̇² + 0.001·u²`.
//! - `cartpole-continuous`: balance with a continuous force, `+1` per step
//!   while `|θ| < 0.21` and `|x| < 2.4`.
//! - `pointmass-multigoal`: a 2-D double integrator starting at the origin
//!   with four goals at `(±1, 0)` and `(0, ±1)`, so the optimal action
//!   distribution from the start is multimodal.
//!
//! All actions live in `[-1, 1]^dim`. Control period is `dt = 0.05`.

mod vec;

pub use vec::{env_oracle_return, record_trace, run_episodes, write_trace_jsonl, StepOutput, TraceRecord, VecEnv};

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::SeededRng;

pub const DT: f64 = 0.05;

const GRAVITY: f64 = 10.0;
const PENDULUM_MAX_TORQUE: f64 = 2.0;
const PENDULUM_MAX_SPEED: f64 = 8.0;
/// Velocity-Verlet substeps per control period for the pendulum; keeps the
/// energy error well under one percent.
const PENDULUM_SUBSTEPS: usize = 4;
const CARTPOLE_FORCE: f64 = 10.0;
const CARTPOLE_CART_MASS: f64 = 1.0;
const CARTPOLE_THETA_LIMIT: f64 = 0.21;
const CARTPOLE_X_LIMIT: f64 = 2.4;
const POINTMASS_FORCE: f64 = 1.0;
const POINTMASS_GOAL_RADIUS: f64 = 0.1;
const POINTMASS_ACTION_COST: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvId {
    #[serde(rename = "pendulum")]
    Pendulum,
    #[serde(rename = "cartpole-continuous")]
    CartpoleContinuous,
    #[serde(rename = "pointmass-multigoal")]
    PointmassMultigoal,
}

impl EnvId {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::Pendulum => "pendulum",
            EnvId::CartpoleContinuous => "cartpole-continuous",
            EnvId::PointmassMultigoal => "pointmass-multigoal",
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pendulum" => Ok(EnvId::Pendulum),
            "cartpole-continuous" => Ok(EnvId::CartpoleContinuous),
            "pointmass-multigoal" => Ok(EnvId::PointmassMultigoal),
            other => Err(Error::Config(format!("unknown environment id '{}'", other))),
        }
    }
}

/// Physical constants that may be perturbed for out-of-distribution tests.
///
/// `mass` and `length` are the pendulum rod, the cartpole pole (length is
/// the half-length) or the point mass (length unused).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParams {
    pub mass: f64,
    pub length: f64,
    pub damping: f64,
    pub goals: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: EnvId,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub params: PhysicsParams,
}

impl EnvSpec {
    pub fn new(id: EnvId) -> Self {
        match id {
            EnvId::Pendulum => EnvSpec {
                id,
                obs_dim: 3,
                action_dim: 1,
                horizon: 200,
                params: PhysicsParams {
                    mass: 1.0,
                    length: 1.0,
                    damping: 0.0,
                    goals: Vec::new(),
                },
            },
            EnvId::CartpoleContinuous => EnvSpec {
                id,
                obs_dim: 4,
                action_dim: 1,
                horizon: 500,
                params: PhysicsParams {
                    mass: 0.1,
                    length: 0.5,
                    damping: 0.0,
                    goals: Vec::new(),
                },
            },
            EnvId::PointmassMultigoal => EnvSpec {
                id,
                obs_dim: 4,
                action_dim: 2,
                horizon: 200,
                params: PhysicsParams {
                    mass: 1.0,
                    length: 1.0,
                    damping: 0.0,
                    goals: vec![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]],
                },
            },
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Ok(Self::new(name.parse()?))
    }

    pub fn with_horizon(mut self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        self.horizon = horizon;
        Ok(self)
    }

    /// Copy with one physics parameter scaled by `factor ∈ [0.5, 1.5]`.
    /// Keys: `mass`, `length`, `damping`.
    pub fn perturbed(&self, key: &str, factor: f64) -> Result<Self> {
        if !factor.is_finite() || !(0.5..=1.5).contains(&factor) {
            return Err(Error::InvalidArgument(format!(
                "perturbation factor {} outside [0.5, 1.5]",
                factor
            )));
        }
        let mut out = self.clone();
        match key {
            "mass" => out.params.mass *= factor,
            "length" => out.params.length *= factor,
            "damping" => out.params.damping *= factor,
            other => {
                return Err(Error::InvalidArgument(format!("unknown physics parameter '{}'", other)));
            }
        }
        Ok(out)
    }

    pub fn state_dim(&self) -> usize {
        match self.id {
            EnvId::Pendulum => 2,
            EnvId::CartpoleContinuous | EnvId::PointmassMultigoal => 4,
        }
    }

    pub fn initial_state(&self, rng: &mut SeededRng) -> Vec<f64> {
        match self.id {
            EnvId::Pendulum => vec![rng.random_range(-PI..=PI), rng.random_range(-1.0..=1.0)],
            EnvId::CartpoleContinuous => (0..4).map(|_| rng.random_range(-0.05..=0.05)).collect(),
            EnvId::PointmassMultigoal => vec![0.0; 4],
        }
    }

    pub fn observe(&self, state: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.obs_dim);
        self.observe_into(state, &mut out);
        out
    }

    /// Appends the observation of `state` to `out`.
    pub fn observe_into(&self, state: &[f64], out: &mut Vec<f64>) {
        match self.id {
            EnvId::Pendulum => {
                let (sin, cos) = state[0].sin_cos();
                out.extend([cos, sin, state[1]]);
            }
            EnvId::CartpoleContinuous | EnvId::PointmassMultigoal => out.extend_from_slice(state),
        }
    }

    /// Advances `state` by one control period under an action already
    /// clamped to `[-1, 1]`. Returns `(reward, failed)`.
    pub fn step_state(&self, state: &mut [f64], action: &[f64]) -> (f64, bool) {
        match self.id {
            EnvId::Pendulum => self.pendulum_step(state, action[0]),
            EnvId::CartpoleContinuous => self.cartpole_step(state, action[0]),
            EnvId::PointmassMultigoal => self.pointmass_step(state, action),
        }
    }

    fn pendulum_step(&self, s: &mut [f64], a: f64) -> (f64, bool) {
        let PhysicsParams { mass: m, length: l, damping, .. } = self.params;
        let u = PENDULUM_MAX_TORQUE * a;
        let th = angle_normalize(s[0]);
        let reward = -(th * th + 0.1 * s[1] * s[1] + 0.001 * u * u);
        let inertia = m * l * l / 3.0;
        let h = DT / PENDULUM_SUBSTEPS as f64;
        let torque = |th: f64| m * GRAVITY * l / 2.0 * th.sin() + u;
        let mut gravity = torque(s[0]);
        for _ in 0..PENDULUM_SUBSTEPS {
            let half = s[1] + 0.5 * h * (gravity - damping * s[1]) / inertia;
            s[0] += h * half;
            gravity = torque(s[0]);
            let v = half + 0.5 * h * (gravity - damping * half) / inertia;
            s[1] = v.clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
        }
        (reward, false)
    }

    /// Mechanical energy of a pendulum state, zero at hanging rest.
    pub fn pendulum_energy(&self, s: &[f64]) -> f64 {
        let PhysicsParams { mass: m, length: l, .. } = self.params;
        let inertia = m * l * l / 3.0;
        0.5 * inertia * s[1] * s[1] + m * GRAVITY * l / 2.0 * (1.0 + s[0].cos())
    }

    fn cartpole_step(&self, s: &mut [f64], a: f64) -> (f64, bool) {
        let PhysicsParams {
            mass: mp,
            length: l,
            damping,
            ..
        } = self.params;
        let force = CARTPOLE_FORCE * a - damping * s[1];
        let total = CARTPOLE_CART_MASS + mp;
        let (sin, cos) = s[2].sin_cos();
        let temp = (force + mp * l * s[3] * s[3] * sin) / total;
        let th_acc = (GRAVITY * sin - cos * temp) / (l * (4.0 / 3.0 - mp * cos * cos / total));
        let x_acc = temp - mp * l * th_acc * cos / total;
        s[1] += DT * x_acc;
        s[0] += DT * s[1];
        s[3] += DT * th_acc;
        s[2] += DT * s[3];
        let failed = s[2].abs() >= CARTPOLE_THETA_LIMIT || s[0].abs() >= CARTPOLE_X_LIMIT;
        (if failed { 0.0 } else { 1.0 }, failed)
    }

    fn pointmass_step(&self, s: &mut [f64], a: &[f64]) -> (f64, bool) {
        let PhysicsParams { mass, damping, .. } = self.params;
        for i in 0..2 {
            let acc = (POINTMASS_FORCE * a[i] - damping * s[2 + i]) / mass;
            s[2 + i] += DT * acc;
            s[i] += DT * s[2 + i];
        }
        let at_goal = self
            .params
            .goals
            .iter()
            .any(|g| (s[0] - g[0]).hypot(s[1] - g[1]) <= POINTMASS_GOAL_RADIUS);
        let reward = if at_goal {
            1.0
        } else {
            -POINTMASS_ACTION_COST * (a[0] * a[0] + a[1] * a[1])
        };
        (reward, false)
    }

    /// Validates a batch of actions, clamping out-of-range entries.
    /// Returns the number of clamped entries.
    pub fn sanitize_actions(&self, actions: &mut Tensor, n: usize) -> Result<usize> {
        if actions.shape() != [n, self.action_dim] {
            return Err(Error::Shape {
                node: 0,
                op: "env_step",
                detail: format!("actions {:?}, expected [{}, {}]", actions.shape(), n, self.action_dim),
            });
        }
        if !actions.is_finite() {
            return Err(Error::InvalidArgument("non-finite action".into()));
        }
        let mut clamped = 0;
        for v in actions.data_mut() {
            if v.abs() > 1.0 {
                *v = v.clamp(-1.0, 1.0);
                clamped += 1;
            }
        }
        Ok(clamped)
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn angle_normalize(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}
