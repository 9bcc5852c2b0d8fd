//! Differentiable toy control tasks.
//!
//! Dynamics are written once against [`Backend`] using only elementwise
//! operations on whole columns, so a batched step and a single-row step
//! produce bit-identical rows, and [`Env::step_eval`] is just the same code
//! run eagerly. Rewards are computed on the post-transition state.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use thiserror::Error;

use crate::gradcore::{Backend, Eager, GradError, Matrix};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("unknown environment {0:?}")]
    Unknown(String),
    #[error("non-finite {what} at row {row}")]
    NonFinite { what: &'static str, row: usize },
    #[error("{what}: expected width {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("episode already ended after {0} steps")]
    EpisodeOver(usize),
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, EnvError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvKind {
    TwoGoal,
    Pendulum,
    SmoothReacher,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::TwoGoal, EnvKind::Pendulum, EnvKind::SmoothReacher];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::TwoGoal => "two_goal",
            EnvKind::Pendulum => "pendulum",
            EnvKind::SmoothReacher => "smooth_reacher",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EnvError::Unknown(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvSpec {
    pub name: &'static str,
    pub state_dim: usize,
    pub action_dim: usize,
    pub dt: f64,
    pub horizon: usize,
    pub reward_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub values: Vec<f64>,
    pub step_count: usize,
}

pub const RESET_NOISE: f64 = 0.05;

pub mod two_goal {
    pub const DT: f64 = 0.1;
    pub const A_MAX: f64 = 2.0;
    pub const VELOCITY_DECAY: f64 = 0.9;
    pub const SHARPNESS: f64 = 8.0;
    pub const GOALS: [(f64, f64); 2] = [(1.0, 0.0), (-1.0, 0.0)];
    pub const HORIZON: usize = 60;
    /// Final distance under which a rollout counts as reaching a goal.
    pub const REACH_RADIUS: f64 = 0.3;
}

pub mod pendulum {
    pub const DT: f64 = 0.05;
    pub const GRAVITY: f64 = 9.8;
    pub const LENGTH: f64 = 1.0;
    pub const MASS: f64 = 1.0;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const DAMPING: f64 = 0.05;
    /// Angular velocity is identity up to the knee and saturates smoothly at
    /// the limit.
    pub const SPEED_KNEE: f64 = 6.0;
    pub const SPEED_LIMIT: f64 = 8.0;
    pub const HORIZON: usize = 200;
}

pub mod smooth_reacher {
    pub const DT: f64 = 0.05;
    pub const LINKS: (f64, f64) = (0.5, 0.5);
    pub const SPEED: f64 = 2.0;
    pub const REWARD_WIDTH: f64 = 0.01;
    pub const TARGET_RADIUS: (f64, f64) = (0.2, 0.9);
    pub const HORIZON: usize = 100;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Env {
    kind: EnvKind,
    damping: f64,
}

impl Env {
    pub fn new(kind: EnvKind) -> Self {
        Self {
            kind,
            damping: pendulum::DAMPING,
        }
    }

    /// Pendulum with a custom damping coefficient; other tasks ignore it.
    pub fn with_damping(kind: EnvKind, damping: f64) -> Self {
        Self { kind, damping }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Ok(Self::new(name.parse()?))
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn spec(&self) -> EnvSpec {
        let (state_dim, action_dim, dt, horizon) = match self.kind {
            EnvKind::TwoGoal => (4, 2, two_goal::DT, two_goal::HORIZON),
            EnvKind::Pendulum => (3, 1, pendulum::DT, pendulum::HORIZON),
            EnvKind::SmoothReacher => (8, 2, smooth_reacher::DT, smooth_reacher::HORIZON),
        };
        EnvSpec {
            name: self.kind.name(),
            state_dim,
            action_dim,
            dt,
            horizon,
            reward_range: (0.0, 1.0),
        }
    }

    pub fn reset(&self, rng: &mut Rng) -> EnvState {
        let mut noise = || rng.random_range(-RESET_NOISE..=RESET_NOISE);
        let values = match self.kind {
            EnvKind::TwoGoal => vec![noise(), noise(), 0.0, 0.0],
            EnvKind::Pendulum => {
                let theta = std::f64::consts::PI + noise();
                vec![theta.cos(), theta.sin(), 0.0]
            }
            EnvKind::SmoothReacher => {
                let (t1, t2) = (noise(), noise());
                let (lo, hi) = smooth_reacher::TARGET_RADIUS;
                // Uniform by area over the annulus.
                let radius = rng.random_range(lo * lo..hi * hi).sqrt();
                let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                vec![
                    t1.cos(),
                    t1.sin(),
                    t2.cos(),
                    t2.sin(),
                    0.0,
                    0.0,
                    radius * angle.cos(),
                    radius * angle.sin(),
                ]
            }
        };
        EnvState { values, step_count: 0 }
    }

    /// `n` resets stacked as rows, consuming draws in the same order as
    /// repeated [`Env::reset`] calls.
    pub fn reset_batch(&self, n: usize, rng: &mut Rng) -> Matrix {
        let d = self.spec().state_dim;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend(self.reset(rng).values);
        }
        Matrix::new(n, d, data).expect("reset widths are fixed")
    }

    /// One differentiable transition for a batch: `(next_state, reward)`
    /// with reward as a `B x 1` column.
    pub fn step_diff<B: Backend>(
        &self,
        b: &mut B,
        state: &B::Value,
        action: &B::Value,
    ) -> Result<(B::Value, B::Value)> {
        let spec = self.spec();
        check_input(b.value(state), spec.state_dim, "state")?;
        check_input(b.value(action), spec.action_dim, "action")?;
        let col = |b: &mut B, x: &B::Value, i: usize| b.slice_cols(x, i, i + 1);
        match self.kind {
            EnvKind::TwoGoal => {
                use two_goal::*;
                let p = b.slice_cols(state, 0, 2)?;
                let v = b.slice_cols(state, 2, 4)?;
                let decayed = b.scale(&v, VELOCITY_DECAY);
                let push = b.scale(action, DT * A_MAX);
                let v2 = b.add(&decayed, &push)?;
                let dp = b.scale(&v2, DT);
                let p2 = b.add(&p, &dp)?;
                let px = col(b, &p2, 0)?;
                let py = col(b, &p2, 1)?;
                let mut bumps = Vec::with_capacity(GOALS.len());
                for (gx, gy) in GOALS {
                    let dx = b.add_scalar(&px, -gx);
                    let dy = b.add_scalar(&py, -gy);
                    let dx2 = b.square(&dx);
                    let dy2 = b.square(&dy);
                    let d2 = b.add(&dx2, &dy2)?;
                    let e = b.scale(&d2, -SHARPNESS);
                    bumps.push(b.exp(&e));
                }
                let total = b.add(&bumps[0], &bumps[1])?;
                let reward = b.scale(&total, 0.5);
                let next = b.concat_cols(&[p2, v2])?;
                Ok((next, reward))
            }
            EnvKind::Pendulum => {
                use pendulum::*;
                let c = col(b, state, 0)?;
                let s = col(b, state, 1)?;
                let w = col(b, state, 2)?;
                // theta = 0 is upright, so gravity pushes away from it.
                let gravity = b.scale(&s, GRAVITY / LENGTH);
                let torque = b.scale(action, MAX_TORQUE / (MASS * LENGTH * LENGTH));
                let friction = b.scale(&w, -self.damping);
                let acc = b.add(&gravity, &torque)?;
                let acc = b.add(&acc, &friction)?;
                let dw = b.scale(&acc, DT);
                let w_raw = b.add(&w, &dw)?;
                let w2 = b.soft_clip(&w_raw, SPEED_KNEE, SPEED_LIMIT);
                let delta = b.scale(&w2, DT);
                let (c2, s2) = rotate(b, &c, &s, &delta)?;
                let up = b.add_scalar(&c2, 1.0);
                let reward = b.scale(&up, 0.5);
                let next = b.concat_cols(&[c2, s2, w2])?;
                Ok((next, reward))
            }
            EnvKind::SmoothReacher => {
                use smooth_reacher::*;
                let mut parts = Vec::with_capacity(8);
                let w = b.scale(action, SPEED);
                let mut cs = Vec::with_capacity(2);
                for j in 0..2 {
                    let c = col(b, state, 2 * j)?;
                    let s = col(b, state, 2 * j + 1)?;
                    let wj = col(b, &w, j)?;
                    let delta = b.scale(&wj, DT);
                    cs.push(rotate(b, &c, &s, &delta)?);
                }
                let (c1, s1) = cs[0].clone();
                let (c2, s2) = cs[1].clone();
                // Absolute angle of the second link is theta1 + theta2.
                let c1c2 = b.mul(&c1, &c2)?;
                let s1s2 = b.mul(&s1, &s2)?;
                let c12 = b.sub(&c1c2, &s1s2)?;
                let s1c2 = b.mul(&s1, &c2)?;
                let c1s2 = b.mul(&c1, &s2)?;
                let s12 = b.add(&s1c2, &c1s2)?;
                let (l1, l2) = LINKS;
                let x1 = b.scale(&c1, l1);
                let x2 = b.scale(&c12, l2);
                let tip_x = b.add(&x1, &x2)?;
                let y1 = b.scale(&s1, l1);
                let y2 = b.scale(&s12, l2);
                let tip_y = b.add(&y1, &y2)?;
                let target = b.slice_cols(state, 6, 8)?;
                let tx = col(b, &target, 0)?;
                let ty = col(b, &target, 1)?;
                let dx = b.sub(&tip_x, &tx)?;
                let dy = b.sub(&tip_y, &ty)?;
                let dx2 = b.square(&dx);
                let dy2 = b.square(&dy);
                let d2 = b.add(&dx2, &dy2)?;
                let e = b.scale(&d2, -1.0 / REWARD_WIDTH);
                let reward = b.exp(&e);
                parts.extend([c1, s1, c2, s2, w, target]);
                let next = b.concat_cols(&parts)?;
                Ok((next, reward))
            }
        }
    }

    /// Plain transition of a single state, advancing the step counter.
    pub fn step_eval(&self, state: &EnvState, action: &[f64]) -> Result<(EnvState, f64)> {
        let horizon = self.spec().horizon;
        if state.step_count >= horizon {
            return Err(EnvError::EpisodeOver(state.step_count));
        }
        let s = Matrix::row_vector(&state.values);
        let a = Matrix::row_vector(action);
        let (next, reward) = self.step_diff(&mut Eager, &s, &a)?;
        Ok((
            EnvState {
                values: next.into_vec(),
                step_count: state.step_count + 1,
            },
            reward.as_slice()[0],
        ))
    }

    pub fn is_done(&self, state: &EnvState) -> bool {
        state.step_count >= self.spec().horizon
    }

    /// Index of the two-goal target within the reach radius of `state`, if
    /// any.
    pub fn reached_goal(&self, state: &[f64]) -> Option<usize> {
        if self.kind != EnvKind::TwoGoal {
            return None;
        }
        two_goal::GOALS.iter().position(|&(gx, gy)| {
            let (dx, dy) = (state[0] - gx, state[1] - gy);
            (dx * dx + dy * dy).sqrt() < two_goal::REACH_RADIUS
        })
    }

    /// Pendulum mechanical energy per unit inertia, `w^2/2 + (g/l) cos(theta)`.
    pub fn pendulum_energy(state: &[f64]) -> f64 {
        0.5 * state[2] * state[2] + pendulum::GRAVITY / pendulum::LENGTH * state[0]
    }
}

/// `(cos, sin)` of the angle advanced by `delta`.
fn rotate<B: Backend>(b: &mut B, c: &B::Value, s: &B::Value, delta: &B::Value) -> Result<(B::Value, B::Value)> {
    let cd = b.cos(delta);
    let sd = b.sin(delta);
    let c_cd = b.mul(c, &cd)?;
    let s_sd = b.mul(s, &sd)?;
    let s_cd = b.mul(s, &cd)?;
    let c_sd = b.mul(c, &sd)?;
    Ok((b.sub(&c_cd, &s_sd)?, b.add(&s_cd, &c_sd)?))
}

fn check_input(m: &Matrix, width: usize, what: &'static str) -> Result<()> {
    if m.cols() != width {
        return Err(EnvError::Dimension {
            what,
            expected: width,
            got: m.cols(),
        });
    }
    if let Some(i) = m.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(EnvError::NonFinite { what, row: i / width });
    }
    Ok(())
}
