//! Ground-truth simulators, rendering, safety labels and reference policies.

pub mod dubins;
pub mod pendulum;
pub mod render;

use std::f32::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

pub use dubins::{DubinsParams, DubinsState};
pub use pendulum::{PendulumParams, PendulumState};
pub use render::Frame;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnvKind {
    Pendulum,
    Dubins,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Pendulum => "pendulum",
            EnvKind::Dubins => "dubins",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            EnvKind::Pendulum => 2,
            EnvKind::Dubins => 3,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pendulum" => Ok(EnvKind::Pendulum),
            "dubins" => Ok(EnvKind::Dubins),
            other => Err(Error::invalid(format!("unknown env '{other}' (pendulum|dubins)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EnvState {
    Pendulum(PendulumState),
    Dubins(DubinsState),
}

impl EnvState {
    pub fn kind(&self) -> EnvKind {
        match self {
            EnvState::Pendulum(_) => EnvKind::Pendulum,
            EnvState::Dubins(_) => EnvKind::Dubins,
        }
    }

    pub fn to_vec(&self) -> Vec<f32> {
        match *self {
            EnvState::Pendulum(s) => vec![s.theta, s.theta_dot],
            EnvState::Dubins(s) => vec![s.x, s.y, s.theta],
        }
    }

    pub fn from_slice(kind: EnvKind, v: &[f32]) -> Result<Self> {
        match (kind, v) {
            (EnvKind::Pendulum, &[theta, theta_dot]) => Ok(EnvState::Pendulum(PendulumState { theta, theta_dot })),
            (EnvKind::Dubins, &[x, y, theta]) => Ok(EnvState::Dubins(DubinsState { x, y, theta })),
            _ => Err(Error::shape("env_state", format!("{} state from {} values", kind, v.len()))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SafetyLabel {
    Safe,
    Unsafe,
    Neither,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderParams {
    pub width: usize,
    pub height: usize,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams { width: 64, height: 64 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnvParams {
    pub pendulum: PendulumParams,
    pub dubins: DubinsParams,
    pub render: RenderParams,
}

impl EnvParams {
    pub fn validate(&self) -> Result<()> {
        let p = &self.pendulum;
        let d = &self.dubins;
        let positive = [
            ("pendulum.mass", p.mass),
            ("pendulum.length", p.length),
            ("pendulum.gravity", p.gravity),
            ("pendulum.dt", p.dt),
            ("dubins.speed", d.speed),
            ("dubins.dt", d.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if p.torque_bounds.0 >= p.torque_bounds.1 || d.turn_bounds.0 >= d.turn_bounds.1 {
            return Err(Error::invalid("action bounds must satisfy lo < hi"));
        }
        if self.render.width == 0 || self.render.height == 0 {
            return Err(Error::invalid("render size must be nonzero"));
        }
        Ok(())
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f32) -> f32 {
    let two_pi = 2.0 * PI;
    let w = a - two_pi * ((a + PI) / two_pi).floor();
    if w >= PI {
        w - two_pi
    } else {
        w
    }
}

fn check_finite(op: &'static str, v: &[f32]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// One environment instance: its kind plus parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Env {
    pub kind: EnvKind,
    pub params: EnvParams,
}

impl Env {
    pub fn new(kind: EnvKind, params: EnvParams) -> Self {
        Env { kind, params }
    }

    pub fn action_bounds(&self) -> (f32, f32) {
        match self.kind {
            EnvKind::Pendulum => self.params.pendulum.torque_bounds,
            EnvKind::Dubins => self.params.dubins.turn_bounds,
        }
    }

    pub fn action_dim(&self) -> usize {
        1
    }

    pub fn proprio_dim(&self) -> usize {
        1
    }

    fn expect_kind(&self, s: &EnvState) -> Result<()> {
        if s.kind() != self.kind {
            return Err(Error::invalid(format!("{} state given to {} env", s.kind(), self.kind)));
        }
        Ok(())
    }

    pub fn step(&self, s: &EnvState, u: f32) -> Result<EnvState> {
        self.expect_kind(s)?;
        match *s {
            EnvState::Pendulum(p) => Ok(EnvState::Pendulum(pendulum::step(p, u, &self.params.pendulum)?)),
            EnvState::Dubins(d) => Ok(EnvState::Dubins(dubins::step(d, u, &self.params.dubins)?)),
        }
    }

    pub fn render(&self, s: &EnvState) -> Result<Frame> {
        self.expect_kind(s)?;
        check_finite("render", &s.to_vec())?;
        let RenderParams { width, height } = self.params.render;
        Ok(match *s {
            EnvState::Pendulum(p) => render::render_pendulum(p, width, height),
            EnvState::Dubins(d) => render::render_dubins(d, &self.params.dubins, width, height),
        })
    }

    pub fn label(&self, s: &EnvState) -> SafetyLabel {
        label(s)
    }

    pub fn reference_action(&self, s: &EnvState) -> f32 {
        match *s {
            EnvState::Pendulum(p) => pendulum::reference_policy(p, &self.params.pendulum),
            EnvState::Dubins(d) => dubins::reference_policy(d, &self.params.dubins),
        }
    }

    pub fn proprio(&self, s: &EnvState) -> Vec<f32> {
        proprio(s)
    }

    /// Uniform over the full state domain.
    pub fn random_state(&self, rng: &mut Rng) -> EnvState {
        match self.kind {
            EnvKind::Pendulum => {
                let m = self.params.pendulum.max_speed;
                EnvState::Pendulum(PendulumState {
                    theta: rng.gen_range(-PI..PI),
                    theta_dot: rng.gen_range(-m..=m),
                })
            }
            EnvKind::Dubins => {
                let a = self.params.dubins.arena;
                EnvState::Dubins(DubinsState {
                    x: rng.gen_range(-a..=a),
                    y: rng.gen_range(-a..=a),
                    theta: rng.gen_range(-PI..PI),
                })
            }
        }
    }

    /// Uniform over the region whose samples are labeled safe.
    pub fn random_safe_state(&self, rng: &mut Rng) -> EnvState {
        match self.kind {
            EnvKind::Pendulum => EnvState::Pendulum(PendulumState {
                theta: rng.gen_range(-PI / 12.0..=PI / 12.0),
                theta_dot: rng.gen_range(-0.25..=0.25),
            }),
            EnvKind::Dubins => loop {
                let s = self.random_state(rng);
                if label(&s) == SafetyLabel::Safe {
                    break s;
                }
            },
        }
    }

    pub fn random_action(&self, rng: &mut Rng) -> f32 {
        let (lo, hi) = self.action_bounds();
        rng.gen_range(lo..=hi)
    }
}

pub fn label(s: &EnvState) -> SafetyLabel {
    match *s {
        EnvState::Pendulum(p) => pendulum::label(p),
        EnvState::Dubins(d) => dubins::label(d),
    }
}

/// Angular velocity for the pendulum, heading for the Dubins car.
pub fn proprio(s: &EnvState) -> Vec<f32> {
    match *s {
        EnvState::Pendulum(p) => vec![p.theta_dot],
        EnvState::Dubins(d) => vec![d.theta],
    }
}
