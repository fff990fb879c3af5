use std::f32::consts::{FRAC_PI_2, PI};

use super::{check_finite, wrap_angle, SafetyLabel};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumState {
    pub theta: f32,
    pub theta_dot: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumParams {
    pub mass: f32,
    pub length: f32,
    pub gravity: f32,
    pub dt: f32,
    pub torque_bounds: (f32, f32),
    pub max_speed: f32,
    pub kp: f32,
    pub kd: f32,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            mass: 1.0,
            length: 1.0,
            gravity: 10.0,
            dt: 0.05,
            torque_bounds: (-6.0, 6.0),
            max_speed: 3.5,
            kp: 20.0,
            kd: 5.0,
        }
    }
}

/// Explicit Euler step; `theta = 0` is upright.
pub fn step(s: PendulumState, u: f32, p: &PendulumParams) -> Result<PendulumState> {
    check_finite("pendulum_step", &[s.theta, s.theta_dot, u])?;
    let (lo, hi) = p.torque_bounds;
    if u < lo || u > hi {
        log::warn!("pendulum torque {u} outside [{lo}, {hi}], clamping");
    }
    let u = u.clamp(lo, hi);
    let accel = (p.gravity / p.length) * s.theta.sin() + u / (p.mass * p.length * p.length);
    let theta = s.theta + s.theta_dot * p.dt;
    let theta_dot = s.theta_dot + accel * p.dt;
    Ok(PendulumState {
        theta: wrap_angle(theta),
        theta_dot: theta_dot.clamp(-p.max_speed, p.max_speed),
    })
}

pub fn label(s: PendulumState) -> SafetyLabel {
    if s.theta.abs() <= PI / 12.0 && s.theta_dot.abs() <= 0.25 {
        SafetyLabel::Safe
    } else if s.theta.abs() > FRAC_PI_2 || s.theta_dot.abs() > 1.5 {
        SafetyLabel::Unsafe
    } else {
        SafetyLabel::Neither
    }
}

/// PD controller toward the upright equilibrium.
pub fn reference_policy(s: PendulumState, p: &PendulumParams) -> f32 {
    let (lo, hi) = p.torque_bounds;
    (-p.kp * s.theta - p.kd * s.theta_dot).clamp(lo, hi)
}
