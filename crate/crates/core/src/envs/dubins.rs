use super::{check_finite, wrap_angle, SafetyLabel};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DubinsState {
    pub x: f32,
    pub y: f32,
    pub theta: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DubinsParams {
    pub speed: f32,
    pub dt: f32,
    pub turn_bounds: (f32, f32),
    /// Half-width of the square arena.
    pub arena: f32,
    pub goal: (f32, f32),
    /// Radius of the drawn obstacle disk (labels use boxes, not the disk).
    pub obstacle_radius: f32,
    pub k_theta: f32,
}

impl Default for DubinsParams {
    fn default() -> Self {
        DubinsParams {
            speed: 1.0,
            dt: 0.1,
            turn_bounds: (-2.0, 2.0),
            arena: 1.5,
            goal: (1.2, 1.2),
            obstacle_radius: 0.5,
            k_theta: 3.0,
        }
    }
}

pub const UNSAFE_HALF_WIDTH: f32 = 0.7;
pub const SAFE_EXCLUDED_HALF_WIDTH: f32 = 0.9;

pub fn step(s: DubinsState, u: f32, p: &DubinsParams) -> Result<DubinsState> {
    check_finite("dubins_step", &[s.x, s.y, s.theta, u])?;
    let (lo, hi) = p.turn_bounds;
    if u < lo || u > hi {
        log::warn!("dubins turn rate {u} outside [{lo}, {hi}], clamping");
    }
    let u = u.clamp(lo, hi);
    Ok(DubinsState {
        x: (s.x + p.speed * s.theta.cos() * p.dt).clamp(-p.arena, p.arena),
        y: (s.y + p.speed * s.theta.sin() * p.dt).clamp(-p.arena, p.arena),
        theta: wrap_angle(s.theta + u * p.dt),
    })
}

pub fn label(s: DubinsState) -> SafetyLabel {
    let inf = s.x.abs().max(s.y.abs());
    if inf <= UNSAFE_HALF_WIDTH {
        SafetyLabel::Unsafe
    } else if inf > SAFE_EXCLUDED_HALF_WIDTH {
        SafetyLabel::Safe
    } else {
        SafetyLabel::Neither
    }
}

/// Proportional heading controller toward the goal.
pub fn reference_policy(s: DubinsState, p: &DubinsParams) -> f32 {
    let bearing = (p.goal.1 - s.y).atan2(p.goal.0 - s.x);
    let (lo, hi) = p.turn_bounds;
    (p.k_theta * wrap_angle(bearing - s.theta)).clamp(lo, hi)
}
