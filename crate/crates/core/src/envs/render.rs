//! Deterministic rasterizer. Pixels are sampled at their centers; every
//! shape is a hard inside/outside test, so frames are bit-identical across
//! runs for the same state.

use std::io::Write;
use std::path::Path;

use super::dubins::{DubinsParams, DubinsState};
use super::pendulum::PendulumState;
use crate::error::{Error, Result};

/// RGB frame, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

type Rgb = [u8; 3];

const BACKGROUND: Rgb = [236, 236, 230];
const ROD: Rgb = [190, 52, 40];
const PIVOT: Rgb = [35, 35, 35];
const OBSTACLE: Rgb = [120, 120, 128];
const GOAL: Rgb = [40, 170, 70];
const AGENT: Rgb = [30, 80, 200];

impl Frame {
    pub fn blank(width: usize, height: usize) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&BACKGROUND);
        }
        Frame { width, height, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Paints every pixel whose center satisfies `inside`.
    fn fill(&mut self, color: Rgb, inside: impl Fn(f32, f32) -> bool) {
        for y in 0..self.height {
            for x in 0..self.width {
                if inside(x as f32 + 0.5, y as f32 + 0.5) {
                    let i = (y * self.width + x) * 3;
                    self.data[i..i + 3].copy_from_slice(&color);
                }
            }
        }
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_ppm())?;
        Ok(())
    }

    /// Number of pixels whose color differs between two equally sized frames.
    pub fn diff_pixels(&self, other: &Frame) -> Result<usize> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::shape(
                "diff_pixels",
                format!("{}x{} vs {}x{}", self.width, self.height, other.width, other.height),
            ));
        }
        Ok(self
            .data
            .chunks_exact(3)
            .zip(other.data.chunks_exact(3))
            .filter(|(a, b)| a != b)
            .count())
    }
}

fn segment_distance(px: f32, py: f32, a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn edge(a: (f32, f32), b: (f32, f32), px: f32, py: f32) -> f32 {
    (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0)
}

fn in_triangle(px: f32, py: f32, t: [(f32, f32); 3]) -> bool {
    let e0 = edge(t[0], t[1], px, py);
    let e1 = edge(t[1], t[2], px, py);
    let e2 = edge(t[2], t[0], px, py);
    (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
}

/// Rod from the image center at angle `theta` (0 = straight up), with a bob at the tip.
pub fn render_pendulum(s: PendulumState, width: usize, height: usize) -> Frame {
    let mut f = Frame::blank(width, height);
    let scale = width.min(height) as f32;
    let c = (width as f32 / 2.0, height as f32 / 2.0);
    let len = 0.40 * scale;
    let half_w = 0.05 * scale;
    let tip = (c.0 + len * s.theta.sin(), c.1 - len * s.theta.cos());
    f.fill(ROD, |x, y| segment_distance(x, y, c, tip) <= half_w);
    let bob = 0.085 * scale;
    f.fill(ROD, |x, y| (x - tip.0).powi(2) + (y - tip.1).powi(2) <= bob * bob);
    let pivot = 0.04 * scale;
    f.fill(PIVOT, |x, y| (x - c.0).powi(2) + (y - c.1).powi(2) <= pivot * pivot);
    f
}

/// Obstacle disk at the center, goal square, and the agent as a triangle pointing along its heading.
pub fn render_dubins(s: DubinsState, p: &DubinsParams, width: usize, height: usize) -> Frame {
    let mut f = Frame::blank(width, height);
    let sx = width as f32 / (2.0 * p.arena);
    let sy = height as f32 / (2.0 * p.arena);
    let to_px = |x: f32, y: f32| ((x + p.arena) * sx, (p.arena - y) * sy);

    let (ox, oy) = to_px(0.0, 0.0);
    let (rx, ry) = (p.obstacle_radius * sx, p.obstacle_radius * sy);
    f.fill(OBSTACLE, |x, y| ((x - ox) / rx).powi(2) + ((y - oy) / ry).powi(2) <= 1.0);

    let (gx, gy) = to_px(p.goal.0, p.goal.1);
    let gh = 0.08 * sx;
    f.fill(GOAL, |x, y| (x - gx).abs() <= gh && (y - gy).abs() <= gh);

    let (c, sn) = (s.theta.cos(), s.theta.sin());
    let nose = to_px(s.x + 0.32 * c, s.y + 0.32 * sn);
    let left = to_px(s.x - 0.19 * c - 0.18 * sn, s.y - 0.19 * sn + 0.18 * c);
    let right = to_px(s.x - 0.19 * c + 0.18 * sn, s.y - 0.19 * sn - 0.18 * c);
    f.fill(AGENT, |x, y| in_triangle(x, y, [nose, left, right]));
    f
}
