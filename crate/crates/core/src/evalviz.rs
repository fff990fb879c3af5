//! Empirical checks of the certificate conditions and artifact export.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::certificate::{BarrierNet, StepId};
use crate::controller::PolicyNet;
use crate::encoder::{Encoder, Latent};
use crate::envs::{DubinsState, Env, EnvKind, EnvState, Frame, PendulumState, SafetyLabel};
use crate::error::{Error, Result};
use crate::pipeline::{LabeledSets, TransitionDataset};
use crate::rng::{self, Rng};
use crate::world_model::{ContextWindow, TransitionModel};

/// Scalar certificate over pooled latents.
pub trait Certificate {
    fn value(&self, z: &[f32]) -> Result<f32>;
}

/// Action from pooled latent and proprio.
pub trait Controller {
    fn act(&self, z: &[f32], proprio: &[f32]) -> Result<Vec<f32>>;
}

/// Next latent from a full context window.
pub trait LatentDynamics {
    fn predict(&self, ctx: &ContextWindow) -> Result<Latent>;
}

/// Frame to latent.
pub trait Observer {
    fn observe(&self, frame: &Frame) -> Result<Latent>;
}

impl Certificate for BarrierNet {
    fn value(&self, z: &[f32]) -> Result<f32> {
        BarrierNet::value(self, z)
    }
}

impl Controller for PolicyNet {
    fn act(&self, z: &[f32], proprio: &[f32]) -> Result<Vec<f32>> {
        PolicyNet::act(self, z, proprio)
    }
}

impl LatentDynamics for TransitionModel {
    fn predict(&self, ctx: &ContextWindow) -> Result<Latent> {
        self.predict_next(ctx)
    }
}

impl Observer for Encoder {
    fn observe(&self, frame: &Frame) -> Result<Latent> {
        self.encode(frame)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignAccuracy {
    /// Fraction of safe samples with `B ≤ 0`.
    pub safe: f64,
    /// Fraction of unsafe samples with `B > 0`.
    pub unsafe_: f64,
    pub n_safe: usize,
    pub n_unsafe: usize,
}

pub fn sign_accuracy(safe_values: &[f32], unsafe_values: &[f32]) -> Result<SignAccuracy> {
    if safe_values.is_empty() || unsafe_values.is_empty() {
        return Err(Error::invalid("sign accuracy needs nonempty safe and unsafe sets"));
    }
    let frac = |v: &[f32], ok: fn(f32) -> bool| v.iter().filter(|&&b| ok(b)).count() as f64 / v.len() as f64;
    Ok(SignAccuracy {
        safe: frac(safe_values, |b| b <= 0.0),
        unsafe_: frac(unsafe_values, |b| b > 0.0),
        n_safe: safe_values.len(),
        n_unsafe: unsafe_values.len(),
    })
}

/// Sign accuracy of `b` on the labeled records of `sets` (the held-out part).
pub fn verify_signs(
    b: &impl Certificate,
    obs: &impl Observer,
    ds: &TransitionDataset,
    sets: &LabeledSets,
) -> Result<SignAccuracy> {
    let values = |ids: &[StepId]| -> Result<Vec<f32>> {
        ids.iter()
            .map(|&id| b.value(&obs.observe(&ds.record(id).frame)?.pooled))
            .collect()
    };
    sign_accuracy(&values(&sets.safe)?, &values(&sets.unsafe_)?)
}

/// A context window whose newest action slot is filled by the controller,
/// with the true state of its newest entry.
#[derive(Clone, Debug)]
pub struct DecreaseSample {
    pub ctx: ContextWindow,
    pub state: EnvState,
}

/// Up to `n` contexts ending at records of `episodes`, drawn without replacement.
pub fn decrease_samples(
    obs: &impl Observer,
    ds: &TransitionDataset,
    episodes: &[usize],
    context: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<DecreaseSample>> {
    let mut ends: Vec<StepId> = Vec::new();
    for &e in episodes {
        let len = ds.episodes[e].records.len();
        ends.extend((context..len).map(|t| StepId { trajectory: e, step: t }));
    }
    let mut r = rng::stream(seed, "shuffle.decrease");
    ends.shuffle(&mut r);
    ends.truncate(n);
    ends.sort();
    let mut cache: Option<(usize, Vec<Latent>)> = None;
    let mut out = Vec::with_capacity(ends.len());
    for id in ends {
        let ep = &ds.episodes[id.trajectory];
        if cache.as_ref().map(|c| c.0) != Some(id.trajectory) {
            let lats = ep.records.iter().map(|r| obs.observe(&r.frame)).collect::<Result<Vec<_>>>()?;
            cache = Some((id.trajectory, lats));
        }
        let lats = &cache.as_ref().expect("filled above").1;
        let range = id.step - context..=id.step;
        let action_dim = ep.actions.first().map_or(1, Vec::len);
        out.push(DecreaseSample {
            ctx: ContextWindow {
                latents: range.clone().map(|t| lats[t].clone()).collect(),
                actions: range
                    .clone()
                    .map(|t| ep.actions.get(t).cloned().unwrap_or_else(|| vec![0.0; action_dim]))
                    .collect(),
                proprios: range.map(|t| ep.records[t].proprio.clone()).collect(),
            },
            state: ep.records[id.step].state,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecreaseReport {
    /// Fraction with `B(pool(d(ctx, π))) > B(z_t)`.
    pub latent: f64,
    /// Fraction with `B(pool(enc(render(step(s, π))))) > B(z_t)`.
    pub ground_truth: f64,
    /// Fraction where both checks give the same verdict.
    pub agreement: f64,
    pub n: usize,
}

/// Decrease-condition violation rates; ties count as satisfied.
pub fn verify_decrease(
    b: &impl Certificate,
    pi: &impl Controller,
    model: &impl LatentDynamics,
    obs: &impl Observer,
    env: &Env,
    samples: &[DecreaseSample],
) -> Result<DecreaseReport> {
    if samples.is_empty() {
        return Err(Error::invalid("no decrease samples"));
    }
    let (mut latent, mut truth, mut agree) = (0usize, 0usize, 0usize);
    for s in samples {
        let z = s.ctx.latents.last().expect("window is nonempty");
        let p = s.ctx.proprios.last().expect("window is nonempty");
        let b_now = b.value(&z.pooled)?;
        let u = pi.act(&z.pooled, p)?;
        let mut ctx = s.ctx.clone();
        *ctx.actions.last_mut().expect("window is nonempty") = u.clone();
        let pred = model.predict(&ctx)?;
        let lv = b.value(&pred.pooled)? > b_now;
        let next = env.step(&s.state, u[0])?;
        let tv = b.value(&obs.observe(&env.render(&next)?)?.pooled)? > b_now;
        latent += lv as usize;
        truth += tv as usize;
        agree += (lv == tv) as usize;
    }
    let n = samples.len() as f64;
    Ok(DecreaseReport {
        latent: latent as f64 / n,
        ground_truth: truth as f64 / n,
        agreement: agree as f64 / n,
        n: samples.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutReport {
    /// Fraction of rollouts that never visit an unsafe state.
    pub safety_rate: f64,
    /// Fraction of rollouts whose final state is safe.
    pub final_safe_rate: f64,
    pub trajectories: Vec<Vec<EnvState>>,
}

/// Closed-loop rollouts of `horizon` steps from each start.
pub fn rollout_safety(
    env: &Env,
    starts: &[EnvState],
    horizon: usize,
    mut act: impl FnMut(&EnvState) -> Result<f32>,
) -> Result<RolloutReport> {
    if starts.is_empty() {
        return Err(Error::invalid("no rollout starts"));
    }
    let (mut safe, mut final_safe) = (0usize, 0usize);
    let mut trajectories = Vec::with_capacity(starts.len());
    for &s0 in starts {
        let mut traj = vec![s0];
        let mut s = s0;
        let mut ok = env.label(&s) != SafetyLabel::Unsafe;
        for _ in 0..horizon {
            s = env.step(&s, act(&s)?)?;
            ok &= env.label(&s) != SafetyLabel::Unsafe;
            traj.push(s);
        }
        safe += ok as usize;
        final_safe += (env.label(&s) == SafetyLabel::Safe) as usize;
        trajectories.push(traj);
    }
    let n = starts.len() as f64;
    Ok(RolloutReport {
        safety_rate: safe as f64 / n,
        final_safe_rate: final_safe as f64 / n,
        trajectories,
    })
}

/// `π(enc(render(s)), proprio(s))` as a closed-loop action.
pub fn image_policy<'a>(
    pi: &'a impl Controller,
    obs: &'a impl Observer,
    env: &'a Env,
) -> impl FnMut(&EnvState) -> Result<f32> + 'a {
    move |s| {
        let z = obs.observe(&env.render(s)?)?;
        Ok(pi.act(&z.pooled, &env.proprio(s))?[0])
    }
}

pub fn safe_starts(env: &Env, n: usize, seed: u64) -> Vec<EnvState> {
    let mut r = rng::stream(seed, "rollout.safe_starts");
    (0..n).map(|_| env.random_safe_state(&mut r)).collect()
}

/// States labeled Neither or Unsafe, for the attraction measurement.
pub fn outside_starts(env: &Env, n: usize, seed: u64) -> Vec<EnvState> {
    let mut r: Rng = rng::stream(seed, "rollout.outside_starts");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = env.random_state(&mut r);
        if env.label(&s) != SafetyLabel::Safe {
            out.push(s);
        }
    }
    out
}

/// Two-dimensional state grid. Pendulum: `Θ × Θ̇`; Dubins: `x × y` at `theta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub theta: f32,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { nx: 50, ny: 50, theta: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatCell {
    pub ix: usize,
    pub iy: usize,
    pub x: f32,
    pub y: f32,
    pub b: f32,
    pub label: String,
}

pub fn label_name(l: SafetyLabel) -> &'static str {
    match l {
        SafetyLabel::Safe => "safe",
        SafetyLabel::Unsafe => "unsafe",
        SafetyLabel::Neither => "neither",
    }
}

/// Cell-center state of grid cell `(ix, iy)`.
pub fn grid_state(env: &Env, grid: &GridSpec, ix: usize, iy: usize) -> (f32, f32, EnvState) {
    let lerp = |lo: f32, hi: f32, i: usize, n: usize| lo + (hi - lo) * (i as f32 + 0.5) / n as f32;
    match env.kind {
        EnvKind::Pendulum => {
            let m = env.params.pendulum.max_speed;
            let th = lerp(-std::f32::consts::PI, std::f32::consts::PI, ix, grid.nx);
            let om = lerp(-m, m, iy, grid.ny);
            (th, om, EnvState::Pendulum(PendulumState { theta: th, theta_dot: om }))
        }
        EnvKind::Dubins => {
            let a = env.params.dubins.arena;
            let x = lerp(-a, a, ix, grid.nx);
            let y = lerp(-a, a, iy, grid.ny);
            (x, y, EnvState::Dubins(DubinsState { x, y, theta: grid.theta }))
        }
    }
}

/// Barrier value at every grid cell, row-major in `iy` then `ix`.
pub fn export_heatmap(
    b: &impl Certificate,
    obs: &impl Observer,
    env: &Env,
    grid: &GridSpec,
) -> Result<Vec<HeatCell>> {
    if grid.nx == 0 || grid.ny == 0 {
        return Err(Error::invalid("heatmap grid must be nonempty"));
    }
    let mut cells = Vec::with_capacity(grid.nx * grid.ny);
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let (x, y, s) = grid_state(env, grid, ix, iy);
            let z = obs.observe(&env.render(&s)?)?;
            cells.push(HeatCell {
                ix,
                iy,
                x,
                y,
                b: b.value(&z.pooled)?,
                label: label_name(env.label(&s)).to_string(),
            });
        }
    }
    Ok(cells)
}

pub fn write_heatmap_csv(cells: &[HeatCell], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in cells {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_heatmap_csv(path: &Path) -> Result<Vec<HeatCell>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|c| c.map_err(Error::from)).collect()
}

/// Fraction of safe/unsafe cells whose barrier sign matches the label.
pub fn heatmap_agreement(cells: &[HeatCell]) -> Result<f64> {
    let labeled: Vec<&HeatCell> = cells.iter().filter(|c| c.label != "neither").collect();
    if labeled.is_empty() {
        return Err(Error::invalid("heatmap has no labeled cells"));
    }
    let ok = labeled
        .iter()
        .filter(|c| (c.label == "safe") == (c.b <= 0.0))
        .count();
    Ok(ok as f64 / labeled.len() as f64)
}

/// Blue below zero, white at zero, red above, scaled by the largest `|B|`.
pub fn diverging_color(b: f32, scale: f32) -> [u8; 3] {
    let t = if scale > 0.0 { (b / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |t: f32| (255.0 * (1.0 - t.abs())).round() as u8;
    if t >= 0.0 {
        [255, fade(t), fade(t)]
    } else {
        [fade(t), fade(t), 255]
    }
}

/// P6 image of the heatmap, `cell_px` pixels per cell, highest `y` on top.
pub fn heatmap_ppm(cells: &[HeatCell], grid: &GridSpec, cell_px: usize) -> Result<Frame> {
    if cells.len() != grid.nx * grid.ny {
        return Err(Error::shape("heatmap_ppm", "cell count does not match the grid"));
    }
    let scale = cells.iter().map(|c| c.b.abs()).fold(0.0f32, f32::max);
    let (w, h) = (grid.nx * cell_px, grid.ny * cell_px);
    let mut data = vec![0u8; w * h * 3];
    for c in cells {
        let color = diverging_color(c.b, scale);
        let top = (grid.ny - 1 - c.iy) * cell_px;
        for py in top..top + cell_px {
            for px in c.ix * cell_px..(c.ix + 1) * cell_px {
                let i = (py * w + px) * 3;
                data[i..i + 3].copy_from_slice(&color);
            }
        }
    }
    Ok(Frame { width: w, height: h, data })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions, at most two.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component.
    pub variances: Vec<f64>,
    /// Projected coordinates, one entry per available component.
    pub coords: Vec<Vec<f64>>,
}

const PCA_ITERS: usize = 1000;
const PCA_RESIDUAL: f64 = 1e-9;

fn covariance(x: &[Vec<f64>], mean: &[f64]) -> Vec<Vec<f64>> {
    let d = mean.len();
    let mut c = vec![vec![0.0; d]; d];
    for row in x {
        let r: Vec<f64> = row.iter().zip(mean).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in i..d {
                c[i][j] += r[i] * r[j];
            }
        }
    }
    let n = x.len() as f64;
    for i in 0..d {
        for j in i..d {
            c[i][j] /= n - 1.0;
            c[j][i] = c[i][j];
        }
    }
    c
}

fn matvec(c: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    c.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dominant eigenpair of a symmetric positive semidefinite matrix.
fn power_iteration(c: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let d = c.len();
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * i as f64 / d as f64).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut lambda = 0.0;
    for _ in 0..PCA_ITERS {
        let w = matvec(c, &v);
        let n = norm(&w);
        if n == 0.0 {
            return (0.0, v);
        }
        let next: Vec<f64> = w.iter().map(|x| x / n).collect();
        lambda = n;
        let residual = norm(&matvec(c, &next).iter().zip(&next).map(|(a, b)| a - n * b).collect::<Vec<_>>());
        v = next;
        if residual <= PCA_RESIDUAL * n.max(1.0) {
            break;
        }
    }
    (lambda, v)
}

/// Top-two principal components by power iteration with deflation. Each
/// direction's largest-magnitude loading is made positive.
pub fn pca_projection(x: &[Vec<f32>]) -> Result<Pca> {
    if x.len() < 3 {
        return Err(Error::invalid("PCA needs at least 3 samples"));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::shape("pca_projection", "rows must share a nonzero width"));
    }
    let xs: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let n = xs.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut c = covariance(&xs, &mean);
    let total: f64 = (0..d).map(|i| c[i][i]).sum();
    let mut components = Vec::new();
    let mut variances = Vec::new();
    for _ in 0..2.min(d) {
        let (lambda, mut v) = power_iteration(&c);
        if lambda <= 1e-12 * total.max(1e-300) {
            break;
        }
        let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                c[i][j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        variances.push(lambda);
    }
    if components.len() < 2 {
        log::warn!(
            "PCA input has rank {} < 2; emitting {} component(s)",
            components.len(),
            components.len()
        );
    }
    let coords = xs
        .iter()
        .map(|r| {
            components
                .iter()
                .map(|v| r.iter().zip(&mean).zip(v).map(|((a, m), w)| (a - m) * w).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        variances,
        coords,
    })
}

/// Rows `(pc1, pc2, label)`; a missing component is left empty.
pub fn write_pca_csv(p: &Pca, labels: &[&str], path: &Path) -> Result<()> {
    if labels.len() != p.coords.len() {
        return Err(Error::shape("write_pca_csv", "one label per sample"));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["pc1", "pc2", "label"])?;
    for (c, l) in p.coords.iter().zip(labels) {
        let get = |i: usize| c.get(i).map(|v| v.to_string()).unwrap_or_default();
        w.write_record([get(0), get(1), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Logistic-regression classifier on standardised features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    sd: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

impl LinearProbe {
    /// Full-batch gradient descent, 2000 iterations at step 0.5.
    pub fn fit(x: &[Vec<f64>], y: &[bool]) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::invalid("linear probe needs one label per nonempty sample"));
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let sd: Vec<f64> = (0..d)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 1e-24 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut probe = LinearProbe { mean, sd, w: vec![0.0; d], b: 0.0 };
        let xs: Vec<Vec<f64>> = x.iter().map(|r| probe.standardize(r)).collect();
        let lr = 0.5;
        for _ in 0..2000 {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (r, &t) in xs.iter().zip(y) {
                let e = 1.0 / (1.0 + (-probe.logit_std(r)).exp()) - if t { 1.0 } else { 0.0 };
                gw.iter_mut().zip(r).for_each(|(g, a)| *g += e * a);
                gb += e;
            }
            probe.w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= lr * g / n);
            probe.b -= lr * gb / n;
        }
        Ok(probe)
    }

    fn standardize(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.mean).zip(&self.sd).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn logit_std(&self, r: &[f64]) -> f64 {
        r.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() + self.b
    }

    pub fn predict(&self, r: &[f64]) -> bool {
        self.logit_std(&self.standardize(r)) > 0.0
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[bool]) -> Result<f64> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::invalid("probe accuracy needs one label per nonempty sample"));
        }
        let correct = x.iter().zip(y).filter(|(r, &t)| self.predict(r) == t).count();
        Ok(correct as f64 / x.len() as f64)
    }
}

/// Training accuracy of a [`LinearProbe`].
pub fn linear_probe(x: &[Vec<f64>], y: &[bool]) -> Result<f64> {
    LinearProbe::fit(x, y)?.accuracy(x, y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub env: String,
    pub seed: u64,
    pub signs: SignAccuracy,
    pub decrease: DecreaseReport,
    pub rollout_safety: f64,
    pub rollout_reference: f64,
    pub n_rollouts: usize,
    pub rollout_horizon: usize,
    /// Rollouts from Neither/Unsafe starts that end in the safe set; informational.
    pub attraction: f64,
    pub attraction_reference: f64,
}

impl VerificationReport {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.signs.safe,
            self.signs.unsafe_,
            self.decrease.latent,
            self.decrease.ground_truth,
            self.decrease.agreement,
            self.rollout_safety,
            self.rollout_reference,
            self.attraction,
            self.attraction_reference,
        ];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::invalid("verification rates must lie in [0, 1]"));
        }
        if self.signs.n_safe == 0 || self.signs.n_unsafe == 0 || self.decrease.n == 0 || self.n_rollouts == 0 {
            return Err(Error::invalid("verification counts must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
