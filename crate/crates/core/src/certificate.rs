//! Barrier network `B(z)` on pooled latents and its training losses.
//!
//! Sign convention: `B ≤ 0` marks the safe side, `B > 0` the unsafe side.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ndmath::{checkpoint, Graph, Tensor, Var};
use crate::nn::{Bound, Mlp, ParamStore};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BarrierHyper {
    pub xi1: f32,
    pub xi2: f32,
    pub alpha: f32,
    pub gamma: f32,
}

impl Default for BarrierHyper {
    fn default() -> Self {
        BarrierHyper {
            xi1: 1.0,
            xi2: 1.0,
            alpha: 1.0,
            gamma: 0.1,
        }
    }
}

impl BarrierHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi1 > 0.0 && self.xi2 > 0.0) {
            return Err(Error::invalid("xi1 and xi2 must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::invalid("alpha must be positive"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid("gamma must be nonnegative"));
        }
        Ok(())
    }
}

/// Per-feature affine map applied before an MLP: `(x - mean) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Mean and standard deviation of `rows`; near-constant features keep scale 1.
    pub fn fit(rows: &[Vec<f32>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::invalid("cannot standardize an empty set"))?;
        let dim = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0f64; dim];
        for r in rows {
            if r.len() != dim {
                return Err(Error::shape("standardize", format!("row of {} vs {}", r.len(), dim)));
            }
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; dim];
        for r in rows {
            for ((s, &v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        let scale = var
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-6 {
                    sd as f32
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let m = g.constant(Tensor::vector(self.mean.clone()));
        let s = g.constant(Tensor::vector(self.scale.iter().map(|s| 1.0 / s).collect()));
        let c = g.sub(x, m)?;
        g.mul(c, s)
    }

    pub fn entries(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.in_mean"), Tensor::vector(self.mean.clone())),
            (format!("{prefix}.in_scale"), Tensor::vector(self.scale.clone())),
        ]
    }

    pub fn from_entries(entries: &[(String, Tensor)], prefix: &str, dim: usize, path: &Path) -> Result<Self> {
        Ok(Standardizer {
            mean: checkpoint::take(entries, &format!("{prefix}.in_mean"), &[dim], path)?.into_data(),
            scale: checkpoint::take(entries, &format!("{prefix}.in_scale"), &[dim], path)?.into_data(),
        })
    }
}

/// Stacks equal-length rows into an `n × d` tensor.
pub fn stack(rows: &[&[f32]], d: usize, op: &'static str) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(Error::shape(op, format!("input of length {}, expected {}", r.len(), d)));
        }
        data.extend_from_slice(r);
    }
    Tensor::matrix(rows.len(), d, data)
}

#[derive(Clone, Debug)]
pub struct BarrierNet {
    store: ParamStore,
    mlp: Mlp,
    input: Standardizer,
    hidden: Vec<usize>,
}

impl BarrierNet {
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut r = rng::stream(seed, "init.barrier");
        let mut store = ParamStore::new();
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mlp = Mlp::new(&mut store, "barrier", &sizes, &mut r);
        BarrierNet {
            store,
            mlp,
            input: Standardizer::identity(input_dim),
            hidden: hidden.to_vec(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.input
    }

    pub fn set_standardizer(&mut self, s: Standardizer) -> Result<()> {
        if s.dim() != self.input_dim() {
            return Err(Error::shape("barrier_value", format!("standardizer of {} for input {}", s.dim(), self.input_dim())));
        }
        self.input = s;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.store.bind(g, trainable)
    }

    /// `n × E` pooled latents → `n × 1` barrier values.
    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let cols = g.value(z).cols();
        if cols != self.input_dim() {
            return Err(Error::shape("barrier_value", format!("latent of {} vs barrier input {}", cols, self.input_dim())));
        }
        let x = self.input.apply(g, z)?;
        self.mlp.forward(g, p, x)
    }

    pub fn value(&self, z: &[f32]) -> Result<f32> {
        Ok(self.values(&[z])?[0])
    }

    /// One value per row.
    pub fn values(&self, zs: &[&[f32]]) -> Result<Vec<f32>> {
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let z = g.constant(stack(zs, self.input_dim(), "barrier_value")?);
        let out = self.forward(&mut g, &p, z)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = self.store.entries();
        entries.extend(self.input.entries("barrier"));
        checkpoint::save(path, &entries)
    }

    pub fn load(path: &Path, input_dim: usize, hidden: &[usize]) -> Result<Self> {
        let mut b = BarrierNet::new(input_dim, hidden, 0);
        let entries = checkpoint::load(path)?;
        b.store.load_entries(&entries, path)?;
        b.input = Standardizer::from_entries(&entries, "barrier", input_dim, path)?;
        Ok(b)
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }
}

/// `ξ₁ Σ max(0, B + γ)` over safe values plus `ξ₂ Σ max(0, γ − B)` over unsafe values.
pub fn barrier_loss_on(g: &mut Graph, safe: Var, unsafe_: Var, h: &BarrierHyper) -> Result<Var> {
    if g.value(safe).numel() == 0 || g.value(unsafe_).numel() == 0 {
        return Err(Error::invalid("barrier loss needs nonempty safe and unsafe batches"));
    }
    let s = g.add_scalar(safe, h.gamma)?;
    let s = g.relu_hinge(s)?;
    let s = g.sum(s)?;
    let u = g.scale(unsafe_, -1.0)?;
    let u = g.add_scalar(u, h.gamma)?;
    let u = g.relu_hinge(u)?;
    let u = g.sum(u)?;
    let s = g.scale(s, h.xi1)?;
    let u = g.scale(u, h.xi2)?;
    g.add(s, u)
}

pub fn barrier_loss(b: &BarrierNet, safe: &[&[f32]], unsafe_: &[&[f32]], h: &BarrierHyper) -> Result<f32> {
    if safe.is_empty() || unsafe_.is_empty() {
        return Err(Error::invalid("barrier loss needs nonempty safe and unsafe batches"));
    }
    let mut g = Graph::new();
    let p = b.bind(&mut g, false);
    let zs = g.constant(stack(safe, b.input_dim(), "barrier_loss")?);
    let zu = g.constant(stack(unsafe_, b.input_dim(), "barrier_loss")?);
    let bs = b.forward(&mut g, &p, zs)?;
    let bu = b.forward(&mut g, &p, zu)?;
    let l = barrier_loss_on(&mut g, bs, bu, h)?;
    g.value(l).item()
}

/// Position of a sample inside the labeled dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StepId {
    pub trajectory: usize,
    pub step: usize,
}

/// Consecutive pooled latents `(z_i, z_{i+1})` of one trajectory.
#[derive(Clone, Copy, Debug)]
pub struct Transition<'a> {
    pub from: StepId,
    pub to: StepId,
    pub z: &'a [f32],
    pub z_next: &'a [f32],
}

pub fn check_consecutive(pairs: &[Transition]) -> Result<()> {
    for t in pairs {
        if t.from.trajectory != t.to.trajectory || t.to.step != t.from.step + 1 {
            return Err(Error::invalid(format!(
                "lie pair {:?} -> {:?} is not a consecutive step of one trajectory",
                t.from, t.to
            )));
        }
    }
    Ok(())
}

/// Safe channel `Σ max(0, B(z') − αB(z))`, unsafe channel `Σ max(0, B(z) − αB(z'))`.
/// Either channel may be `None` (empty).
pub fn lie_loss_on(
    g: &mut Graph,
    safe: Option<(Var, Var)>,
    unsafe_: Option<(Var, Var)>,
    h: &BarrierHyper,
) -> Result<Var> {
    let mut terms = Vec::new();
    if let Some((cur, next)) = safe {
        let ac = g.scale(cur, h.alpha)?;
        let d = g.sub(next, ac)?;
        let d = g.relu_hinge(d)?;
        terms.push(g.sum(d)?);
    }
    if let Some((cur, next)) = unsafe_ {
        let an = g.scale(next, h.alpha)?;
        let d = g.sub(cur, an)?;
        let d = g.relu_hinge(d)?;
        terms.push(g.sum(d)?);
    }
    match terms.as_slice() {
        [] => Ok(g.constant(Tensor::scalar(0.0))),
        [t] => Ok(*t),
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    }
}

/// Barrier values of `(z, z')` for each pair, as two `n × 1` vars.
pub fn pair_values(g: &mut Graph, b: &BarrierNet, p: &Bound, pairs: &[Transition]) -> Result<Option<(Var, Var)>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    check_consecutive(pairs)?;
    let d = b.input_dim();
    let cur: Vec<&[f32]> = pairs.iter().map(|t| t.z).collect();
    let next: Vec<&[f32]> = pairs.iter().map(|t| t.z_next).collect();
    let zc = g.constant(stack(&cur, d, "lie_loss")?);
    let zn = g.constant(stack(&next, d, "lie_loss")?);
    Ok(Some((b.forward(g, p, zc)?, b.forward(g, p, zn)?)))
}

/// Pairs are routed to a channel by the caller according to the label of `z_{i+1}`.
pub fn lie_loss(b: &BarrierNet, safe: &[Transition], unsafe_: &[Transition], h: &BarrierHyper) -> Result<f32> {
    let mut g = Graph::new();
    let p = b.bind(&mut g, false);
    let s = pair_values(&mut g, b, &p, safe)?;
    let u = pair_values(&mut g, b, &p, unsafe_)?;
    let l = lie_loss_on(&mut g, s, u, h)?;
    g.value(l).item()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(g: &mut Graph, v: &[f32]) -> Var {
        g.constant(Tensor::matrix(v.len(), 1, v.to_vec()).unwrap())
    }

    fn barrier_on_values(s: &[f32], u: &[f32], h: &BarrierHyper) -> f32 {
        let mut g = Graph::new();
        let (a, b) = (col(&mut g, s), col(&mut g, u));
        let l = barrier_loss_on(&mut g, a, b, h).unwrap();
        g.value(l).item().unwrap()
    }

    fn lie_on_values(safe: Option<(&[f32], &[f32])>, unsafe_: Option<(&[f32], &[f32])>, alpha: f32) -> f32 {
        let mut g = Graph::new();
        let s = safe.map(|(c, n)| (col(&mut g, c), col(&mut g, n)));
        let u = unsafe_.map(|(c, n)| (col(&mut g, c), col(&mut g, n)));
        let h = BarrierHyper { alpha, ..BarrierHyper::default() };
        let l = lie_loss_on(&mut g, s, u, &h).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn barrier_loss_hand_values() {
        let h0 = BarrierHyper { gamma: 0.0, ..BarrierHyper::default() };
        assert!((barrier_on_values(&[-1.0, 0.5], &[0.2, -0.3], &h0) - 0.8).abs() < 1e-6);
        let h1 = BarrierHyper::default();
        assert!((barrier_on_values(&[-1.0, 0.5], &[0.2, -0.3], &h1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_zero_barrier_is_a_degenerate_minimizer() {
        let h0 = BarrierHyper { gamma: 0.0, ..BarrierHyper::default() };
        assert_eq!(barrier_on_values(&[0.0; 5], &[0.0; 4], &h0), 0.0);
        assert!(barrier_on_values(&[0.0; 5], &[0.0; 4], &BarrierHyper::default()) > 0.0);
    }

    #[test]
    fn empty_barrier_batch_is_rejected() {
        let mut g = Graph::new();
        let a = col(&mut g, &[1.0]);
        let e = g.constant(Tensor::zeros(&[0, 1]));
        assert!(barrier_loss_on(&mut g, a, e, &BarrierHyper::default()).is_err());
    }

    #[test]
    fn lie_loss_hand_values() {
        assert!((lie_on_values(Some((&[-0.5], &[-0.2])), None, 1.0) - 0.3).abs() < 1e-6);
        assert_eq!(lie_on_values(Some((&[-0.2], &[-0.5])), None, 1.0), 0.0);
        assert!((lie_on_values(None, Some((&[0.4], &[0.1])), 1.0) - 0.3).abs() < 1e-6);
        assert_eq!(lie_on_values(Some((&[0.7, 0.7], &[0.7, 0.7])), Some((&[0.7], &[0.7])), 1.0), 0.0);
    }

    #[test]
    fn crossing_pairs_are_rejected() {
        let b = BarrierNet::new(2, &[4], 0);
        let z = [0.0f32, 1.0];
        let bad = Transition {
            from: StepId { trajectory: 0, step: 99 },
            to: StepId { trajectory: 1, step: 0 },
            z: &z,
            z_next: &z,
        };
        assert!(lie_loss(&b, &[bad], &[], &BarrierHyper::default()).is_err());
        let skip = Transition {
            from: StepId { trajectory: 0, step: 3 },
            to: StepId { trajectory: 0, step: 5 },
            ..bad
        };
        assert!(lie_loss(&b, &[], &[skip], &BarrierHyper::default()).is_err());
    }

    #[test]
    fn batched_values_match_single() {
        let b = BarrierNet::new(3, &[8, 8], 4);
        let rows = [[0.1f32, -0.2, 0.3], [1.0, 0.0, -1.0]];
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let v = b.values(&refs).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[1], b.value(&rows[1]).unwrap());
        assert_eq!(b.value(&rows[0]).unwrap(), b.value(&rows[0]).unwrap());
        assert!(b.value(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn standardizer_fit() {
        let s = Standardizer::fit(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.scale, vec![1.0, 1.0]);
        let s = Standardizer::fit(&[vec![0.0], vec![4.0]]).unwrap();
        assert_eq!(s.scale, vec![2.0]);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.lcbc");
        let mut b = BarrierNet::new(2, &[4, 4], 9);
        b.set_standardizer(Standardizer {
            mean: vec![0.5, -0.5],
            scale: vec![2.0, 3.0],
        })
        .unwrap();
        b.save(&path).unwrap();
        let back = BarrierNet::load(&path, 2, &[4, 4]).unwrap();
        assert_eq!(back.value(&[0.3, 0.2]).unwrap(), b.value(&[0.3, 0.2]).unwrap());
    }
}
