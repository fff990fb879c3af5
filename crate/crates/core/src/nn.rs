//! Parameter storage and the layers shared by every learned component.

use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::ndmath::{checkpoint, Gradients, Graph, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// `(name, tensor)` pairs for checkpointing.
    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().cloned())
            .collect()
    }

    /// Overwrites every parameter from `entries`, matching by name and shape.
    pub fn load_entries(&mut self, entries: &[(String, Tensor)], path: &Path) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            *t = checkpoint::take(entries, name, t.shape(), path)?;
        }
        Ok(())
    }

    /// Puts every parameter on `g` as a leaf, tracked iff `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| g.leaf(t.clone().with_requires_grad(trainable)))
                .collect(),
        )
    }

    /// Flat copy of every scalar, for equality checks.
    pub fn flat(&self) -> Vec<f32> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradient for each parameter, zero where none reached it.
    pub fn grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Vec<f32>> {
        self.0
            .iter()
            .zip(store.tensors())
            .map(|(v, t)| match grads.get(*v) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }
}

/// Adds `src` into `dst` elementwise, parameter by parameter.
pub fn accumulate(dst: &mut [Vec<f32>], src: &[Vec<f32>]) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, b) in d.iter_mut().zip(s) {
            *a += b;
        }
    }
}

pub fn zero_grads(store: &ParamStore) -> Vec<Vec<f32>> {
    store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect()
}

fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Vec<f32> {
    let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
    (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let w = Tensor::matrix(fan_in, fan_out, xavier(rng, fan_in, fan_out)).expect("shape");
        Self::from_parts(store, name, w, fan_in, fan_out)
    }

    /// Zero-initialized layer.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::from_parts(store, name, Tensor::zeros(&[fan_in, fan_out]), fan_in, fan_out)
    }

    fn from_parts(store: &mut ParamStore, name: &str, w: Tensor, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), w);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        g.add(y, p.var(self.b))
    }
}

/// Feed-forward stack: tanh between layers, no activation after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut Rng) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, p, h)?;
            if i < last {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Keys and values a block exposes to later rows.
#[derive(Clone, Copy, Debug)]
pub struct KeyValue {
    pub keys: Var,
    pub values: Var,
}

/// Pre-norm transformer block: multi-head attention then a tanh MLP, both residual.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("{name}: dim {dim} not divisible by {heads} heads")));
        }
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
            heads,
            dim,
        })
    }

    /// Applies the block to rows `x`. Attention runs over `prefix` rows (if
    /// any) followed by `x` itself; `mask` is `rows(x) × (rows(prefix) + rows(x))`,
    /// `true` = allowed.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        prefix: Option<KeyValue>,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        Ok(self.forward_kv(g, p, x, prefix, mask)?.0)
    }

    /// Like [`Block::forward`], also returning the keys and values of `x`'s own rows.
    pub fn forward_kv(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        prefix: Option<KeyValue>,
        mask: Option<&[bool]>,
    ) -> Result<(Var, KeyValue)> {
        let h = self.ln1.forward(g, p, x)?;
        let q = self.q.forward(g, p, h)?;
        let own = KeyValue {
            keys: self.k.forward(g, p, h)?,
            values: self.v.forward(g, p, h)?,
        };
        let (k, v) = match prefix {
            Some(kv) => (g.concat(&[kv.keys, own.keys], 0)?, g.concat(&[kv.values, own.values], 0)?),
            None => (own.keys, own.values),
        };
        let dh = self.dim / self.heads;
        let inv_sqrt = 1.0 / (dh as f32).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice(q, 1, lo, hi)?, g.slice(k, 1, lo, hi)?, g.slice(v, 1, lo, hi)?)
            };
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, inv_sqrt)?;
            let a = g.softmax(s, mask)?;
            outs.push(g.matmul(a, vh)?);
        }
        let att = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        let att = self.o.forward(g, p, att)?;
        let x1 = g.add(x, att)?;
        let h2 = self.ln2.forward(g, p, x1)?;
        let m = self.fc1.forward(g, p, h2)?;
        let m = g.tanh(m)?;
        let m = self.fc2.forward(g, p, m)?;
        Ok((g.add(x1, m)?, own))
    }
}

/// Fixed 2-D sinusoidal position code for a `grid_h × grid_w` patch grid,
/// row-major, `dim` columns (half for the row index, half for the column index).
pub fn sincos_2d(grid_h: usize, grid_w: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let quarter = half / 2;
    let mut data = vec![0.0f32; grid_h * grid_w * dim];
    for r in 0..grid_h {
        for c in 0..grid_w {
            let row = &mut data[(r * grid_w + c) * dim..(r * grid_w + c + 1) * dim];
            for (offset, pos) in [(0, r as f32), (half, c as f32)] {
                for i in 0..quarter {
                    let freq = 1.0 / 10000f32.powf(i as f32 / quarter.max(1) as f32);
                    row[offset + 2 * i] = (pos * freq).sin();
                    row[offset + 2 * i + 1] = (pos * freq).cos();
                }
            }
        }
    }
    Tensor::matrix(grid_h * grid_w, dim, data).expect("shape")
}
