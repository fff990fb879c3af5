//! Bounded policy `a = π(z, p)` and its losses.

use std::path::Path;

use crate::certificate::{stack, BarrierNet, Standardizer};
use crate::error::{Error, Result};
use crate::ndmath::{checkpoint, Graph, Tensor, Var};
use crate::nn::{Bound, Mlp, ParamStore};
use crate::rng;
use crate::world_model::{PrefixCache, StepInput, TransitionModel};

#[derive(Clone, Debug)]
pub struct PolicyNet {
    store: ParamStore,
    mlp: Mlp,
    input: Standardizer,
    latent_dim: usize,
    proprio_dim: usize,
    bounds: Vec<(f32, f32)>,
}

impl PolicyNet {
    pub fn new(latent_dim: usize, proprio_dim: usize, hidden: &[usize], bounds: &[(f32, f32)], seed: u64) -> Result<Self> {
        if bounds.is_empty() || bounds.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::invalid("policy action bounds must satisfy lo < hi"));
        }
        let mut r = rng::stream(seed, "init.policy");
        let mut store = ParamStore::new();
        let mut sizes = vec![latent_dim + proprio_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(bounds.len());
        let mlp = Mlp::new(&mut store, "policy", &sizes, &mut r);
        Ok(PolicyNet {
            store,
            mlp,
            input: Standardizer::identity(latent_dim + proprio_dim),
            latent_dim,
            proprio_dim,
            bounds: bounds.to_vec(),
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bounds(&self) -> &[(f32, f32)] {
        &self.bounds
    }

    pub fn action_dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn proprio_dim(&self) -> usize {
        self.proprio_dim
    }

    pub fn set_standardizer(&mut self, s: Standardizer) -> Result<()> {
        if s.dim() != self.latent_dim + self.proprio_dim {
            return Err(Error::shape("act", "standardizer width differs from policy input"));
        }
        self.input = s;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.store.bind(g, trainable)
    }

    /// Pre-sigmoid head output for `n × E` latents and `n × P` proprios.
    pub fn raw(&self, g: &mut Graph, p: &Bound, z: Var, proprio: Var) -> Result<Var> {
        let (zc, pc) = (g.value(z).cols(), g.value(proprio).cols());
        if zc != self.latent_dim || pc != self.proprio_dim {
            return Err(Error::shape(
                "act",
                format!("inputs {}+{} vs policy {}+{}", zc, pc, self.latent_dim, self.proprio_dim),
            ));
        }
        let x = g.concat(&[z, proprio], 1)?;
        let x = self.input.apply(g, x)?;
        self.mlp.forward(g, p, x)
    }

    /// Maps head outputs into the action box: `lo + sigmoid(raw)·(hi − lo)`.
    pub fn squash(&self, g: &mut Graph, raw: Var) -> Result<Var> {
        let s = g.sigmoid(raw)?;
        let width = g.constant(Tensor::vector(self.bounds.iter().map(|(lo, hi)| hi - lo).collect()));
        let lo = g.constant(Tensor::vector(self.bounds.iter().map(|(lo, _)| *lo).collect()));
        let s = g.mul(s, width)?;
        g.add(s, lo)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var, proprio: Var) -> Result<Var> {
        let raw = self.raw(g, p, z, proprio)?;
        self.squash(g, raw)
    }

    pub fn act(&self, z: &[f32], proprio: &[f32]) -> Result<Vec<f32>> {
        Ok(self.act_batch(&[z], &[proprio])?.remove(0))
    }

    pub fn act_batch(&self, zs: &[&[f32]], proprios: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        if zs.len() != proprios.len() {
            return Err(Error::shape("act", "latent and proprio batch sizes differ"));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let z = g.constant(stack(zs, self.latent_dim, "act")?);
        let pr = g.constant(stack(proprios, self.proprio_dim, "act")?);
        let a = self.forward(&mut g, &p, z, pr)?;
        let t = g.value(a);
        Ok((0..zs.len()).map(|r| t.row(r).to_vec()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = self.store.entries();
        entries.extend(self.input.entries("policy"));
        checkpoint::save(path, &entries)
    }

    pub fn load(path: &Path, latent_dim: usize, proprio_dim: usize, hidden: &[usize], bounds: &[(f32, f32)]) -> Result<Self> {
        let mut pi = PolicyNet::new(latent_dim, proprio_dim, hidden, bounds, 0)?;
        let entries = checkpoint::load(path)?;
        pi.store.load_entries(&entries, path)?;
        pi.input = Standardizer::from_entries(&entries, "policy", latent_dim + proprio_dim, path)?;
        Ok(pi)
    }
}

/// `Σ max(0, B(z') − B(z))` over matching rows of two `n × 1` vars.
pub fn synthesis_loss_on(g: &mut Graph, b_next: Var, b_now: Var) -> Result<Var> {
    let d = g.sub(b_next, b_now)?;
    let d = g.relu_hinge(d)?;
    g.sum(d)
}

/// `(1/n) Σ ‖a − a_user‖²` over `n × A` vars.
pub fn imitation_loss_on(g: &mut Graph, actions: Var, user: Var) -> Result<Var> {
    let n = g.value(actions).rows();
    if n == 0 {
        return Err(Error::invalid("imitation loss on an empty batch"));
    }
    let d = g.sub(actions, user)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / n as f32)
}

pub fn imitation_loss(pi: &PolicyNet, zs: &[&[f32]], proprios: &[&[f32]], user: &[&[f32]]) -> Result<f32> {
    if zs.len() != user.len() {
        return Err(Error::shape("imitation_loss", "batch sizes differ"));
    }
    let mut g = Graph::new();
    let p = pi.bind(&mut g, false);
    let z = g.constant(stack(zs, pi.latent_dim, "imitation_loss")?);
    let pr = g.constant(stack(proprios, pi.proprio_dim, "imitation_loss")?);
    let u = g.constant(stack(user, pi.action_dim(), "imitation_loss")?);
    let a = pi.forward(&mut g, &p, z, pr)?;
    let l = imitation_loss_on(&mut g, a, u)?;
    g.value(l).item()
}

/// One synthesis-loss element: the newest context entry plus the detached
/// keys/values of the older ones.
#[derive(Clone, Copy, Debug)]
pub struct SynthesisSample<'a> {
    pub prefix: &'a PrefixCache,
    pub tokens: &'a Tensor,
    pub pooled: &'a [f32],
    pub proprio: &'a [f32],
}

/// Bound parameters of the three networks on one graph.
pub struct SynthesisBinding<'a> {
    pub barrier: (&'a BarrierNet, &'a Bound),
    pub policy: (&'a PolicyNet, &'a Bound),
    pub model: (&'a TransitionModel, &'a Bound),
}

/// Builds `Σ max(0, B(pool(d(ctx, π(z_t, p_t)))) − B(z_t))`. Gradients reach
/// whichever bindings are tracked; the action slot is the only path into π.
pub fn synthesis_graph(g: &mut Graph, nets: &SynthesisBinding, batch: &[SynthesisSample]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("synthesis loss on an empty batch"));
    }
    let (b, bb) = nets.barrier;
    let (pi, pb) = nets.policy;
    let (m, mb) = nets.model;
    let pooled: Vec<&[f32]> = batch.iter().map(|s| s.pooled).collect();
    let props: Vec<&[f32]> = batch.iter().map(|s| s.proprio).collect();
    let z = g.constant(stack(&pooled, pi.latent_dim, "synthesis_loss")?);
    let pr = g.constant(stack(&props, pi.proprio_dim, "synthesis_loss")?);
    let actions = pi.forward(g, pb, z, pr)?;
    let mut next_pooled = Vec::with_capacity(batch.len());
    for (i, s) in batch.iter().enumerate() {
        let kv = s.prefix.on_graph(g);
        let a = g.slice(actions, 0, i, i + 1)?;
        let last = StepInput {
            tokens: g.constant(s.tokens.clone()),
            action: a,
            proprio: g.constant(Tensor::vector(s.proprio.to_vec())),
        };
        let pred = m.predict_last(g, mb, &kv, &last)?;
        next_pooled.push(g.mean_rows(pred)?);
    }
    let zn = g.concat(&next_pooled, 0)?;
    let b_next = b.forward(g, bb, zn)?;
    let b_now = b.forward(g, bb, z)?;
    synthesis_loss_on(g, b_next, b_now)
}

pub fn synthesis_loss(b: &BarrierNet, pi: &PolicyNet, m: &TransitionModel, batch: &[SynthesisSample]) -> Result<f32> {
    let mut g = Graph::new();
    let bb = b.bind(&mut g, false);
    let pb = pi.bind(&mut g, false);
    let mb = m.bind(&mut g, false);
    let nets = SynthesisBinding {
        barrier: (b, &bb),
        policy: (pi, &pb),
        model: (m, &mb),
    };
    let l = synthesis_graph(&mut g, &nets, batch)?;
    g.value(l).item()
}
