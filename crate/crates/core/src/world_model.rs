//! Transition model `z_{t+1} = d(z_{t-H..t}, a_{t-H..t}, p_{t-H..t})`.
//!
//! Every window entry becomes `P` projected patch tokens plus one action
//! token and one proprio token, all offset by a learned per-step embedding.
//! Attention is causal at step granularity. The prediction is the newest
//! latent plus a zero-initialized residual read off the newest step's patch
//! positions.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::encoder::{Encoder, Latent};
use crate::error::{Error, Result};
use crate::ndmath::{checkpoint, AdamConfig, AdamState, Graph, Tensor, Var};
use crate::nn::{self, Block, Bound, KeyValue, LayerNorm, Linear, ParamId, ParamStore};
use crate::rng;

/// `t × t` row-major mask, `true` where position `i` may attend to `j` (`j ≤ i`).
pub fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|k| k % t <= k / t).collect()
}

/// Causal mask over `steps` groups of `per_step` tokens each.
pub fn step_mask(steps: usize, per_step: usize) -> Vec<bool> {
    let n = steps * per_step;
    (0..n * n).map(|k| (k % n) / per_step <= (k / n) / per_step).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorldModelConfig {
    /// `H`: the window holds `H + 1` entries.
    pub context: usize,
    pub blocks: usize,
    pub heads: usize,
    pub model_dim: usize,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        WorldModelConfig {
            context: 3,
            blocks: 2,
            heads: 4,
            model_dim: 64,
        }
    }
}

/// Sizes and input scaling the model is built for.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentShape {
    pub patches: usize,
    pub embed_dim: usize,
    pub action_dim: usize,
    pub proprio_dim: usize,
    pub action_bounds: (f32, f32),
    pub proprio_scale: f32,
}

/// `H + 1` consecutive latents with their actions and proprios, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextWindow {
    pub latents: Vec<Latent>,
    pub actions: Vec<Vec<f32>>,
    pub proprios: Vec<Vec<f32>>,
}

impl ContextWindow {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    /// Drops the oldest entry and appends a new newest one.
    pub fn slide(&mut self, latent: Latent, action: Vec<f32>, proprio: Vec<f32>) {
        self.latents.remove(0);
        self.actions.remove(0);
        self.proprios.remove(0);
        self.latents.push(latent);
        self.actions.push(action);
        self.proprios.push(proprio);
    }
}

/// One window entry already placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct StepInput {
    pub tokens: Var,
    pub action: Var,
    pub proprio: Var,
}

impl StepInput {
    pub fn constant(g: &mut Graph, tokens: &Tensor, action: &[f32], proprio: &[f32]) -> Self {
        StepInput {
            tokens: g.constant(tokens.clone()),
            action: g.constant(Tensor::vector(action.to_vec())),
            proprio: g.constant(Tensor::vector(proprio.to_vec())),
        }
    }
}

/// Per-block keys and values of the `H` oldest window entries, detached.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixCache {
    kv: Vec<(Tensor, Tensor)>,
}

impl PrefixCache {
    pub fn on_graph(&self, g: &mut Graph) -> Vec<KeyValue> {
        self.kv
            .iter()
            .map(|(k, v)| KeyValue {
                keys: g.constant(k.clone()),
                values: g.constant(v.clone()),
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TransitionModel {
    cfg: WorldModelConfig,
    shape: LatentShape,
    store: ParamStore,
    token_in: Linear,
    action_in: Linear,
    proprio_in: Linear,
    step_embed: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl TransitionModel {
    pub fn new(cfg: WorldModelConfig, shape: LatentShape, seed: u64) -> Result<Self> {
        if cfg.model_dim == 0 || cfg.blocks == 0 {
            return Err(Error::invalid("world model needs model_dim > 0 and at least one block"));
        }
        if shape.action_bounds.0 >= shape.action_bounds.1 || !(shape.proprio_scale > 0.0) {
            return Err(Error::invalid("world model input scaling must be positive"));
        }
        let d = cfg.model_dim;
        let mut r = rng::stream(seed, "init.world_model");
        let mut store = ParamStore::new();
        let token_in = Linear::new(&mut store, "wm.token_in", shape.embed_dim, d, &mut r);
        let action_in = Linear::new(&mut store, "wm.action_in", shape.action_dim, d, &mut r);
        let proprio_in = Linear::new(&mut store, "wm.proprio_in", shape.proprio_dim, d, &mut r);
        let step_embed = store.add("wm.step_embed", Tensor::zeros(&[cfg.context + 1, d]));
        let blocks = (0..cfg.blocks)
            .map(|i| Block::new(&mut store, &format!("wm.block{i}"), d, cfg.heads, 2 * d, &mut r))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut store, "wm.norm", d);
        let head = Linear::zeros(&mut store, "wm.head", d, shape.embed_dim);
        Ok(TransitionModel {
            cfg,
            shape,
            store,
            token_in,
            action_in,
            proprio_in,
            step_embed,
            blocks,
            norm,
            head,
        })
    }

    pub fn config(&self) -> &WorldModelConfig {
        &self.cfg
    }

    pub fn shape(&self) -> &LatentShape {
        &self.shape
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn window_len(&self) -> usize {
        self.cfg.context + 1
    }

    fn tokens_per_step(&self) -> usize {
        self.shape.patches + 2
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.store.bind(g, trainable)
    }

    fn embed_step(&self, g: &mut Graph, p: &Bound, pos: usize, s: &StepInput) -> Result<Var> {
        let sh = &self.shape;
        let t = g.value(s.tokens).shape().to_vec();
        if t != [sh.patches, sh.embed_dim] {
            return Err(Error::shape("predict_next", format!("latent tokens {:?}, model expects [{}, {}]", t, sh.patches, sh.embed_dim)));
        }
        let (lo, hi) = sh.action_bounds;
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        let a = g.reshape(s.action, &[1, sh.action_dim])?;
        let a = g.scale(a, 1.0 / half)?;
        let a = g.add_scalar(a, -mid / half)?;
        let pr = g.reshape(s.proprio, &[1, sh.proprio_dim])?;
        let pr = g.scale(pr, 1.0 / sh.proprio_scale)?;

        let tok = self.token_in.forward(g, p, s.tokens)?;
        let act = self.action_in.forward(g, p, a)?;
        let pro = self.proprio_in.forward(g, p, pr)?;
        let rows = g.concat(&[tok, act, pro], 0)?;
        let step = g.slice(p.var(self.step_embed), 0, pos, pos + 1)?;
        g.add(rows, step)
    }

    /// Keys and values of every block over the `H` oldest entries.
    pub fn prefix_kv(&self, g: &mut Graph, p: &Bound, steps: &[StepInput]) -> Result<Vec<KeyValue>> {
        if steps.len() != self.cfg.context {
            return Err(Error::shape("predict_next", format!("prefix of {} entries, context is {}", steps.len(), self.cfg.context)));
        }
        if steps.is_empty() {
            return Ok(Vec::new());
        }
        let rows = steps
            .iter()
            .enumerate()
            .map(|(i, s)| self.embed_step(g, p, i, s))
            .collect::<Result<Vec<_>>>()?;
        let mut x = g.concat(&rows, 0)?;
        let mask = step_mask(steps.len(), self.tokens_per_step());
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, kv) = b.forward_kv(g, p, x, None, Some(&mask))?;
            out.push(kv);
            x = y;
        }
        Ok(out)
    }

    /// Predicted next tokens (`P × E`) from the cached prefix and the newest entry.
    pub fn predict_last(&self, g: &mut Graph, p: &Bound, prefix: &[KeyValue], last: &StepInput) -> Result<Var> {
        if !(prefix.is_empty() && self.cfg.context == 0) && prefix.len() != self.blocks.len() {
            return Err(Error::shape("predict_next", format!("{} cached blocks for {} blocks", prefix.len(), self.blocks.len())));
        }
        let mut x = self.embed_step(g, p, self.cfg.context, last)?;
        for (i, b) in self.blocks.iter().enumerate() {
            x = b.forward(g, p, x, prefix.get(i).copied(), None)?;
        }
        let patch_rows = g.slice(x, 0, 0, self.shape.patches)?;
        let h = self.norm.forward(g, p, patch_rows)?;
        let delta = self.head.forward(g, p, h)?;
        g.add(last.tokens, delta)
    }

    pub fn forward_window(&self, g: &mut Graph, p: &Bound, steps: &[StepInput]) -> Result<Var> {
        if steps.len() != self.window_len() {
            return Err(Error::shape("predict_next", format!("window of {} entries, expected {}", steps.len(), self.window_len())));
        }
        let (last, prefix) = steps.split_last().expect("nonempty window");
        let kv = self.prefix_kv(g, p, prefix)?;
        self.predict_last(g, p, &kv, last)
    }

    fn check_window(&self, ctx: &ContextWindow) -> Result<()> {
        let n = self.window_len();
        if ctx.latents.len() != n || ctx.actions.len() != n || ctx.proprios.len() != n {
            return Err(Error::shape(
                "predict_next",
                format!(
                    "context lengths {}/{}/{}, expected {}",
                    ctx.latents.len(),
                    ctx.actions.len(),
                    ctx.proprios.len(),
                    n
                ),
            ));
        }
        for (a, pr) in ctx.actions.iter().zip(&ctx.proprios) {
            if a.len() != self.shape.action_dim || pr.len() != self.shape.proprio_dim {
                return Err(Error::shape("predict_next", "action or proprio length mismatch"));
            }
        }
        Ok(())
    }

    fn window_inputs(&self, g: &mut Graph, ctx: &ContextWindow) -> Vec<StepInput> {
        ctx.latents
            .iter()
            .zip(&ctx.actions)
            .zip(&ctx.proprios)
            .map(|((z, a), pr)| StepInput::constant(g, &z.tokens, a, pr))
            .collect()
    }

    pub fn predict_next(&self, ctx: &ContextWindow) -> Result<Latent> {
        self.check_window(ctx)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let steps = self.window_inputs(&mut g, ctx);
        let out = self.forward_window(&mut g, &p, &steps)?;
        Ok(Latent::from_tokens(g.value(out).clone()))
    }

    /// Detached prefix keys/values for the `H` oldest entries of `ctx`.
    pub fn prefix_cache(&self, ctx: &ContextWindow) -> Result<PrefixCache> {
        self.check_window(ctx)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let steps = self.window_inputs(&mut g, ctx);
        let kv = self.prefix_kv(&mut g, &p, &steps[..self.cfg.context])?;
        Ok(PrefixCache {
            kv: kv
                .into_iter()
                .map(|kv| (g.value(kv.keys).clone(), g.value(kv.values).clone()))
                .collect(),
        })
    }

    /// `k` autoregressive predictions. Prediction `i + 1` sees prediction `i`
    /// as its newest latent, paired with `future_actions[i]` and `future_proprios[i]`.
    pub fn rollout_latent(
        &self,
        ctx: &ContextWindow,
        k: usize,
        future_actions: &[Vec<f32>],
        future_proprios: &[Vec<f32>],
    ) -> Result<Vec<Latent>> {
        self.rollout_latent_traced(ctx, k, future_actions, future_proprios, |_| {})
    }

    /// [`TransitionModel::rollout_latent`] calling `trace` with each window before it is used.
    pub fn rollout_latent_traced(
        &self,
        ctx: &ContextWindow,
        k: usize,
        future_actions: &[Vec<f32>],
        future_proprios: &[Vec<f32>],
        mut trace: impl FnMut(&ContextWindow),
    ) -> Result<Vec<Latent>> {
        if k == 0 {
            return Err(Error::invalid("rollout needs k >= 1"));
        }
        if future_actions.len() + 1 < k || future_proprios.len() + 1 < k {
            return Err(Error::shape(
                "rollout_latent",
                format!("{k} steps need {} future actions and proprios", k - 1),
            ));
        }
        let mut window = ctx.clone();
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            trace(&window);
            let z = self.predict_next(&window)?;
            out.push(z.clone());
            if i + 1 < k {
                window.slide(z, future_actions[i].clone(), future_proprios[i].clone());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.store.entries())
    }

    pub fn load(path: &Path, cfg: WorldModelConfig, shape: LatentShape) -> Result<Self> {
        let mut m = TransitionModel::new(cfg, shape, 0)?;
        let entries = checkpoint::load(path)?;
        m.store.load_entries(&entries, path)?;
        Ok(m)
    }
}

/// Latent tokens of one episode with the actions and proprios that go with them.
/// `actions[t]` moved record `t` to record `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentEpisode {
    pub tokens: Vec<Tensor>,
    pub actions: Vec<Vec<f32>>,
    pub proprios: Vec<Vec<f32>>,
}

/// `(episode, first record)` of every window with `context + 1 + horizon` records.
pub fn windows(episodes: &[LatentEpisode], context: usize, horizon: usize) -> Vec<(usize, usize)> {
    let span = context + 1 + horizon;
    let mut out = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        let usable = ep.tokens.len().min(ep.actions.len() + 1);
        if usable >= span {
            out.extend((0..=usable - span).map(|s| (e, s)));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WmTrainConfig {
    pub horizon: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch: usize,
    pub lr: f32,
}

impl Default for WmTrainConfig {
    fn default() -> Self {
        WmTrainConfig {
            horizon: 3,
            epochs: 30,
            batches_per_epoch: 40,
            batch: 8,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WmReport {
    /// Mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f32>,
}

/// Horizon loss of one window: sum over the horizon of the mean squared token error.
fn horizon_loss(
    m: &TransitionModel,
    g: &mut Graph,
    p: &Bound,
    ep: &LatentEpisode,
    start: usize,
    horizon: usize,
) -> Result<Var> {
    let h = m.cfg.context;
    let mut latents: Vec<Var> = (start..=start + h).map(|t| g.constant(ep.tokens[t].clone())).collect();
    let mut total: Option<Var> = None;
    for k in 0..horizon {
        let steps: Vec<StepInput> = (0..=h)
            .map(|i| {
                let t = start + k + i;
                StepInput {
                    tokens: latents[k + i],
                    action: g.constant(Tensor::vector(ep.actions[t].clone())),
                    proprio: g.constant(Tensor::vector(ep.proprios[t].clone())),
                }
            })
            .collect();
        let pred = m.forward_window(g, p, &steps)?;
        let target = g.constant(ep.tokens[start + h + k + 1].clone());
        let diff = g.sub(pred, target)?;
        let sq = g.mul(diff, diff)?;
        let l = g.mean(sq)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
        latents.push(pred);
    }
    Ok(total.expect("horizon >= 1"))
}

/// Mean horizon loss over `windows`, without gradients.
pub fn mean_horizon_loss(
    m: &TransitionModel,
    episodes: &[LatentEpisode],
    windows: &[(usize, usize)],
    horizon: usize,
) -> Result<f32> {
    if windows.is_empty() {
        return Err(Error::invalid("no evaluation windows"));
    }
    let mut total = 0.0f64;
    for &(e, s) in windows {
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let l = horizon_loss(m, &mut g, &p, &episodes[e], s, horizon)?;
        total += g.value(l).item()? as f64;
    }
    Ok((total / windows.len() as f64) as f32)
}

/// Fits the transition model on latents from a frozen encoder.
pub fn train_world_model(
    encoder: &Encoder,
    episodes: &[LatentEpisode],
    cfg: WorldModelConfig,
    shape: LatentShape,
    train: &WmTrainConfig,
    seed: u64,
) -> Result<(TransitionModel, WmReport)> {
    train_world_model_with(encoder, episodes, cfg, shape, train, seed, |_, _, _| Ok(()))
}

/// As [`train_world_model`], calling `on_epoch(epoch, model, train_loss)`
/// after every epoch.
pub fn train_world_model_with(
    encoder: &Encoder,
    episodes: &[LatentEpisode],
    cfg: WorldModelConfig,
    shape: LatentShape,
    train: &WmTrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &TransitionModel, f32) -> Result<()>,
) -> Result<(TransitionModel, WmReport)> {
    if !encoder.is_frozen() {
        return Err(Error::invalid("world model training requires a frozen encoder"));
    }
    if shape.embed_dim != encoder.embed_dim() || shape.patches != encoder.num_patches() {
        return Err(Error::shape("train_world_model", "latent shape differs from the encoder"));
    }
    if train.horizon == 0 {
        return Err(Error::invalid("horizon must be >= 1"));
    }
    let mut order = windows(episodes, cfg.context, train.horizon);
    if order.is_empty() {
        return Err(Error::invalid(format!(
            "dataset has no window of {} records",
            cfg.context + 1 + train.horizon
        )));
    }
    let mut m = TransitionModel::new(cfg, shape, seed)?;
    let mut opt = AdamState::new(
        AdamConfig {
            lr: train.lr,
            ..AdamConfig::default()
        },
        m.store.tensors(),
    );
    let mut r = rng::stream(seed, "shuffle.world_model");
    order.shuffle(&mut r);
    let mut cursor = 0;
    let batch = train.batch.max(1);
    let mut report = WmReport::default();
    for epoch in 0..train.epochs {
        let mut epoch_loss = 0.0f64;
        for _ in 0..train.batches_per_epoch {
            let mut grads = nn::zero_grads(&m.store);
            let mut loss_sum = 0.0f32;
            for _ in 0..batch {
                assert!(encoder.is_frozen(), "encoder must stay frozen during world model updates");
                if cursor == order.len() {
                    order.shuffle(&mut r);
                    cursor = 0;
                }
                let (e, s) = order[cursor];
                cursor += 1;
                let mut g = Graph::new();
                let p = m.bind(&mut g, true);
                let loss = horizon_loss(&m, &mut g, &p, &episodes[e], s, train.horizon)?;
                let gr = g.backward(loss)?;
                nn::accumulate(&mut grads, &p.grads(&gr, &m.store));
                loss_sum += g.value(loss).item()?;
            }
            let scale = 1.0 / batch as f32;
            for v in grads.iter_mut() {
                v.iter_mut().for_each(|x| *x *= scale);
            }
            opt.step(m.store.tensors_mut(), &grads)?;
            epoch_loss += (loss_sum * scale) as f64;
        }
        let l = (epoch_loss / train.batches_per_epoch.max(1) as f64) as f32;
        if !l.is_finite() {
            return Err(Error::Numeric(format!("world model loss is {l} at epoch {}", epoch + 1)));
        }
        log::info!("world model epoch {} loss {:.6}", epoch + 1, l);
        report.epoch_losses.push(l);
        on_epoch(epoch, &m, l)?;
    }
    Ok((m, report))
}

/// Context window ending at record `t` of `ep`.
pub fn context_at(ep: &LatentEpisode, t: usize, context: usize) -> Result<ContextWindow> {
    if t < context || t >= ep.tokens.len() || t >= ep.actions.len() {
        return Err(Error::invalid(format!("no full context window ends at record {t}")));
    }
    let range = t - context..=t;
    Ok(ContextWindow {
        latents: range.clone().map(|i| Latent::from_tokens(ep.tokens[i].clone())).collect(),
        actions: range.clone().map(|i| ep.actions[i].clone()).collect(),
        proprios: range.map(|i| ep.proprios[i].clone()).collect(),
    })
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.numel() as f64
}

/// One-step prediction error and copy-last-latent error, both mean squared
/// over token entries and averaged over the windows `(episode, first record)`.
pub fn one_step_errors(m: &TransitionModel, episodes: &[LatentEpisode], windows: &[(usize, usize)]) -> Result<(f64, f64)> {
    let errs = rollout_errors(m, episodes, windows, 1)?;
    Ok((errs[0].0, errs[0].1))
}

/// Per-step `(model, copy-last)` mean squared errors of `k`-step rollouts.
pub fn rollout_errors(
    m: &TransitionModel,
    episodes: &[LatentEpisode],
    windows: &[(usize, usize)],
    k: usize,
) -> Result<Vec<(f64, f64)>> {
    if windows.is_empty() {
        return Err(Error::invalid("no evaluation windows"));
    }
    let h = m.cfg.context;
    let mut acc = vec![(0.0f64, 0.0f64); k];
    for &(e, s) in windows {
        let ep = &episodes[e];
        let t = s + h;
        if t + k >= ep.tokens.len() || t + k > ep.actions.len() {
            return Err(Error::invalid("evaluation window runs past the episode"));
        }
        let ctx = context_at(ep, t, h)?;
        let preds = m.rollout_latent(&ctx, k, &ep.actions[t + 1..], &ep.proprios[t + 1..])?;
        for (i, z) in preds.iter().enumerate() {
            let target = &ep.tokens[t + 1 + i];
            acc[i].0 += mse(&z.tokens, target);
            acc[i].1 += mse(&ep.tokens[t], target);
        }
    }
    let n = windows.len() as f64;
    Ok(acc.into_iter().map(|(a, b)| (a / n, b / n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> LatentShape {
        LatentShape {
            patches: 4,
            embed_dim: 8,
            action_dim: 1,
            proprio_dim: 1,
            action_bounds: (-2.0, 2.0),
            proprio_scale: 1.0,
        }
    }

    fn cfg() -> WorldModelConfig {
        WorldModelConfig {
            context: 2,
            blocks: 2,
            heads: 2,
            model_dim: 8,
        }
    }

    fn latent(seed: f32) -> Latent {
        Latent::from_tokens(Tensor::matrix(4, 8, (0..32).map(|i| ((i as f32 + seed) * 0.37).sin()).collect()).unwrap())
    }

    fn window(n: usize) -> ContextWindow {
        ContextWindow {
            latents: (0..n).map(|i| latent(i as f32)).collect(),
            actions: (0..n).map(|i| vec![i as f32 * 0.3 - 0.5]).collect(),
            proprios: (0..n).map(|i| vec![0.1 * i as f32]).collect(),
        }
    }

    /// Model with a nonzero output head so predictions depend on the inputs.
    fn live_model() -> TransitionModel {
        let mut m = TransitionModel::new(cfg(), shape(), 5).unwrap();
        let head = m.head.w;
        for (i, v) in m.store.get_mut(head).data_mut().iter_mut().enumerate() {
            *v = ((i as f32) * 0.71).sin() * 0.3;
        }
        m
    }

    #[test]
    fn mask_shapes() {
        assert_eq!(causal_mask(1), vec![true]);
        let m = causal_mask(3);
        assert_eq!(m.iter().filter(|&&b| b).count(), 6);
        assert_eq!(m, vec![true, false, false, true, true, false, true, true, true]);
    }

    #[test]
    fn step_mask_groups_tokens() {
        let m = step_mask(2, 2);
        #[rustfmt::skip]
        let expected = vec![
            true, true, false, false,
            true, true, false, false,
            true, true, true, true,
            true, true, true, true,
        ];
        assert_eq!(m, expected);
    }

    #[test]
    fn fresh_model_copies_the_last_latent() {
        let m = TransitionModel::new(cfg(), shape(), 1).unwrap();
        let w = window(3);
        let z = m.predict_next(&w).unwrap();
        assert_eq!(z.tokens, w.latents[2].tokens);
    }

    #[test]
    fn prediction_shape_and_determinism() {
        let m = live_model();
        let w = window(3);
        let a = m.predict_next(&w).unwrap();
        assert_eq!(a.tokens.shape(), &[4, 8]);
        assert_eq!(a, m.predict_next(&w).unwrap());
    }

    #[test]
    fn wrong_window_length_is_rejected() {
        let m = live_model();
        assert!(m.predict_next(&window(2)).is_err());
        let mut w = window(3);
        w.latents[0] = Latent::from_tokens(Tensor::zeros(&[5, 8]));
        assert!(m.predict_next(&w).is_err());
    }

    #[test]
    fn cached_prefix_matches_full_pass() {
        let m = live_model();
        let w = window(3);
        let full = m.predict_next(&w).unwrap();
        let cache = m.prefix_cache(&w).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let kv = cache.on_graph(&mut g);
        let last = StepInput::constant(&mut g, &w.latents[2].tokens, &w.actions[2], &w.proprios[2]);
        let out = m.predict_last(&mut g, &p, &kv, &last).unwrap();
        assert_eq!(g.value(out), &full.tokens);
    }

    #[test]
    fn earlier_steps_ignore_later_entries() {
        let m = live_model();
        let w = window(3);
        let mut changed = w.clone();
        changed.latents[2] = latent(40.0);
        changed.actions[2] = vec![1.5];
        assert_eq!(m.prefix_cache(&w).unwrap(), m.prefix_cache(&changed).unwrap());
        assert_ne!(m.predict_next(&w).unwrap(), m.predict_next(&changed).unwrap());
    }

    #[test]
    fn rollout_feeds_predictions_back() {
        let m = live_model();
        let w = window(3);
        let acts = vec![vec![0.2], vec![-0.4]];
        let props = vec![vec![0.0], vec![0.3]];
        let mut seen = Vec::new();
        let out = m
            .rollout_latent_traced(&w, 3, &acts, &props, |c| seen.push(c.clone()))
            .unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(seen.len(), 3);
        assert_eq!(seen[1].latents[2], out[0]);
        assert_eq!(seen[2].latents[2], out[1]);
        assert_eq!(seen[2].latents[1], out[0]);
        assert_eq!(seen[2].actions[2], acts[1]);
        let one = m.rollout_latent(&w, 1, &[], &[]).unwrap();
        assert_eq!(one[0], m.predict_next(&w).unwrap());
    }

    fn toy_episodes() -> Vec<LatentEpisode> {
        (0..3)
            .map(|e| {
                let tokens: Vec<Tensor> = (0..12)
                    .map(|t| {
                        Tensor::matrix(4, 8, (0..32).map(|i| ((i + t) as f32 * 0.2 + e as f32).sin()).collect()).unwrap()
                    })
                    .collect();
                LatentEpisode {
                    actions: (0..11).map(|t| vec![((t + e) as f32).cos()]).collect(),
                    proprios: (0..12).map(|t| vec![(t as f32 * 0.1).sin()]).collect(),
                    tokens,
                }
            })
            .collect()
    }

    #[test]
    fn window_enumeration() {
        let eps = toy_episodes();
        let w = windows(&eps, 2, 3);
        assert_eq!(w.len(), 3 * (12 - 6 + 1));
        assert!(windows(&eps, 10, 3).is_empty());
    }

    #[test]
    fn training_reduces_loss_and_is_seeded() {
        use crate::encoder::{Encoder, EncoderConfig};
        let mut enc = Encoder::new(
            EncoderConfig {
                width: 8,
                height: 8,
                patch: 4,
                embed_dim: 8,
                depth: 0,
                heads: 1,
                frozen: false,
            },
            0,
        )
        .unwrap();
        let eps = toy_episodes();
        let tc = WmTrainConfig {
            horizon: 2,
            epochs: 8,
            batches_per_epoch: 4,
            batch: 4,
            lr: 3e-3,
        };
        assert!(train_world_model(&enc, &eps, cfg(), shape(), &tc, 1).is_err());
        enc.freeze();
        let (m, rep) = train_world_model(&enc, &eps, cfg(), shape(), &tc, 1).unwrap();
        assert_eq!(rep.epoch_losses.len(), 8);
        assert!(rep.epoch_losses[7] < rep.epoch_losses[0], "{:?}", rep.epoch_losses);
        let (m2, rep2) = train_world_model(&enc, &eps, cfg(), shape(), &tc, 1).unwrap();
        assert_eq!(rep, rep2);
        assert_eq!(m.params(), m2.params());
    }

    #[test]
    fn too_short_dataset_is_rejected() {
        let mut enc = crate::encoder::Encoder::new(
            crate::encoder::EncoderConfig {
                width: 8,
                height: 8,
                patch: 4,
                embed_dim: 8,
                depth: 0,
                heads: 1,
                frozen: false,
            },
            0,
        )
        .unwrap();
        enc.freeze();
        let mut eps = toy_episodes();
        for ep in &mut eps {
            ep.tokens.truncate(4);
            ep.actions.truncate(3);
        }
        assert!(train_world_model(&enc, &eps, cfg(), shape(), &WmTrainConfig::default(), 0).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wm.lcbc");
        let m = live_model();
        m.save(&path).unwrap();
        let back = TransitionModel::load(&path, cfg(), shape()).unwrap();
        let w = window(3);
        assert_eq!(m.predict_next(&w).unwrap(), back.predict_next(&w).unwrap());
    }
}
