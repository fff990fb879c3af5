//! Observation model: image frame → grid of patch tokens plus their mean.
//!
//! The encoder is a patch embedding with fixed sinusoidal positions,
//! `depth` transformer blocks and a final layer norm. It is pretrained as the
//! front half of a patch autoencoder and then frozen; downstream code only
//! ever evaluates it without gradient tracking.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::envs::Frame;
use crate::error::{Error, Result};
use crate::ndmath::{checkpoint, AdamConfig, AdamState, Graph, Tensor, Var};
use crate::nn::{self, Block, Bound, LayerNorm, Linear, ParamStore};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderPreset {
    /// 64×64 frames, 8×8 patches (8×8 grid), 64-dim tokens.
    Desk,
    /// 224×224 frames, 14×14 patches (16×16 grid), 384-dim tokens.
    Paper,
}

impl std::str::FromStr for EncoderPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(EncoderPreset::Desk),
            "paper" => Ok(EncoderPreset::Paper),
            other => Err(Error::invalid(format!("unknown encoder preset '{other}' (desk|paper)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub width: usize,
    pub height: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub frozen: bool,
}

impl EncoderConfig {
    pub fn preset(p: EncoderPreset) -> Self {
        match p {
            EncoderPreset::Desk => EncoderConfig {
                width: 64,
                height: 64,
                patch: 8,
                embed_dim: 64,
                depth: 1,
                heads: 4,
                frozen: false,
            },
            EncoderPreset::Paper => EncoderConfig {
                width: 224,
                height: 224,
                patch: 14,
                embed_dim: 384,
                depth: 12,
                heads: 6,
                frozen: false,
            },
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.width % self.patch != 0 || self.height % self.patch != 0 {
            return Err(Error::invalid(format!(
                "frame {}x{} is not divisible by patch {}",
                self.width, self.height, self.patch
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return Err(Error::invalid(format!("embed_dim {} must be a positive multiple of 4", self.embed_dim)));
        }
        if self.depth > 0 && (self.heads == 0 || self.embed_dim % self.heads != 0) {
            return Err(Error::invalid(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Encoder output for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    /// `P × E` patch tokens.
    pub tokens: Tensor,
    /// Mean over tokens, length `E`.
    pub pooled: Vec<f32>,
}

impl Latent {
    pub fn from_tokens(tokens: Tensor) -> Self {
        let pooled = pool(&tokens);
        Latent { tokens, pooled }
    }
}

/// Column mean of a token matrix.
pub fn pool(tokens: &Tensor) -> Vec<f32> {
    let (rows, cols) = (tokens.rows(), tokens.cols());
    let mut out = vec![0.0f32; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(tokens.row(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / rows as f32;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    store: ParamStore,
    embed: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
    pos: Tensor,
}

impl Encoder {
    pub fn new(mut cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        cfg.frozen = false;
        let mut r = rng::stream(seed, "init.encoder");
        let mut store = ParamStore::new();
        let e = cfg.embed_dim;
        let embed = Linear::new(&mut store, "encoder.embed", cfg.patch_dim(), e, &mut r);
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&mut store, &format!("encoder.block{i}"), e, cfg.heads, 2 * e, &mut r))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut store, "encoder.norm", e);
        let (gh, gw) = cfg.grid();
        Ok(Encoder {
            cfg,
            store,
            embed,
            blocks,
            norm,
            pos: nn::sincos_2d(gh, gw, e),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    pub fn num_patches(&self) -> usize {
        self.cfg.num_patches()
    }

    pub fn is_frozen(&self) -> bool {
        self.cfg.frozen
    }

    pub fn freeze(&mut self) {
        self.cfg.frozen = true;
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Normalized pixels, one row per patch (row-major patch grid, each patch
    /// flattened row-major with RGB innermost).
    pub fn patchify(&self, frame: &Frame) -> Result<Tensor> {
        let c = &self.cfg;
        if frame.width != c.width || frame.height != c.height || frame.data.len() != c.width * c.height * 3 {
            return Err(Error::shape(
                "encode",
                format!("frame {}x{} vs configured {}x{}", frame.width, frame.height, c.width, c.height),
            ));
        }
        let (gh, gw) = c.grid();
        let pd = c.patch_dim();
        let mut out = Vec::with_capacity(gh * gw * pd);
        for pr in 0..gh {
            for pc in 0..gw {
                for y in 0..c.patch {
                    let row = pr * c.patch + y;
                    let start = (row * c.width + pc * c.patch) * 3;
                    out.extend(frame.data[start..start + c.patch * 3].iter().map(|&v| v as f32 / 127.5 - 1.0));
                }
            }
        }
        Tensor::matrix(gh * gw, pd, out)
    }

    fn forward(&self, g: &mut Graph, p: &Bound, patches: Var) -> Result<Var> {
        let x = self.embed.forward(g, p, patches)?;
        let pos = g.constant(self.pos.clone());
        let mut x = g.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(g, p, x, None, None)?;
        }
        self.norm.forward(g, p, x)
    }

    /// Evaluates the encoder without recording gradients.
    pub fn encode(&self, frame: &Frame) -> Result<Latent> {
        let patches = self.patchify(frame)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.constant(patches);
        let t = self.forward(&mut g, &p, x)?;
        Ok(Latent::from_tokens(g.value(t).clone()))
    }

    pub fn encode_all(&self, frames: &[Frame]) -> Result<Vec<Latent>> {
        frames.iter().map(|f| self.encode(f)).collect()
    }

    fn ensure_trainable(&self) -> Result<()> {
        if self.cfg.frozen {
            return Err(Error::invalid("encoder is frozen; gradients are not available"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.store.entries())
    }

    /// Loads weights from an LCBC file; every tensor must match `cfg`. The
    /// result is frozen.
    pub fn import(path: &Path, cfg: EncoderConfig) -> Result<Self> {
        let mut enc = Encoder::new(cfg, 0)?;
        let (entries, truncation) = checkpoint::load_partial(path)?;
        for (name, t) in enc.store.names().iter().zip(enc.store.tensors()) {
            match entries.iter().find(|(n, _)| n == name) {
                Some((_, found)) if found.shape() != t.shape() => {
                    return Err(Error::Checkpoint {
                        path: path.display().to_string(),
                        msg: format!(
                            "tensor '{}' has shape {:?}, config expects {:?}",
                            name,
                            found.shape(),
                            t.shape()
                        ),
                    })
                }
                Some(_) => {}
                None => {
                    let why = truncation
                        .as_ref()
                        .map(|e| format!(" ({e})"))
                        .unwrap_or_default();
                    return Err(Error::Checkpoint {
                        path: path.display().to_string(),
                        msg: format!("missing tensor '{}'{}", name, why),
                    });
                }
            }
        }
        enc.store.load_entries(&entries, path)?;
        enc.freeze();
        Ok(enc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Weight of the pooled-branch reconstruction term.
    pub pooled_weight: f32,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch: 8,
            lr: 2e-3,
            pooled_weight: 4.0,
        }
    }
}

/// Per-step reconstruction losses of a pretraining run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub token_losses: Vec<f32>,
    pub pooled_losses: Vec<f32>,
    /// Token-branch pixel MSE on the held-out frames, if any were given.
    pub holdout_mse: Option<f32>,
}

/// Pretraining decoder, discarded afterwards. One branch maps each token to
/// its patch pixels; the other rebuilds every standardised patch from the
/// pooled vector gated by the patch position code, so the pooled view has to
/// carry layout.
struct Decoder {
    store: ParamStore,
    out: Linear,
    from_pool: Linear,
    from_pos: Linear,
    global_out: Linear,
}

impl Decoder {
    fn new(e: usize, patch_dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "init.decoder");
        let mut store = ParamStore::new();
        let out = Linear::new(&mut store, "decoder.out", e, patch_dim, &mut r);
        let from_pool = Linear::new(&mut store, "decoder.pool", e, e, &mut r);
        let from_pos = Linear::new(&mut store, "decoder.pos", e, e, &mut r);
        let global_out = Linear::new(&mut store, "decoder.global", e, patch_dim, &mut r);
        Decoder {
            store,
            out,
            from_pool,
            from_pos,
            global_out,
        }
    }
}

/// Per-pixel mean and spread of a corpus, in patch layout.
struct PixelStats {
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

impl PixelStats {
    const STD_FLOOR: f32 = 0.05;

    fn fit(enc: &Encoder, corpus: &[Frame]) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for f in corpus {
            let p = enc.patchify(f)?;
            if sum.is_empty() {
                sum = vec![0.0; p.numel()];
                sq = vec![0.0; p.numel()];
            }
            for ((s, q), &v) in sum.iter_mut().zip(sq.iter_mut()).zip(p.data()) {
                *s += v as f64;
                *q += (v as f64) * (v as f64);
            }
        }
        let n = corpus.len() as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let inv_std = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let var = (q / n - (s / n) * (s / n)).max(0.0);
                1.0 / (var.sqrt() as f32).max(Self::STD_FLOOR)
            })
            .collect();
        Ok(PixelStats { mean, inv_std })
    }

    fn standardize(&self, patches: &Tensor) -> Tensor {
        let mut out = patches.clone();
        for ((v, m), s) in out.data_mut().iter_mut().zip(&self.mean).zip(&self.inv_std) {
            *v = (*v - m) * s;
        }
        out
    }
}

/// Token-branch and pooled-branch reconstruction errors for one frame.
fn reconstruction(
    enc: &Encoder,
    dec: &Decoder,
    g: &mut Graph,
    eb: &Bound,
    db: &Bound,
    patches: Tensor,
    residual: Tensor,
) -> Result<(Var, Var)> {
    let x = g.constant(patches.clone());
    let tokens = enc.forward(g, eb, x)?;
    let target = g.constant(patches);

    let recon = dec.out.forward(g, db, tokens)?;
    let diff = g.sub(recon, target)?;
    let sq = g.mul(diff, diff)?;
    let token_loss = g.mean(sq)?;

    let pooled = g.mean_rows(tokens)?;
    let hp = dec.from_pool.forward(g, db, pooled)?;
    let pos = g.constant(enc.pos.clone());
    let hq = dec.from_pos.forward(g, db, pos)?;
    let h = g.mul(hq, hp)?;
    let h = g.tanh(h)?;
    let recon = dec.global_out.forward(g, db, h)?;
    let target = g.constant(residual);
    let diff = g.sub(recon, target)?;
    let sq = g.mul(diff, diff)?;
    let pooled_loss = g.mean(sq)?;
    Ok((token_loss, pooled_loss))
}

/// Trains encoder + decoder on pixel reconstruction, then freezes the encoder
/// and drops the decoder. `holdout` frames are only evaluated.
pub fn pretrain_encoder(
    corpus: &[Frame],
    holdout: &[Frame],
    cfg: EncoderConfig,
    train: &PretrainConfig,
    seed: u64,
) -> Result<(Encoder, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::invalid("encoder pretraining corpus is empty"));
    }
    let mut enc = Encoder::new(cfg, seed)?;
    let stats = PixelStats::fit(&enc, corpus)?;
    let mut dec = Decoder::new(cfg.embed_dim, cfg.patch_dim(), seed);
    let adam = AdamConfig {
        lr: train.lr,
        ..AdamConfig::default()
    };
    let mut enc_opt = AdamState::new(adam, enc.store.tensors());
    let mut dec_opt = AdamState::new(adam, dec.store.tensors());
    let mut r = rng::stream(seed, "shuffle.encoder");
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut r);
    let mut cursor = 0;
    let mut report = PretrainReport::default();
    let batch = train.batch.max(1);

    for _ in 0..train.steps {
        let mut ge = nn::zero_grads(&enc.store);
        let mut gd = nn::zero_grads(&dec.store);
        let mut token_total = 0.0f32;
        let mut pooled_total = 0.0f32;
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut r);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            enc.ensure_trainable()?;
            let patches = enc.patchify(&corpus[idx])?;
            let residual = stats.standardize(&patches);
            let mut g = Graph::new();
            let eb = enc.store.bind(&mut g, true);
            let db = dec.store.bind(&mut g, true);
            let (token_loss, pooled_loss) = reconstruction(&enc, &dec, &mut g, &eb, &db, patches, residual)?;
            let pl = g.scale(pooled_loss, train.pooled_weight)?;
            let loss = g.add(token_loss, pl)?;
            let grads = g.backward(loss)?;
            nn::accumulate(&mut ge, &eb.grads(&grads, &enc.store));
            nn::accumulate(&mut gd, &db.grads(&grads, &dec.store));
            token_total += g.value(token_loss).item()?;
            pooled_total += g.value(pooled_loss).item()?;
        }
        let scale = 1.0 / batch as f32;
        for v in ge.iter_mut().chain(gd.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= scale);
        }
        enc_opt.step(enc.store.tensors_mut(), &ge)?;
        dec_opt.step(dec.store.tensors_mut(), &gd)?;
        report.token_losses.push(token_total * scale);
        report.pooled_losses.push(pooled_total * scale);
    }
    if !holdout.is_empty() {
        let mut se = 0.0f64;
        for f in holdout {
            let mut g = Graph::new();
            let eb = enc.store.bind(&mut g, false);
            let db = dec.store.bind(&mut g, false);
            let patches = enc.patchify(f)?;
            let residual = stats.standardize(&patches);
            let (token_loss, _) = reconstruction(&enc, &dec, &mut g, &eb, &db, patches, residual)?;
            se += g.value(token_loss).item()? as f64;
        }
        report.holdout_mse = Some((se / holdout.len() as f64) as f32);
    }
    enc.freeze();
    Ok((enc, report))
}

/// Pixel MSE of predicting every frame by the per-pixel mean of `fit`.
pub fn mean_frame_mse(fit: &[Frame], eval: &[Frame]) -> f32 {
    let n = fit[0].data.len();
    let mut mean = vec![0.0f64; n];
    for f in fit {
        for (m, &v) in mean.iter_mut().zip(&f.data) {
            *m += v as f64 / 127.5 - 1.0;
        }
    }
    mean.iter_mut().for_each(|m| *m /= fit.len() as f64);
    let mut se = 0.0f64;
    for f in eval {
        for (m, &v) in mean.iter().zip(&f.data) {
            let d = v as f64 / 127.5 - 1.0 - m;
            se += d * d;
        }
    }
    (se / (eval.len() * n) as f64) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::render::render_pendulum;
    use crate::envs::PendulumState;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            width: 16,
            height: 16,
            patch: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            frozen: false,
        }
    }

    fn frame(theta: f32, size: usize) -> Frame {
        render_pendulum(PendulumState { theta, theta_dot: 0.0 }, size, size)
    }

    #[test]
    fn desk_token_geometry() {
        let enc = Encoder::new(EncoderConfig::preset(EncoderPreset::Desk), 1).unwrap();
        let lat = enc.encode(&frame(0.3, 64)).unwrap();
        assert_eq!(lat.tokens.shape(), &[64, 64]);
        assert_eq!(lat.pooled.len(), 64);
        for j in 0..64 {
            let m: f32 = (0..64).map(|r| lat.tokens.get2(r, j)).sum::<f32>() / 64.0;
            assert!((m - lat.pooled[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let enc = Encoder::new(tiny_cfg(), 4).unwrap();
        let f = frame(1.0, 16);
        assert_eq!(enc.encode(&f).unwrap(), enc.encode(&f).unwrap());
    }

    #[test]
    fn wrong_frame_size_is_rejected() {
        let enc = Encoder::new(tiny_cfg(), 4).unwrap();
        assert!(enc.encode(&frame(0.0, 32)).is_err());
    }

    #[test]
    fn indivisible_patch_is_rejected() {
        let mut c = tiny_cfg();
        c.patch = 5;
        assert!(Encoder::new(c, 0).is_err());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(pretrain_encoder(&[], &[], tiny_cfg(), &PretrainConfig::default(), 0).is_err());
    }

    #[test]
    fn frozen_encoder_refuses_gradients() {
        let mut enc = Encoder::new(tiny_cfg(), 4).unwrap();
        enc.freeze();
        assert!(enc.ensure_trainable().is_err());
    }

    #[test]
    fn pretraining_is_seeded_and_freezes() {
        let frames: Vec<Frame> = (0..12).map(|i| frame(i as f32 * 0.5 - 3.0, 16)).collect();
        let tc = PretrainConfig { steps: 5, batch: 2, lr: 1e-2, pooled_weight: 4.0 };
        let (a, ra) = pretrain_encoder(&frames, &[], tiny_cfg(), &tc, 9).unwrap();
        let (b, rb) = pretrain_encoder(&frames, &[], tiny_cfg(), &tc, 9).unwrap();
        assert!(a.is_frozen());
        assert_eq!(a.params(), b.params());
        assert_eq!(ra, rb);
    }

    #[test]
    fn export_import_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.lcbc");
        let enc = Encoder::new(tiny_cfg(), 2).unwrap();
        enc.save(&path).unwrap();
        let back = Encoder::import(&path, tiny_cfg()).unwrap();
        assert!(back.is_frozen());
        let f = frame(0.7, 16);
        let (x, y) = (enc.encode(&f).unwrap(), back.encode(&f).unwrap());
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x.tokens.data()), bits(y.tokens.data()));
    }

    #[test]
    fn import_errors_are_descriptive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.lcbc");
        let enc = Encoder::new(tiny_cfg(), 2).unwrap();
        enc.save(&path).unwrap();

        let mut wide = tiny_cfg();
        wide.embed_dim = 12;
        let msg = Encoder::import(&path, wide).unwrap_err().to_string();
        assert!(msg.contains("shape"), "{msg}");

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let msg = Encoder::import(&path, tiny_cfg()).unwrap_err().to_string();
        assert!(msg.contains("missing tensor 'encoder."), "{msg}");
    }
}
