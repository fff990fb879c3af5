//! Data collection and the two training stages.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::certificate::{
    barrier_loss_on, lie_loss_on, pair_values, stack, BarrierHyper, BarrierNet, Standardizer, StepId,
    Transition,
};
use crate::controller::{imitation_loss_on, synthesis_graph, PolicyNet, SynthesisBinding, SynthesisSample};
use crate::encoder::{pretrain_encoder, Encoder, EncoderConfig, Latent, PretrainConfig, PretrainReport};
use crate::envs::{Env, EnvKind, EnvState, Frame, SafetyLabel};
use crate::error::{Error, Result};
use crate::ndmath::checkpoint::{self, Blob};
use crate::ndmath::{AdamConfig, AdamState, Graph, Tensor};
use crate::nn;
use crate::rng::{self, Rng};
use crate::world_model::{
    mean_horizon_loss, train_world_model_with, windows, ContextWindow, LatentEpisode, LatentShape, PrefixCache,
    TransitionModel, WmTrainConfig, WorldModelConfig,
};

pub const DEFAULT_EPISODE_LEN: usize = 100;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const DATA_FILE: &str = "data.lcbc";
pub const ENCODER_FILE: &str = "encoder.lcbc";
pub const WORLD_MODEL_FILE: &str = "world_model.lcbc";
pub const BARRIER_FILE: &str = "barrier.lcbc";
pub const POLICY_FILE: &str = "policy.lcbc";

/// One stored observation. `state` is ground truth for labeling and evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub frame: Frame,
    pub proprio: Vec<f32>,
    pub state: EnvState,
}

/// `actions[t]` moved `records[t]` to `records[t + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub records: Vec<Record>,
    pub actions: Vec<Vec<f32>>,
}

impl Episode {
    pub fn transitions(&self) -> usize {
        self.actions.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDataset {
    pub kind: EnvKind,
    pub seed: u64,
    pub episodes: Vec<Episode>,
}

/// Text header of a dataset directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub env: EnvKind,
    pub seed: u64,
    pub episodes: usize,
    pub transitions: usize,
    pub records: usize,
    pub width: usize,
    pub height: usize,
    pub action_dim: usize,
    pub proprio_dim: usize,
    pub state_dim: usize,
    /// Transitions per episode.
    pub lengths: Vec<usize>,
    pub data_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let lengths: Vec<String> = self.lengths.iter().map(|l| l.to_string()).collect();
        format!(
            "env = {}\nseed = {}\nepisodes = {}\ntransitions = {}\nrecords = {}\nframe = {}x{}x3\n\
             action_dim = {}\nproprio_dim = {}\nstate_dim = {}\nlengths = {}\ndata = {}\ndata_sha256 = {}\n",
            self.env,
            self.seed,
            self.episodes,
            self.transitions,
            self.records,
            self.width,
            self.height,
            self.action_dim,
            self.proprio_dim,
            self.state_dim,
            lengths.join(","),
            DATA_FILE,
            self.data_sha256
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                msg: format!("manifest line '{line}' is not 'key = value'"),
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::invalid(format!("manifest lacks '{k}'")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::invalid(format!("manifest '{k}' is not a count")))
        };
        let frame = get("frame")?;
        let dims: Vec<usize> = frame.split('x').filter_map(|d| d.parse().ok()).collect();
        if dims.len() != 3 || dims[2] != 3 {
            return Err(Error::invalid(format!("manifest frame '{frame}' is not WxHx3")));
        }
        let lengths = get("lengths")?;
        let lengths = if lengths.is_empty() {
            Vec::new()
        } else {
            lengths
                .split(',')
                .map(|l| l.trim().parse().map_err(|_| Error::invalid("manifest lengths are not counts")))
                .collect::<Result<Vec<usize>>>()?
        };
        Ok(Manifest {
            env: get("env")?.parse()?,
            seed: get("seed")?.parse().map_err(|_| Error::invalid("manifest seed is not an integer"))?,
            episodes: num("episodes")?,
            transitions: num("transitions")?,
            records: num("records")?,
            width: dims[0],
            height: dims[1],
            action_dim: num("action_dim")?,
            proprio_dim: num("proprio_dim")?,
            state_dim: num("state_dim")?,
            lengths,
            data_sha256: get("data_sha256")?.clone(),
        })
    }

    /// Hash of the manifest text, which covers the data hash.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

impl TransitionDataset {
    pub fn transitions(&self) -> usize {
        self.episodes.iter().map(Episode::transitions).sum()
    }

    pub fn records(&self) -> usize {
        self.episodes.iter().map(|e| e.records.len()).sum()
    }

    pub fn record(&self, id: StepId) -> &Record {
        &self.episodes[id.trajectory].records[id.step]
    }

    fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        let ep = self
            .episodes
            .iter()
            .find(|e| !e.actions.is_empty())
            .ok_or_else(|| Error::invalid("dataset has no transitions"))?;
        let r = &ep.records[0];
        Ok((r.frame.width, r.frame.height, ep.actions[0].len(), r.proprio.len()))
    }

    fn blobs(&self) -> Result<Vec<(String, Blob)>> {
        let (w, h, a, p) = self.dims()?;
        let s = self.kind.state_dim();
        let n = self.records();
        let mut frames = Vec::with_capacity(n * w * h * 3);
        let mut proprios = Vec::with_capacity(n * p);
        let mut states = Vec::with_capacity(n * s);
        let mut actions = Vec::with_capacity(self.transitions() * a);
        for ep in &self.episodes {
            if ep.records.len() != ep.actions.len() + 1 {
                return Err(Error::invalid("episode needs one more record than actions"));
            }
            for r in &ep.records {
                if r.frame.width != w || r.frame.height != h || r.proprio.len() != p {
                    return Err(Error::invalid("dataset records differ in shape"));
                }
                frames.extend_from_slice(&r.frame.data);
                proprios.extend_from_slice(&r.proprio);
                states.extend(r.state.to_vec());
            }
            for u in &ep.actions {
                if u.len() != a {
                    return Err(Error::invalid("dataset actions differ in length"));
                }
                actions.extend_from_slice(u);
            }
        }
        Ok(vec![
            ("frames".into(), Blob::U8 { shape: vec![n, h, w, 3], data: frames }),
            ("actions".into(), Blob::F32(Tensor::new(vec![self.transitions(), a], actions)?)),
            ("proprios".into(), Blob::F32(Tensor::new(vec![n, p], proprios)?)),
            ("states".into(), Blob::F32(Tensor::new(vec![n, s], states)?)),
        ])
    }

    /// Writes `manifest.txt` and `data.lcbc` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir)?;
        let data_path = dir.join(DATA_FILE);
        checkpoint::save_blobs(&data_path, &self.blobs()?)?;
        let (w, h, a, p) = self.dims()?;
        let manifest = Manifest {
            env: self.kind,
            seed: self.seed,
            episodes: self.episodes.len(),
            transitions: self.transitions(),
            records: self.records(),
            width: w,
            height: h,
            action_dim: a,
            proprio_dim: p,
            state_dim: self.kind.state_dim(),
            lengths: self.episodes.iter().map(Episode::transitions).collect(),
            data_sha256: sha256_hex(&fs::read(&data_path)?),
        };
        fs::write(dir.join(MANIFEST_FILE), manifest.to_text())?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let mpath = dir.join(MANIFEST_FILE);
        if !mpath.exists() {
            return Err(Error::Missing(mpath));
        }
        let manifest = Manifest::parse(&fs::read_to_string(&mpath)?)?;
        let data_path = dir.join(DATA_FILE);
        if !data_path.exists() {
            return Err(Error::Missing(data_path));
        }
        let bytes = fs::read(&data_path)?;
        if sha256_hex(&bytes) != manifest.data_sha256 {
            return Err(Error::Checkpoint {
                path: data_path.display().to_string(),
                msg: "contents do not match the manifest hash".into(),
            });
        }
        let blobs = checkpoint::load_blobs(&data_path)?;
        let find = |name: &str| {
            blobs.iter().find(|(n, _)| n == name).map(|(_, b)| b).ok_or_else(|| Error::Checkpoint {
                path: data_path.display().to_string(),
                msg: format!("missing tensor '{name}'"),
            })
        };
        let m = &manifest;
        let n = m.records;
        let frames = match find("frames")? {
            Blob::U8 { shape, data } if shape == &[n, m.height, m.width, 3] => data,
            _ => return Err(Error::invalid("dataset frames blob has the wrong type or shape")),
        };
        let f32_blob = |name: &str, shape: &[usize]| -> Result<&[f32]> {
            match find(name)? {
                Blob::F32(t) if t.shape() == shape => Ok(t.data()),
                _ => Err(Error::invalid(format!("dataset {name} blob has the wrong type or shape"))),
            }
        };
        let actions = f32_blob("actions", &[m.transitions, m.action_dim])?;
        let proprios = f32_blob("proprios", &[n, m.proprio_dim])?;
        let states = f32_blob("states", &[n, m.state_dim])?;
        if m.lengths.len() != m.episodes
            || m.lengths.iter().sum::<usize>() != m.transitions
            || m.transitions + m.episodes != n
        {
            return Err(Error::invalid("manifest counts are inconsistent"));
        }
        let px = m.width * m.height * 3;
        let (mut r, mut t) = (0usize, 0usize);
        let mut episodes = Vec::with_capacity(m.episodes);
        for &len in &m.lengths {
            let mut records = Vec::with_capacity(len + 1);
            for _ in 0..=len {
                records.push(Record {
                    frame: Frame {
                        width: m.width,
                        height: m.height,
                        data: frames[r * px..(r + 1) * px].to_vec(),
                    },
                    proprio: proprios[r * m.proprio_dim..(r + 1) * m.proprio_dim].to_vec(),
                    state: EnvState::from_slice(m.env, &states[r * m.state_dim..(r + 1) * m.state_dim])?,
                });
                r += 1;
            }
            let acts = (0..len)
                .map(|i| actions[(t + i) * m.action_dim..(t + i + 1) * m.action_dim].to_vec())
                .collect();
            t += len;
            episodes.push(Episode { records, actions: acts });
        }
        Ok((
            TransitionDataset {
                kind: m.env,
                seed: m.seed,
                episodes,
            },
            manifest,
        ))
    }
}

fn record(env: &Env, s: &EnvState) -> Result<Record> {
    Ok(Record {
        frame: env.render(s)?,
        proprio: env.proprio(s),
        state: *s,
    })
}

fn rollout_episode(
    env: &Env,
    start: EnvState,
    len: usize,
    r: &mut Rng,
    mut policy: impl FnMut(&EnvState, &mut Rng) -> f32,
) -> Result<Episode> {
    let mut s = start;
    let mut records = Vec::with_capacity(len + 1);
    let mut actions = Vec::with_capacity(len);
    for _ in 0..len {
        records.push(record(env, &s)?);
        let u = policy(&s, r);
        actions.push(vec![u]);
        s = env.step(&s, u)?;
    }
    records.push(record(env, &s)?);
    Ok(Episode { records, actions })
}

/// Episodes of `episode_len` transitions from uniform random states under
/// uniform random actions; the last episode holds the remainder of `n`.
pub fn collect_random(env: &Env, n: usize, episode_len: usize, seed: u64) -> Result<TransitionDataset> {
    if n == 0 || episode_len == 0 {
        return Err(Error::invalid("collect_random needs n > 0 and episode_len > 0"));
    }
    let count = n.div_ceil(episode_len);
    let episodes = (0..count)
        .map(|i| {
            let len = episode_len.min(n - i * episode_len);
            let mut r = rng::substream(seed, "collect.random", i as u64);
            let start = env.random_state(&mut r);
            rollout_episode(env, start, len, &mut r, |_, r| env.random_action(r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransitionDataset {
        kind: env.kind,
        seed,
        episodes,
    })
}

/// Reference-policy rollouts from uniform random states, labeled.
pub fn collect_labeled(
    env: &Env,
    n_trajectories: usize,
    episode_len: usize,
    seed: u64,
) -> Result<(TransitionDataset, LabeledSets)> {
    if n_trajectories == 0 || episode_len == 0 {
        return Err(Error::invalid("collect_labeled needs trajectories > 0 and episode_len > 0"));
    }
    let episodes = (0..n_trajectories)
        .map(|i| {
            let mut r = rng::substream(seed, "collect.labeled", i as u64);
            let start = env.random_state(&mut r);
            rollout_episode(env, start, episode_len, &mut r, |s, _| env.reference_action(s))
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = TransitionDataset {
        kind: env.kind,
        seed,
        episodes,
    };
    let sets = LabeledSets::build(&ds);
    Ok((ds, sets))
}

/// Index sets over a labeled dataset. A pair entry `i` stands for records
/// `(i, i + 1)` and is filed under the label of record `i + 1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSets {
    pub safe: Vec<StepId>,
    pub unsafe_: Vec<StepId>,
    pub all: Vec<StepId>,
    pub safe_pairs: Vec<StepId>,
    pub unsafe_pairs: Vec<StepId>,
}

impl LabeledSets {
    pub fn build(ds: &TransitionDataset) -> Self {
        let mut sets = LabeledSets::default();
        for (e, ep) in ds.episodes.iter().enumerate() {
            for (t, r) in ep.records.iter().enumerate() {
                let id = StepId { trajectory: e, step: t };
                sets.all.push(id);
                let label = crate::envs::label(&r.state);
                match label {
                    SafetyLabel::Safe => sets.safe.push(id),
                    SafetyLabel::Unsafe => sets.unsafe_.push(id),
                    SafetyLabel::Neither => {}
                }
                if t > 0 {
                    let prev = StepId { trajectory: e, step: t - 1 };
                    match label {
                        SafetyLabel::Safe => sets.safe_pairs.push(prev),
                        SafetyLabel::Unsafe => sets.unsafe_pairs.push(prev),
                        SafetyLabel::Neither => {}
                    }
                }
            }
        }
        sets
    }

    /// Entries whose trajectory is in `episodes`.
    pub fn restrict(&self, episodes: &[usize]) -> Self {
        let keep = |v: &[StepId]| v.iter().copied().filter(|id| episodes.contains(&id.trajectory)).collect();
        LabeledSets {
            safe: keep(&self.safe),
            unsafe_: keep(&self.unsafe_),
            all: keep(&self.all),
            safe_pairs: keep(&self.safe_pairs),
            unsafe_pairs: keep(&self.unsafe_pairs),
        }
    }

    /// Recomputes every label from the stored states.
    pub fn recheck(&self, ds: &TransitionDataset) -> Result<()> {
        let expect = |ids: &[StepId], offset: usize, want: SafetyLabel| -> Result<()> {
            for id in ids {
                let probe = StepId {
                    trajectory: id.trajectory,
                    step: id.step + offset,
                };
                let got = crate::envs::label(&ds.record(probe).state);
                if got != want {
                    return Err(Error::invalid(format!("{probe:?} is {got:?}, filed as {want:?}")));
                }
            }
            Ok(())
        };
        expect(&self.safe, 0, SafetyLabel::Safe)?;
        expect(&self.unsafe_, 0, SafetyLabel::Unsafe)?;
        expect(&self.safe_pairs, 1, SafetyLabel::Safe)?;
        expect(&self.unsafe_pairs, 1, SafetyLabel::Unsafe)
    }
}

/// Every tenth episode (index 9, 19, ...) is held out; with fewer than ten
/// episodes the last one is.
pub fn split_episodes(count: usize) -> (Vec<usize>, Vec<usize>) {
    let held = |i: usize| i % 10 == 9 || (count < 10 && count > 1 && i == count - 1);
    ((0..count).filter(|&i| !held(i)).collect(), (0..count).filter(|&i| held(i)).collect())
}

/// One row of a training report. Unused loss columns stay empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub stage: u8,
    pub epoch: usize,
    pub seed: u64,
    pub l_pred: Option<f32>,
    pub l_pred_heldout: Option<f32>,
    pub l_barrier: Option<f32>,
    pub l_lie: Option<f32>,
    pub l_syn: Option<f32>,
    pub l_pi: Option<f32>,
    pub l_total: Option<f32>,
    pub monitor_barrier: Option<f32>,
    pub monitor_controller: Option<f32>,
    pub barrier_frozen: bool,
    pub converged: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub seed: u64,
    pub rows: Vec<EpochRow>,
    /// Not part of the CSV.
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<EpochRow>> {
        let mut r = csv::Reader::from_path(path)?;
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Config {
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub world: WorldModelConfig,
    pub train: WmTrainConfig,
    /// Held-out windows scored after every epoch.
    pub heldout_windows: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            encoder: EncoderConfig::preset(crate::encoder::EncoderPreset::Desk),
            pretrain: PretrainConfig::default(),
            world: WorldModelConfig::default(),
            train: WmTrainConfig::default(),
            heldout_windows: 64,
        }
    }
}

pub struct Stage1 {
    pub encoder: Encoder,
    pub model: TransitionModel,
    pub report: TrainReport,
    pub encoder_report: Option<PretrainReport>,
}

/// Model input sizes for `env` under encoder `cfg`.
pub fn latent_shape(env: &Env, cfg: &EncoderConfig) -> LatentShape {
    LatentShape {
        patches: cfg.num_patches(),
        embed_dim: cfg.embed_dim,
        action_dim: env.action_dim(),
        proprio_dim: env.proprio_dim(),
        action_bounds: env.action_bounds(),
        proprio_scale: match env.kind {
            EnvKind::Pendulum => env.params.pendulum.max_speed,
            EnvKind::Dubins => std::f32::consts::PI,
        },
    }
}

pub fn encode_episode(encoder: &Encoder, ep: &Episode) -> Result<LatentEpisode> {
    Ok(LatentEpisode {
        tokens: ep
            .records
            .iter()
            .map(|r| encoder.encode(&r.frame).map(|l| l.tokens))
            .collect::<Result<_>>()?,
        actions: ep.actions.clone(),
        proprios: ep.records.iter().map(|r| r.proprio.clone()).collect(),
    })
}

fn evenly(n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        (0..k).map(|i| i * n / k).collect()
    }
}

/// Pretrains (or imports) and freezes the encoder, then fits the transition
/// model for exactly `cfg.train.epochs` epochs.
pub fn train_stage1(
    ds: &TransitionDataset,
    env: &Env,
    cfg: &Stage1Config,
    import: Option<&Path>,
    seed: u64,
) -> Result<Stage1> {
    let clock = Instant::now();
    if ds.kind != env.kind {
        return Err(Error::invalid(format!("{} dataset given for {} env", ds.kind, env.kind)));
    }
    let (train_eps, held_eps) = split_episodes(ds.episodes.len());
    let (mut encoder, encoder_report) = match import {
        Some(path) => (Encoder::import(path, cfg.encoder)?, None),
        None => {
            let corpus: Vec<Frame> = train_eps
                .iter()
                .flat_map(|&e| ds.episodes[e].records.iter().map(|r| r.frame.clone()))
                .collect();
            let held: Vec<Frame> = held_eps
                .iter()
                .flat_map(|&e| ds.episodes[e].records.iter().map(|r| r.frame.clone()))
                .collect();
            let held: Vec<Frame> = evenly(held.len(), 256).into_iter().map(|i| held[i].clone()).collect();
            let (enc, rep) = pretrain_encoder(&corpus, &held, cfg.encoder, &cfg.pretrain, seed)?;
            (enc, Some(rep))
        }
    };
    encoder.freeze();
    let encode = |eps: &[usize]| -> Result<Vec<LatentEpisode>> {
        eps.iter().map(|&e| encode_episode(&encoder, &ds.episodes[e])).collect()
    };
    let train = encode(&train_eps)?;
    let held = encode(&held_eps)?;
    let held_windows = windows(&held, cfg.world.context, cfg.train.horizon);
    let held_windows: Vec<(usize, usize)> = evenly(held_windows.len(), cfg.heldout_windows)
        .into_iter()
        .map(|i| held_windows[i])
        .collect();
    let shape = latent_shape(env, &cfg.encoder);
    let mut rows = Vec::with_capacity(cfg.train.epochs);
    let (model, _) = train_world_model_with(&encoder, &train, cfg.world, shape, &cfg.train, seed, |epoch, m, loss| {
        let heldout = if held_windows.is_empty() {
            None
        } else {
            Some(mean_horizon_loss(m, &held, &held_windows, cfg.train.horizon)?)
        };
        rows.push(EpochRow {
            stage: 1,
            epoch: epoch + 1,
            seed,
            l_pred: Some(loss),
            l_pred_heldout: heldout,
            converged: epoch + 1 == cfg.train.epochs,
            ..EpochRow::default()
        });
        Ok(())
    })?;
    Ok(Stage1 {
        encoder,
        model,
        report: TrainReport {
            seed,
            rows,
            wall_clock_secs: clock.elapsed().as_secs_f64(),
        },
        encoder_report,
    })
}

pub fn save_stage1(dir: &Path, s: &Stage1) -> Result<()> {
    fs::create_dir_all(dir)?;
    s.encoder.save(&dir.join(ENCODER_FILE))?;
    s.model.save(&dir.join(WORLD_MODEL_FILE))
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Missing(path))
    }
}

/// Loads the frozen encoder and transition model written by [`save_stage1`].
pub fn load_stage1(
    dir: &Path,
    env: &Env,
    encoder: EncoderConfig,
    world: WorldModelConfig,
) -> Result<(Encoder, TransitionModel)> {
    let enc_path = require(dir.join(ENCODER_FILE))?;
    let wm_path = require(dir.join(WORLD_MODEL_FILE))?;
    let enc = Encoder::import(&enc_path, encoder)?;
    let model = TransitionModel::load(&wm_path, world, latent_shape(env, &encoder))?;
    Ok((enc, model))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Config {
    pub hyper: BarrierHyper,
    pub barrier_hidden: Vec<usize>,
    pub policy_hidden: Vec<usize>,
    pub barrier_lr: f32,
    pub policy_lr: f32,
    /// Per-set minibatch for the barrier, Lie and imitation terms.
    pub batch: usize,
    pub synthesis_batch: usize,
    /// Training contexts with precomputed prefix keys/values.
    pub synthesis_pool: usize,
    /// Size of the fixed sets the convergence monitors are evaluated on.
    pub monitor: usize,
    pub max_iters: usize,
    pub window: usize,
    pub tol: f32,
    pub joint_theta: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            hyper: BarrierHyper::default(),
            barrier_hidden: vec![64, 64],
            policy_hidden: vec![64, 64],
            barrier_lr: 1e-3,
            policy_lr: 1e-3,
            batch: 64,
            synthesis_batch: 16,
            synthesis_pool: 1024,
            monitor: 256,
            max_iters: 2000,
            window: 20,
            tol: 1e-3,
            joint_theta: false,
        }
    }
}

/// Plateau detector: fires once the mean of the last `window` values differs
/// from the mean of the `window` before by less than `tol` relative.
#[derive(Clone, Debug)]
pub struct Convergence {
    window: usize,
    tol: f32,
    history: Vec<f32>,
}

impl Convergence {
    pub fn new(window: usize, tol: f32) -> Self {
        Convergence {
            window: window.max(1),
            tol,
            history: Vec::new(),
        }
    }

    pub fn push(&mut self, v: f32) -> bool {
        self.history.push(v);
        let n = self.history.len();
        let w = self.window;
        if n < 2 * w {
            return false;
        }
        let mean = |s: &[f32]| s.iter().map(|&x| x as f64).sum::<f64>() / s.len() as f64;
        let now = mean(&self.history[n - w..]);
        let before = mean(&self.history[n - 2 * w..n - w]);
        (now - before).abs() / before.abs().max(1e-8) < self.tol as f64
    }
}

pub struct Stage2 {
    pub barrier: BarrierNet,
    pub policy: PolicyNet,
    pub report: TrainReport,
    /// Iteration (1-based) after which the barrier stopped updating.
    pub frozen_at: Option<usize>,
}

pub fn save_stage2(dir: &Path, s: &Stage2) -> Result<()> {
    fs::create_dir_all(dir)?;
    s.barrier.save(&dir.join(BARRIER_FILE))?;
    s.policy.save(&dir.join(POLICY_FILE))
}

pub fn load_stage2(
    dir: &Path,
    env: &Env,
    latent_dim: usize,
    cfg: &Stage2Config,
) -> Result<(BarrierNet, PolicyNet)> {
    let b = BarrierNet::load(&require(dir.join(BARRIER_FILE))?, latent_dim, &cfg.barrier_hidden)?;
    let p = PolicyNet::load(
        &require(dir.join(POLICY_FILE))?,
        latent_dim,
        env.proprio_dim(),
        &cfg.policy_hidden,
        &[env.action_bounds()],
    )?;
    Ok((b, p))
}

struct PoolEntry {
    prefix: PrefixCache,
    tokens: Tensor,
    pooled: Vec<f32>,
    proprio: Vec<f32>,
}

impl PoolEntry {
    fn sample(&self) -> SynthesisSample<'_> {
        SynthesisSample {
            prefix: &self.prefix,
            tokens: &self.tokens,
            pooled: &self.pooled,
            proprio: &self.proprio,
        }
    }
}

/// Pooled latents of a labeled dataset plus the synthesis context pool.
struct Stage2Data<'a> {
    ds: &'a TransitionDataset,
    pooled: HashMap<StepId, Vec<f32>>,
    pool: Vec<PoolEntry>,
}

impl Stage2Data<'_> {
    fn z(&self, id: StepId) -> &[f32] {
        &self.pooled[&id]
    }

    fn next(id: StepId) -> StepId {
        StepId {
            trajectory: id.trajectory,
            step: id.step + 1,
        }
    }

    fn pairs(&self, ids: &[StepId]) -> Vec<Transition<'_>> {
        ids.iter()
            .map(|&id| Transition {
                from: id,
                to: Self::next(id),
                z: self.z(id),
                z_next: self.z(Self::next(id)),
            })
            .collect()
    }
}

fn prepare_stage2<'a>(
    ds: &'a TransitionDataset,
    sets: &LabeledSets,
    encoder: &Encoder,
    model: &TransitionModel,
    cfg: &Stage2Config,
    seed: u64,
) -> Result<Stage2Data<'a>> {
    let h = model.config().context;
    let mut candidates: Vec<StepId> = sets.all.iter().copied().filter(|id| id.step >= h).collect();
    let mut r = rng::stream(seed, "shuffle.synthesis_pool");
    candidates.shuffle(&mut r);
    candidates.truncate(cfg.synthesis_pool);
    candidates.sort();
    let mut keep_tokens = std::collections::HashSet::new();
    for id in &candidates {
        for t in id.step - h..=id.step {
            keep_tokens.insert(StepId {
                trajectory: id.trajectory,
                step: t,
            });
        }
    }
    let mut pooled = HashMap::with_capacity(sets.all.len());
    let mut tokens = HashMap::with_capacity(keep_tokens.len());
    for &id in &sets.all {
        let lat = encoder.encode(&ds.record(id).frame)?;
        pooled.insert(id, lat.pooled);
        if keep_tokens.contains(&id) {
            tokens.insert(id, lat.tokens);
        }
    }
    let mut pool = Vec::with_capacity(candidates.len());
    for id in candidates {
        let ep = &ds.episodes[id.trajectory];
        let range = id.step - h..=id.step;
        let ctx = ContextWindow {
            latents: range
                .clone()
                .map(|t| {
                    Latent::from_tokens(
                        tokens[&StepId {
                            trajectory: id.trajectory,
                            step: t,
                        }]
                            .clone(),
                    )
                })
                .collect(),
            actions: range
                .clone()
                .map(|t| ep.actions.get(t).cloned().unwrap_or_else(|| vec![0.0; ep.actions[0].len()]))
                .collect(),
            proprios: range.map(|t| ep.records[t].proprio.clone()).collect(),
        };
        pool.push(PoolEntry {
            prefix: model.prefix_cache(&ctx)?,
            tokens: tokens[&id].clone(),
            pooled: pooled[&id].clone(),
            proprio: ep.records[id.step].proprio.clone(),
        });
    }
    Ok(Stage2Data { ds, pooled, pool })
}

fn pick<T: Copy>(v: &[T], n: usize, r: &mut Rng) -> Vec<T> {
    if v.is_empty() {
        return Vec::new();
    }
    (0..n).map(|_| v[r.gen_range(0..v.len())]).collect()
}

fn fixed<T: Copy>(v: &[T], n: usize, r: &mut Rng) -> Vec<T> {
    let mut v = v.to_vec();
    v.shuffle(r);
    v.truncate(n);
    v
}

/// Records with a stored reference action.
fn acted(sets: &LabeledSets, ds: &TransitionDataset) -> Vec<StepId> {
    sets.all
        .iter()
        .copied()
        .filter(|id| id.step < ds.episodes[id.trajectory].actions.len())
        .collect()
}

struct Batch {
    safe: Vec<StepId>,
    unsafe_: Vec<StepId>,
    safe_pairs: Vec<StepId>,
    unsafe_pairs: Vec<StepId>,
    imitation: Vec<StepId>,
    synthesis: Vec<usize>,
}

/// `(L_barrier, L_lie)` of `batch`, each divided by `norm`, on a graph with `b` bound.
fn certificate_terms(
    g: &mut Graph,
    b: &BarrierNet,
    bb: &nn::Bound,
    data: &Stage2Data,
    batch: &Batch,
    h: &BarrierHyper,
    norm: f32,
) -> Result<(crate::ndmath::Var, crate::ndmath::Var)> {
    let d = b.input_dim();
    let zs: Vec<&[f32]> = batch.safe.iter().map(|&id| data.z(id)).collect();
    let zu: Vec<&[f32]> = batch.unsafe_.iter().map(|&id| data.z(id)).collect();
    let zs = g.constant(stack(&zs, d, "stage2")?);
    let zu = g.constant(stack(&zu, d, "stage2")?);
    let bs = b.forward(g, bb, zs)?;
    let bu = b.forward(g, bb, zu)?;
    let lb = barrier_loss_on(g, bs, bu, h)?;
    let lb = g.scale(lb, 1.0 / norm)?;
    let sp = data.pairs(&batch.safe_pairs);
    let up = data.pairs(&batch.unsafe_pairs);
    let s = pair_values(g, b, bb, &sp)?;
    let u = pair_values(g, b, bb, &up)?;
    let ll = lie_loss_on(g, s, u, h)?;
    let ll = g.scale(ll, 1.0 / norm)?;
    Ok((lb, ll))
}

/// `(L_syn, L_π)` of `batch`; synthesis divided by its batch size.
fn controller_terms(
    g: &mut Graph,
    nets: &SynthesisBinding,
    data: &Stage2Data,
    batch: &Batch,
) -> Result<(crate::ndmath::Var, crate::ndmath::Var)> {
    let samples: Vec<SynthesisSample> = batch.synthesis.iter().map(|&i| data.pool[i].sample()).collect();
    let ls = synthesis_graph(g, nets, &samples)?;
    let ls = g.scale(ls, 1.0 / samples.len() as f32)?;
    let (pi, pb) = nets.policy;
    let zs: Vec<&[f32]> = batch.imitation.iter().map(|&id| data.z(id)).collect();
    let ps: Vec<&[f32]> = batch.imitation.iter().map(|&id| data.ds.record(id).proprio.as_slice()).collect();
    let us: Vec<&[f32]> = batch
        .imitation
        .iter()
        .map(|&id| data.ds.episodes[id.trajectory].actions[id.step].as_slice())
        .collect();
    let z = g.constant(stack(&zs, pi.latent_dim(), "stage2")?);
    let p = g.constant(stack(&ps, pi.proprio_dim(), "stage2")?);
    let u = g.constant(stack(&us, pi.action_dim(), "stage2")?);
    let a = pi.forward(g, pb, z, p)?;
    let li = imitation_loss_on(g, a, u)?;
    Ok((ls, li))
}

/// Joint barrier and controller training. The barrier stops updating once its
/// monitor loss plateaus; the loop ends when the controller monitor plateaus
/// after that, or at `max_iters`.
pub fn train_stage2(
    ds: &TransitionDataset,
    sets: &LabeledSets,
    encoder: &Encoder,
    model: &TransitionModel,
    cfg: &Stage2Config,
    seed: u64,
) -> Result<Stage2> {
    let clock = Instant::now();
    cfg.hyper.validate()?;
    if !encoder.is_frozen() {
        return Err(Error::invalid("stage 2 requires the frozen stage-1 encoder"));
    }
    if sets.safe.is_empty() || sets.unsafe_.is_empty() {
        return Err(Error::invalid("stage 2 needs both safe and unsafe samples"));
    }
    let data = prepare_stage2(ds, sets, encoder, model, cfg, seed)?;
    if data.pool.is_empty() {
        return Err(Error::invalid("no record has a full context window for the synthesis loss"));
    }
    let imitation_ids = acted(sets, ds);
    let e = encoder.embed_dim();
    let ids_sorted = {
        let mut v = sets.all.clone();
        v.sort();
        v
    };
    let zs: Vec<Vec<f32>> = ids_sorted.iter().map(|&id| data.z(id).to_vec()).collect();
    let zp: Vec<Vec<f32>> = ids_sorted
        .iter()
        .map(|&id| [data.z(id), ds.record(id).proprio.as_slice()].concat())
        .collect();
    let env_bounds = model.shape().action_bounds;
    let mut barrier = BarrierNet::new(e, &cfg.barrier_hidden, seed);
    barrier.set_standardizer(Standardizer::fit(&zs)?)?;
    let mut policy = PolicyNet::new(e, model.shape().proprio_dim, &cfg.policy_hidden, &[env_bounds], seed)?;
    policy.set_standardizer(Standardizer::fit(&zp)?)?;

    let mut mr = rng::stream(seed, "shuffle.stage2_monitor");
    let monitor = Batch {
        safe: fixed(&sets.safe, cfg.monitor, &mut mr),
        unsafe_: fixed(&sets.unsafe_, cfg.monitor, &mut mr),
        safe_pairs: fixed(&sets.safe_pairs, cfg.monitor, &mut mr),
        unsafe_pairs: fixed(&sets.unsafe_pairs, cfg.monitor, &mut mr),
        imitation: fixed(&imitation_ids, cfg.monitor, &mut mr),
        synthesis: fixed(&(0..data.pool.len()).collect::<Vec<_>>(), cfg.synthesis_batch, &mut mr),
    };
    let monitor_norm = monitor.safe.len().max(monitor.unsafe_.len()) as f32;

    let adam = |lr| AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    let mut b_opt = AdamState::new(adam(cfg.barrier_lr), barrier.params().tensors());
    let mut p_opt = AdamState::new(adam(cfg.policy_lr), policy.params().tensors());
    let mut r = rng::stream(seed, "shuffle.stage2");
    let mut b_conv = Convergence::new(cfg.window, cfg.tol);
    let mut c_conv = Convergence::new(cfg.window, cfg.tol);
    let mut frozen_at = None;
    let mut rows = Vec::new();

    for iter in 1..=cfg.max_iters {
        let frozen = frozen_at.is_some();
        let batch = Batch {
            safe: pick(&sets.safe, cfg.batch, &mut r),
            unsafe_: pick(&sets.unsafe_, cfg.batch, &mut r),
            safe_pairs: pick(&sets.safe_pairs, cfg.batch, &mut r),
            unsafe_pairs: pick(&sets.unsafe_pairs, cfg.batch, &mut r),
            imitation: pick(&imitation_ids, cfg.batch, &mut r),
            synthesis: pick(&(0..data.pool.len()).collect::<Vec<_>>(), cfg.synthesis_batch, &mut r),
        };

        let mut g = Graph::new();
        let bb = barrier.bind(&mut g, !frozen);
        let (lb, ll) = certificate_terms(&mut g, &barrier, &bb, &data, &batch, &cfg.hyper, cfg.batch as f32)?;
        let cert = g.add(lb, ll)?;
        let mut b_grads = (!frozen)
            .then(|| g.backward(cert).map(|gr| bb.grads(&gr, barrier.params())))
            .transpose()?;
        let (l_barrier, l_lie) = (g.value(lb).item()?, g.value(ll).item()?);

        let mut g = Graph::new();
        let joint = cfg.joint_theta && !frozen;
        let bb = barrier.bind(&mut g, joint);
        let pb = policy.bind(&mut g, true);
        let mb = model.bind(&mut g, false);
        let nets = SynthesisBinding {
            barrier: (&barrier, &bb),
            policy: (&policy, &pb),
            model: (model, &mb),
        };
        let (ls, li) = controller_terms(&mut g, &nets, &data, &batch)?;
        let ctrl = g.add(ls, li)?;
        let gr = g.backward(ctrl)?;
        let p_grads = pb.grads(&gr, policy.params());
        if joint {
            let extra = bb.grads(&gr, barrier.params());
            if let Some(bg) = b_grads.as_mut() {
                nn::accumulate(bg, &extra);
            }
        }
        let (l_syn, l_pi) = (g.value(ls).item()?, g.value(li).item()?);
        let l_total = l_barrier + l_lie + l_syn + l_pi;
        if ![l_barrier, l_lie, l_syn, l_pi].iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "stage 2 iteration {iter}: L_barrier={l_barrier} L_lie={l_lie} L_syn={l_syn} L_pi={l_pi} \
                 (barrier frozen: {frozen})"
            )));
        }
        if let Some(bg) = b_grads {
            b_opt.step(barrier.params_mut().tensors_mut(), &bg)?;
        }
        p_opt.step(policy.params_mut().tensors_mut(), &p_grads)?;

        let mut g = Graph::new();
        let bb = barrier.bind(&mut g, false);
        let (mb_, ml) = certificate_terms(&mut g, &barrier, &bb, &data, &monitor, &cfg.hyper, monitor_norm)?;
        let mut monitor_barrier = g.value(mb_).item()? + g.value(ml).item()?;
        let mut g = Graph::new();
        let bb = barrier.bind(&mut g, false);
        let pb = policy.bind(&mut g, false);
        let mbind = model.bind(&mut g, false);
        let nets = SynthesisBinding {
            barrier: (&barrier, &bb),
            policy: (&policy, &pb),
            model: (model, &mbind),
        };
        let (ms, mi) = controller_terms(&mut g, &nets, &data, &monitor)?;
        let monitor_controller = g.value(ms).item()? + g.value(mi).item()?;
        if cfg.joint_theta {
            // The synthesis term is part of the barrier's objective too.
            monitor_barrier += g.value(ms).item()?;
        }

        if !frozen && b_conv.push(monitor_barrier) {
            frozen_at = Some(iter);
            log::info!("barrier frozen after iteration {iter}");
        }
        let converged = c_conv.push(monitor_controller) && frozen_at.is_some();
        rows.push(EpochRow {
            stage: 2,
            epoch: iter,
            seed,
            l_barrier: Some(l_barrier),
            l_lie: Some(l_lie),
            l_syn: Some(l_syn),
            l_pi: Some(l_pi),
            l_total: Some(l_total),
            monitor_barrier: Some(monitor_barrier),
            monitor_controller: Some(monitor_controller),
            barrier_frozen: frozen_at.is_some(),
            converged,
            ..EpochRow::default()
        });
        if iter % 50 == 0 {
            log::info!(
                "stage 2 iter {iter} barrier {l_barrier:.4} lie {l_lie:.4} syn {l_syn:.4} pi {l_pi:.4} \
                 monitors {monitor_barrier:.4}/{monitor_controller:.4}"
            );
        }
        if converged {
            break;
        }
    }
    Ok(Stage2 {
        barrier,
        policy,
        report: TrainReport {
            seed,
            rows,
            wall_clock_secs: clock.elapsed().as_secs_f64(),
        },
        frozen_at,
    })
}
