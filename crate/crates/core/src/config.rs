//! Run configuration: `key = value` lines under `[section]` headers.
//!
//! Every key is `section.name`. Unknown keys are rejected. Setting
//! `encoder.preset` resets the encoder geometry, render size and model width
//! to that preset before any other key is applied.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::encoder::{EncoderConfig, EncoderPreset, PretrainConfig};
use crate::envs::{EnvKind, EnvParams};
use crate::error::{Error, Result};
use crate::pipeline::{Stage1Config, Stage2Config, DEFAULT_EPISODE_LEN};
use crate::world_model::{WmTrainConfig, WorldModelConfig};

pub const OUT_DIR_ENV: &str = "LCBC_OUT_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct CollectConfig {
    pub random_transitions: usize,
    pub episode_len: usize,
    pub labeled_trajectories: usize,
    pub labeled_episode_len: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            random_transitions: 50_000,
            episode_len: DEFAULT_EPISODE_LEN,
            labeled_trajectories: 250,
            labeled_episode_len: DEFAULT_EPISODE_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub decrease_samples: usize,
    pub rollouts: usize,
    pub pendulum_horizon: usize,
    pub dubins_horizon: usize,
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub heatmap_theta: f32,
    pub cell_px: usize,
    /// Minimum latent/ground-truth decrease agreement before a warning.
    pub agreement_threshold: f32,
    pub pca_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            decrease_samples: 2000,
            rollouts: 100,
            pendulum_horizon: 200,
            dubins_horizon: 150,
            grid_nx: 50,
            grid_ny: 50,
            heatmap_theta: 0.0,
            cell_px: 4,
            agreement_threshold: 0.8,
            pca_samples: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvKind,
    pub seed: u64,
    /// Empty means `$LCBC_OUT_DIR`, then `./out`.
    pub out_dir: String,
    pub env_params: EnvParams,
    pub preset: EncoderPreset,
    pub encoder: EncoderConfig,
    /// Encoder checkpoint to import instead of pretraining; empty to pretrain.
    pub encoder_import: String,
    pub pretrain: PretrainConfig,
    pub world: WorldModelConfig,
    pub wm_train: WmTrainConfig,
    pub heldout_windows: usize,
    pub stage2: Stage2Config,
    pub collect: CollectConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s1 = Stage1Config::default();
        RunConfig {
            env: EnvKind::Pendulum,
            seed: 0,
            out_dir: String::new(),
            env_params: EnvParams::default(),
            preset: EncoderPreset::Desk,
            encoder: s1.encoder,
            encoder_import: String::new(),
            pretrain: s1.pretrain,
            world: s1.world,
            wm_train: s1.train,
            heldout_windows: s1.heldout_windows,
            stage2: Stage2Config::default(),
            collect: CollectConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

enum Slot<'a> {
    F32(&'a mut f32),
    Usize(&'a mut usize),
    U64(&'a mut u64),
    Bool(&'a mut bool),
    Str(&'a mut String),
    Pair(&'a mut (f32, f32)),
    List(&'a mut Vec<usize>),
    Env(&'a mut EnvKind),
    Preset(&'a mut EncoderPreset),
}

fn preset_name(p: EncoderPreset) -> &'static str {
    match p {
        EncoderPreset::Desk => "desk",
        EncoderPreset::Paper => "paper",
    }
}

impl Slot<'_> {
    fn show(&self) -> String {
        match self {
            Slot::F32(v) => v.to_string(),
            Slot::Usize(v) => v.to_string(),
            Slot::U64(v) => v.to_string(),
            Slot::Bool(v) => v.to_string(),
            Slot::Str(v) => v.to_string(),
            Slot::Pair(v) => format!("{}, {}", v.0, v.1),
            Slot::List(v) => v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "),
            Slot::Env(v) => v.to_string(),
            Slot::Preset(v) => preset_name(**v).to_string(),
        }
    }

    fn set(&mut self, raw: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(s: &str, what: &str) -> std::result::Result<T, String> {
            s.trim().parse().map_err(|_| format!("'{}' is not {what}", s.trim()))
        }
        match self {
            Slot::F32(v) => **v = num(raw, "a number")?,
            Slot::Usize(v) => **v = num(raw, "a nonnegative integer")?,
            Slot::U64(v) => **v = num(raw, "a nonnegative integer")?,
            Slot::Bool(v) => **v = num(raw, "true or false")?,
            Slot::Str(v) => **v = raw.trim().to_string(),
            Slot::Pair(v) => {
                let parts: Vec<&str> = raw.split(',').collect();
                if parts.len() != 2 {
                    return Err(format!("'{raw}' is not a pair 'a, b'"));
                }
                **v = (num(parts[0], "a number")?, num(parts[1], "a number")?);
            }
            Slot::List(v) => {
                **v = raw
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num(s, "a nonnegative integer"))
                    .collect::<std::result::Result<_, _>>()?;
            }
            Slot::Env(v) => **v = raw.trim().parse().map_err(|e: Error| e.to_string())?,
            Slot::Preset(v) => **v = raw.trim().parse().map_err(|e: Error| e.to_string())?,
        }
        Ok(())
    }
}

impl RunConfig {
    fn slots(&mut self) -> Vec<(&'static str, Slot<'_>)> {
        let p = &mut self.env_params;
        let s2 = &mut self.stage2;
        let ev = &mut self.eval;
        vec![
            ("run.env", Slot::Env(&mut self.env)),
            ("run.seed", Slot::U64(&mut self.seed)),
            ("run.out_dir", Slot::Str(&mut self.out_dir)),
            ("pendulum.mass", Slot::F32(&mut p.pendulum.mass)),
            ("pendulum.length", Slot::F32(&mut p.pendulum.length)),
            ("pendulum.gravity", Slot::F32(&mut p.pendulum.gravity)),
            ("pendulum.dt", Slot::F32(&mut p.pendulum.dt)),
            ("pendulum.torque_bounds", Slot::Pair(&mut p.pendulum.torque_bounds)),
            ("pendulum.max_speed", Slot::F32(&mut p.pendulum.max_speed)),
            ("pendulum.kp", Slot::F32(&mut p.pendulum.kp)),
            ("pendulum.kd", Slot::F32(&mut p.pendulum.kd)),
            ("dubins.speed", Slot::F32(&mut p.dubins.speed)),
            ("dubins.dt", Slot::F32(&mut p.dubins.dt)),
            ("dubins.turn_bounds", Slot::Pair(&mut p.dubins.turn_bounds)),
            ("dubins.arena", Slot::F32(&mut p.dubins.arena)),
            ("dubins.goal", Slot::Pair(&mut p.dubins.goal)),
            ("dubins.obstacle_radius", Slot::F32(&mut p.dubins.obstacle_radius)),
            ("dubins.k_theta", Slot::F32(&mut p.dubins.k_theta)),
            ("render.width", Slot::Usize(&mut p.render.width)),
            ("render.height", Slot::Usize(&mut p.render.height)),
            ("encoder.preset", Slot::Preset(&mut self.preset)),
            ("encoder.patch", Slot::Usize(&mut self.encoder.patch)),
            ("encoder.embed_dim", Slot::Usize(&mut self.encoder.embed_dim)),
            ("encoder.depth", Slot::Usize(&mut self.encoder.depth)),
            ("encoder.heads", Slot::Usize(&mut self.encoder.heads)),
            ("encoder.import", Slot::Str(&mut self.encoder_import)),
            ("pretrain.steps", Slot::Usize(&mut self.pretrain.steps)),
            ("pretrain.batch", Slot::Usize(&mut self.pretrain.batch)),
            ("pretrain.lr", Slot::F32(&mut self.pretrain.lr)),
            ("pretrain.pooled_weight", Slot::F32(&mut self.pretrain.pooled_weight)),
            ("world_model.context", Slot::Usize(&mut self.world.context)),
            ("world_model.blocks", Slot::Usize(&mut self.world.blocks)),
            ("world_model.heads", Slot::Usize(&mut self.world.heads)),
            ("world_model.model_dim", Slot::Usize(&mut self.world.model_dim)),
            ("world_model.horizon", Slot::Usize(&mut self.wm_train.horizon)),
            ("world_model.epochs", Slot::Usize(&mut self.wm_train.epochs)),
            ("world_model.batches_per_epoch", Slot::Usize(&mut self.wm_train.batches_per_epoch)),
            ("world_model.batch", Slot::Usize(&mut self.wm_train.batch)),
            ("world_model.lr", Slot::F32(&mut self.wm_train.lr)),
            ("world_model.heldout_windows", Slot::Usize(&mut self.heldout_windows)),
            ("barrier.xi1", Slot::F32(&mut s2.hyper.xi1)),
            ("barrier.xi2", Slot::F32(&mut s2.hyper.xi2)),
            ("barrier.alpha", Slot::F32(&mut s2.hyper.alpha)),
            ("barrier.gamma", Slot::F32(&mut s2.hyper.gamma)),
            ("barrier.hidden", Slot::List(&mut s2.barrier_hidden)),
            ("barrier.lr", Slot::F32(&mut s2.barrier_lr)),
            ("policy.hidden", Slot::List(&mut s2.policy_hidden)),
            ("policy.lr", Slot::F32(&mut s2.policy_lr)),
            ("stage2.batch", Slot::Usize(&mut s2.batch)),
            ("stage2.synthesis_batch", Slot::Usize(&mut s2.synthesis_batch)),
            ("stage2.synthesis_pool", Slot::Usize(&mut s2.synthesis_pool)),
            ("stage2.monitor", Slot::Usize(&mut s2.monitor)),
            ("stage2.max_iters", Slot::Usize(&mut s2.max_iters)),
            ("stage2.window", Slot::Usize(&mut s2.window)),
            ("stage2.tol", Slot::F32(&mut s2.tol)),
            ("stage2.joint_theta", Slot::Bool(&mut s2.joint_theta)),
            ("collect.random_transitions", Slot::Usize(&mut self.collect.random_transitions)),
            ("collect.episode_len", Slot::Usize(&mut self.collect.episode_len)),
            ("collect.labeled_trajectories", Slot::Usize(&mut self.collect.labeled_trajectories)),
            ("collect.labeled_episode_len", Slot::Usize(&mut self.collect.labeled_episode_len)),
            ("eval.decrease_samples", Slot::Usize(&mut ev.decrease_samples)),
            ("eval.rollouts", Slot::Usize(&mut ev.rollouts)),
            ("eval.pendulum_horizon", Slot::Usize(&mut ev.pendulum_horizon)),
            ("eval.dubins_horizon", Slot::Usize(&mut ev.dubins_horizon)),
            ("eval.grid_nx", Slot::Usize(&mut ev.grid_nx)),
            ("eval.grid_ny", Slot::Usize(&mut ev.grid_ny)),
            ("eval.heatmap_theta", Slot::F32(&mut ev.heatmap_theta)),
            ("eval.cell_px", Slot::Usize(&mut ev.cell_px)),
            ("eval.agreement_threshold", Slot::F32(&mut ev.agreement_threshold)),
            ("eval.pca_samples", Slot::Usize(&mut ev.pca_samples)),
        ]
    }

    /// Every key with its default value, in file order.
    pub fn keys() -> Vec<(&'static str, String)> {
        let mut c = RunConfig::default();
        c.slots().into_iter().map(|(k, s)| (k, s.show())).collect()
    }

    pub fn get(&mut self, key: &str) -> Option<String> {
        self.slots().into_iter().find(|(k, _)| *k == key).map(|(_, s)| s.show())
    }

    fn set_raw(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let mut slots = self.slots();
        let slot = slots
            .iter_mut()
            .find(|(k, _)| *k == key)
            .map(|(_, s)| s)
            .ok_or_else(|| format!("unknown key '{key}'"))?;
        slot.set(value).map_err(|e| format!("{key}: {e}"))
    }

    fn apply_preset(&mut self) {
        let mut cfg = EncoderConfig::preset(self.preset);
        cfg.frozen = false;
        self.encoder = cfg;
        self.env_params.render.width = cfg.width;
        self.env_params.render.height = cfg.height;
        self.world.model_dim = cfg.embed_dim;
    }

    /// Applies `(line, key, value)` entries: the preset first, then the rest in order.
    fn apply(&mut self, entries: &[(usize, String, String)]) -> Result<()> {
        let err = |line: usize, msg: String| Error::Config { line, msg };
        for (line, k, v) in entries.iter().filter(|(_, k, _)| k == "encoder.preset") {
            self.set_raw(k, v).map_err(|m| err(*line, m))?;
            self.apply_preset();
        }
        for (line, k, v) in entries.iter().filter(|(_, k, _)| k != "encoder.preset") {
            self.set_raw(k, v).map_err(|m| err(*line, m))?;
        }
        self.encoder.width = self.env_params.render.width;
        self.encoder.height = self.env_params.render.height;
        self.validate().map_err(|e| err(0, e.to_string()))
    }

    /// Parses config text, then applies `overrides` (`key=value`, reported as line 0).
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut entries = Vec::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.split('#').next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            if let Some(name) = s.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| Error::Config {
                    line,
                    msg: format!("malformed section header '{s}'"),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = s.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected 'key = value', got '{s}'"),
            })?;
            let k = k.trim();
            let key = if section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            entries.push((line, key, v.trim().to_string()));
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
                line: 0,
                msg: format!("override '{o}' is not key=value"),
            })?;
            entries.push((0, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = RunConfig::default();
        cfg.apply(&entries)?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config {
                line: 0,
                msg: format!("cannot read {}: {e}", p.display()),
            })?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.env_params.validate()?;
        self.encoder.validate()?;
        self.stage2.hyper.validate()?;
        let positive = [
            ("world_model.context", self.world.context),
            ("world_model.horizon", self.wm_train.horizon),
            ("world_model.heads", self.world.heads),
            ("collect.episode_len", self.collect.episode_len),
            ("collect.labeled_episode_len", self.collect.labeled_episode_len),
            ("stage2.batch", self.stage2.batch),
            ("stage2.synthesis_batch", self.stage2.synthesis_batch),
            ("stage2.window", self.stage2.window),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{k} must be positive")));
            }
        }
        if self.world.model_dim % self.world.heads != 0 {
            return Err(Error::invalid("world_model.model_dim must be divisible by world_model.heads"));
        }
        Ok(())
    }

    /// `run.out_dir`, else `$LCBC_OUT_DIR`, else `out`.
    pub fn out_dir(&self) -> PathBuf {
        if !self.out_dir.is_empty() {
            return PathBuf::from(&self.out_dir);
        }
        match std::env::var(OUT_DIR_ENV) {
            Ok(d) if !d.is_empty() => PathBuf::from(d),
            _ => PathBuf::from("out"),
        }
    }

    pub fn stage1(&self) -> Stage1Config {
        Stage1Config {
            encoder: self.encoder,
            pretrain: self.pretrain,
            world: self.world,
            train: self.wm_train,
            heldout_windows: self.heldout_windows,
        }
    }

    /// Rendered as a config file that parses back to `self`.
    pub fn to_text(&mut self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (k, s) in self.slots() {
            let (sec, name) = k.split_once('.').expect("keys are section.name");
            if sec != section {
                let _ = writeln!(out, "{}[{sec}]", if section.is_empty() { "" } else { "\n" });
                section = sec;
            }
            let _ = writeln!(out, "{name} = {}", s.show());
        }
        out
    }
}

/// Key listing for `--help`.
pub fn help_keys() -> String {
    let mut out = String::from("Config keys (section.key = default):\n");
    for (k, v) in RunConfig::keys() {
        let _ = writeln!(out, "  {k} = {v}");
    }
    out
}
