use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latent_cbc::config::{help_keys, RunConfig};
use latent_cbc::envs::{Env, EnvState, SafetyLabel};
use latent_cbc::evalviz::{
    decrease_samples, export_heatmap, heatmap_agreement, heatmap_ppm, image_policy, label_name, linear_probe,
    outside_starts, pca_projection, rollout_safety, safe_starts, verify_decrease, verify_signs, write_heatmap_csv,
    write_pca_csv, GridSpec, RolloutReport, VerificationReport,
};
use latent_cbc::pipeline::{
    collect_labeled, collect_random, load_stage1, load_stage2, save_stage1, save_stage2, split_episodes,
    train_stage1, train_stage2, LabeledSets, TrainReport, TransitionDataset,
};
use latent_cbc::Error;

#[derive(Parser)]
#[command(name = "lcbc", about = "Latent control barrier certificates from pixels", after_help = help_keys())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Config file (`key = value` lines under `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `run.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `run.env` (pendulum | dubins).
    #[arg(long, global = true)]
    env: Option<String>,
    /// `section.key=value`, repeatable; applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Random-action transitions for world-model training.
    #[command(after_help = help_keys())]
    CollectRandom(Common),
    /// Labeled reference-policy trajectories.
    #[command(after_help = help_keys())]
    CollectLabeled(Common),
    /// Stage 1: encoder pretraining (or import) and world-model training.
    #[command(after_help = help_keys())]
    TrainWm(Common),
    /// Stage 2: barrier and controller training.
    #[command(after_help = help_keys())]
    TrainSafe(Common),
    /// Writes the verification report.
    #[command(after_help = help_keys())]
    Eval(Common),
    /// Barrier heatmap over the 2-D state grid.
    #[command(after_help = help_keys())]
    VizHeatmap(Common),
    /// PCA projection of held-out pooled latents.
    #[command(after_help = help_keys())]
    VizPca(Common),
    /// Closed-loop rollouts of the trained and reference controllers.
    #[command(after_help = help_keys())]
    Rollout(Common),
}

type Res<T> = std::result::Result<T, Failure>;

/// An error plus the process exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } => 1,
            Error::Missing(_) => 2,
            Error::Numeric(_) | Error::NonFinite { .. } => 3,
            _ => 1,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn config(c: &Common) -> Res<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(s) = c.seed {
        overrides.push(format!("run.seed={s}"));
    }
    if let Some(o) = &c.out {
        overrides.push(format!("run.out_dir={}", o.display()));
    }
    if let Some(e) = &c.env {
        overrides.push(format!("run.env={e}"));
    }
    overrides.extend(c.set.iter().cloned());
    RunConfig::load(c.config.as_deref(), &overrides).map_err(|e| Failure {
        code: 1,
        msg: e.to_string(),
    })
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn new(cfg: &RunConfig) -> Self {
        Layout {
            root: cfg.out_dir().join(cfg.env.name()),
        }
    }
    fn random(&self) -> PathBuf {
        self.root.join("random")
    }
    fn labeled(&self) -> PathBuf {
        self.root.join("labeled")
    }
    fn stage1(&self) -> PathBuf {
        self.root.join("stage1")
    }
    fn stage2(&self) -> PathBuf {
        self.root.join("stage2")
    }
    fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    fn viz(&self) -> PathBuf {
        self.root.join("viz")
    }
}

fn write_report(report: &TrainReport, dir: &Path) -> Res<()> {
    report.write_csv(&dir.join("train_report.csv"))?;
    fs::write(
        dir.join("timing.txt"),
        format!("seed = {}\nwall_clock_secs = {:.3}\n", report.seed, report.wall_clock_secs),
    )?;
    Ok(())
}

fn labeled(l: &Layout) -> Res<(TransitionDataset, LabeledSets)> {
    let (ds, _) = TransitionDataset::load(&l.labeled())?;
    let sets = LabeledSets::build(&ds);
    Ok((ds, sets))
}

fn held_out(ds: &TransitionDataset, sets: &LabeledSets) -> (Vec<usize>, LabeledSets) {
    let (_, ho) = split_episodes(ds.episodes.len());
    let s = sets.restrict(&ho);
    (ho, s)
}

fn horizon(cfg: &RunConfig) -> usize {
    match cfg.env {
        latent_cbc::envs::EnvKind::Pendulum => cfg.eval.pendulum_horizon,
        latent_cbc::envs::EnvKind::Dubins => cfg.eval.dubins_horizon,
    }
}

fn write_trajectories(path: &Path, runs: &[(&str, &RolloutReport)], env: &Env) -> Res<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    let dim = env.kind.state_dim();
    let mut header = vec!["controller".to_string(), "run".into(), "step".into()];
    header.extend((0..dim).map(|i| format!("s{i}")));
    header.push("label".into());
    w.write_record(&header).map_err(Error::from)?;
    for (name, rep) in runs {
        for (i, traj) in rep.trajectories.iter().enumerate() {
            for (t, s) in traj.iter().enumerate() {
                let mut row = vec![name.to_string(), i.to_string(), t.to_string()];
                row.extend(s.to_vec().iter().map(|v| v.to_string()));
                row.push(label_name(env.label(s)).into());
                w.write_record(&row).map_err(Error::from)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn run(cmd: Command) -> Res<()> {
    let common = match &cmd {
        Command::CollectRandom(c)
        | Command::CollectLabeled(c)
        | Command::TrainWm(c)
        | Command::TrainSafe(c)
        | Command::Eval(c)
        | Command::VizHeatmap(c)
        | Command::VizPca(c)
        | Command::Rollout(c) => c.clone(),
    };
    let cfg = config(&common)?;
    let env = Env::new(cfg.env, cfg.env_params);
    let l = Layout::new(&cfg);
    let seed = cfg.seed;
    match cmd {
        Command::CollectRandom(_) => {
            let ds = collect_random(&env, cfg.collect.random_transitions, cfg.collect.episode_len, seed)?;
            let m = ds.save(&l.random())?;
            println!("{} transitions -> {} (manifest {})", m.transitions, l.random().display(), m.hash());
        }
        Command::CollectLabeled(_) => {
            let (ds, sets) = collect_labeled(
                &env,
                cfg.collect.labeled_trajectories,
                cfg.collect.labeled_episode_len,
                seed,
            )?;
            let m = ds.save(&l.labeled())?;
            println!(
                "{} trajectories, {} safe / {} unsafe / {} total records -> {} (manifest {})",
                m.episodes,
                sets.safe.len(),
                sets.unsafe_.len(),
                sets.all.len(),
                l.labeled().display(),
                m.hash()
            );
        }
        Command::TrainWm(_) => {
            let (ds, _) = TransitionDataset::load(&l.random())?;
            let import = (!cfg.encoder_import.is_empty()).then(|| PathBuf::from(&cfg.encoder_import));
            let s1 = train_stage1(&ds, &env, &cfg.stage1(), import.as_deref(), seed)?;
            save_stage1(&l.stage1(), &s1)?;
            write_report(&s1.report, &l.stage1())?;
            let last = s1.report.rows.last();
            println!(
                "stage 1 done: {} epochs, final L_pred {:?}, held-out {:?} -> {}",
                s1.report.rows.len(),
                last.and_then(|r| r.l_pred),
                last.and_then(|r| r.l_pred_heldout),
                l.stage1().display()
            );
        }
        Command::TrainSafe(_) => {
            let (enc, model) = load_stage1(&l.stage1(), &env, cfg.encoder, cfg.world)?;
            let (ds, sets) = labeled(&l)?;
            let (tr, _) = split_episodes(ds.episodes.len());
            let s2 = train_stage2(&ds, &sets.restrict(&tr), &enc, &model, &cfg.stage2, seed)?;
            save_stage2(&l.stage2(), &s2)?;
            write_report(&s2.report, &l.stage2())?;
            println!(
                "stage 2 done: {} iterations, barrier frozen at {:?} -> {}",
                s2.report.rows.len(),
                s2.frozen_at,
                l.stage2().display()
            );
        }
        Command::Eval(_) => {
            let (enc, model) = load_stage1(&l.stage1(), &env, cfg.encoder, cfg.world)?;
            let (b, pi) = load_stage2(&l.stage2(), &env, cfg.encoder.embed_dim, &cfg.stage2)?;
            let (ds, sets) = labeled(&l)?;
            let (ho, hs) = held_out(&ds, &sets);
            let signs = verify_signs(&b, &enc, &ds, &hs)?;
            let samples = decrease_samples(&enc, &ds, &ho, cfg.world.context, cfg.eval.decrease_samples, seed)?;
            let decrease = verify_decrease(&b, &pi, &model, &enc, &env, &samples)?;
            if decrease.agreement < cfg.eval.agreement_threshold as f64 {
                log::warn!(
                    "latent and ground-truth decrease checks agree on only {:.3} of samples",
                    decrease.agreement
                );
            }
            let h = horizon(&cfg);
            let starts = safe_starts(&env, cfg.eval.rollouts, seed);
            let ours = rollout_safety(&env, &starts, h, image_policy(&pi, &enc, &env))?;
            let reference = rollout_safety(&env, &starts, h, |s| Ok(env.reference_action(s)))?;
            let outside = outside_starts(&env, cfg.eval.rollouts, seed);
            let attract = rollout_safety(&env, &outside, h, image_policy(&pi, &enc, &env))?;
            let attract_ref = rollout_safety(&env, &outside, h, |s| Ok(env.reference_action(s)))?;
            let report = VerificationReport {
                env: cfg.env.to_string(),
                seed,
                signs,
                decrease,
                rollout_safety: ours.safety_rate,
                rollout_reference: reference.safety_rate,
                n_rollouts: starts.len(),
                rollout_horizon: h,
                attraction: attract.final_safe_rate,
                attraction_reference: attract_ref.final_safe_rate,
            };
            fs::create_dir_all(l.eval())?;
            let path = l.eval().join("verification.json");
            report.write(&path)?;
            println!("{}", report.to_json()?);
            println!("-> {}", path.display());
        }
        Command::VizHeatmap(_) => {
            let (enc, _) = load_stage1(&l.stage1(), &env, cfg.encoder, cfg.world)?;
            let (b, _) = load_stage2(&l.stage2(), &env, cfg.encoder.embed_dim, &cfg.stage2)?;
            let grid = GridSpec {
                nx: cfg.eval.grid_nx,
                ny: cfg.eval.grid_ny,
                theta: cfg.eval.heatmap_theta,
            };
            let cells = export_heatmap(&b, &enc, &env, &grid)?;
            fs::create_dir_all(l.viz())?;
            write_heatmap_csv(&cells, &l.viz().join("heatmap.csv"))?;
            heatmap_ppm(&cells, &grid, cfg.eval.cell_px.max(1))?.write_ppm(&l.viz().join("heatmap.ppm"))?;
            println!(
                "{} cells, sign agreement on labeled cells {:.4} -> {}",
                cells.len(),
                heatmap_agreement(&cells)?,
                l.viz().display()
            );
        }
        Command::VizPca(_) => {
            let (enc, _) = load_stage1(&l.stage1(), &env, cfg.encoder, cfg.world)?;
            let (ds, sets) = labeled(&l)?;
            let (_, hs) = held_out(&ds, &sets);
            let mut ids: Vec<_> = hs.safe.iter().chain(&hs.unsafe_).copied().collect();
            ids.sort();
            let keep = cfg.eval.pca_samples.max(3);
            if ids.len() > keep {
                ids = (0..keep).map(|i| ids[i * ids.len() / keep]).collect();
            }
            let mut z = Vec::with_capacity(ids.len());
            let mut labels = Vec::with_capacity(ids.len());
            for id in &ids {
                let r = ds.record(*id);
                z.push(enc.encode(&r.frame)?.pooled);
                labels.push(env.label(&r.state));
            }
            let p = pca_projection(&z)?;
            let names: Vec<&str> = labels.iter().map(|l| label_name(*l)).collect();
            fs::create_dir_all(l.viz())?;
            write_pca_csv(&p, &names, &l.viz().join("pca.csv"))?;
            let y: Vec<bool> = labels.iter().map(|l| *l == SafetyLabel::Safe).collect();
            println!(
                "{} samples, linear separability of safe vs unsafe in 2-D {:.4} -> {}",
                ids.len(),
                linear_probe(&p.coords, &y)?,
                l.viz().display()
            );
        }
        Command::Rollout(_) => {
            let (enc, _) = load_stage1(&l.stage1(), &env, cfg.encoder, cfg.world)?;
            let (_, pi) = load_stage2(&l.stage2(), &env, cfg.encoder.embed_dim, &cfg.stage2)?;
            let h = horizon(&cfg);
            let starts: Vec<EnvState> = safe_starts(&env, cfg.eval.rollouts, seed);
            let ours = rollout_safety(&env, &starts, h, image_policy(&pi, &enc, &env))?;
            let reference = rollout_safety(&env, &starts, h, |s| Ok(env.reference_action(s)))?;
            fs::create_dir_all(l.viz())?;
            let path = l.viz().join("trajectories.csv");
            write_trajectories(&path, &[("policy", &ours), ("reference", &reference)], &env)?;
            println!(
                "safety rate {:.3} (reference {:.3}) over {} rollouts of {} steps -> {}",
                ours.safety_rate,
                reference.safety_rate,
                starts.len(),
                h,
                path.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
