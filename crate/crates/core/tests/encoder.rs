use std::sync::OnceLock;

use latent_cbc::encoder::{pretrain_encoder, Encoder, EncoderConfig, EncoderPreset, PretrainConfig};
use latent_cbc::envs::{Env, EnvKind, EnvParams, EnvState, PendulumState, SafetyLabel};
use latent_cbc::evalviz::LinearProbe;
use latent_cbc::pipeline::collect_random;
use latent_cbc::rng;

fn env() -> Env {
    Env::new(EnvKind::Pendulum, EnvParams::default())
}

/// Desk encoder pretrained with default settings on random pendulum rollouts.
fn encoder() -> &'static Encoder {
    static ENC: OnceLock<Encoder> = OnceLock::new();
    ENC.get_or_init(|| {
        let ds = collect_random(&env(), 4000, 100, 5).unwrap();
        let frames: Vec<_> = ds.episodes.iter().flat_map(|e| e.records.iter().map(|r| r.frame.clone())).collect();
        let cfg = EncoderConfig::preset(EncoderPreset::Desk);
        let (enc, _) = pretrain_encoder(&frames, &[], cfg, &PretrainConfig::default(), 5).unwrap();
        enc
    })
}

fn pooled(s: EnvState) -> Vec<f32> {
    encoder().encode(&env().render(&s).unwrap()).unwrap().pooled
}

fn pend(theta: f32, theta_dot: f32) -> EnvState {
    EnvState::Pendulum(PendulumState { theta, theta_dot })
}

#[test]
fn pretraining_freezes_the_encoder() {
    assert!(encoder().is_frozen());
}

#[test]
fn upright_and_hanging_latents_differ() {
    let a = pooled(pend(0.0, 0.0));
    let b = pooled(pend(std::f32::consts::PI, 0.0));
    let dot: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let norm = |v: &[f32]| v.iter().map(|x| x * x).sum::<f32>().sqrt();
    let cos = dot / (norm(&a) * norm(&b));
    assert!(cos < 0.99, "cosine {cos}");
}

#[test]
fn one_pixel_change_moves_the_pooled_latent_little() {
    let env = env();
    for (k, theta) in [0.0f32, 1.0, -2.0, 3.0].into_iter().enumerate() {
        let frame = env.render(&pend(theta, 0.0)).unwrap();
        let base = encoder().encode(&frame).unwrap().pooled;
        for px in [0usize, 1000 + k, 2080, 6000 + 7 * k, frame.data.len() - 1] {
            let mut f = frame.clone();
            f.data[px] = if f.data[px] == 255 { 254 } else { f.data[px] + 1 };
            let moved = encoder().encode(&f).unwrap().pooled;
            let dist = base.iter().zip(&moved).map(|(a, b)| (a - b).powi(2)).sum::<f32>().sqrt();
            assert!(dist < 1.0, "pixel {px}: {dist}");
        }
    }
}

#[test]
fn pooled_latents_do_not_collapse() {
    let env = env();
    let mut r = rng::stream(9, "test.variance");
    let lat: Vec<Vec<f32>> = (0..1000).map(|_| pooled(env.random_state(&mut r))).collect();
    let d = lat[0].len();
    let n = lat.len() as f64;
    let mean_var = (0..d)
        .map(|j| {
            let m = lat.iter().map(|z| z[j] as f64).sum::<f64>() / n;
            lat.iter().map(|z| (z[j] as f64 - m).powi(2)).sum::<f64>() / n
        })
        .sum::<f64>()
        / d as f64;
    assert!(mean_var > 1e-4, "mean per-dimension variance {mean_var}");
}

#[test]
fn safe_and_unsafe_frames_are_linearly_separable() {
    let env = env();
    let mut r = rng::stream(21, "test.probe");
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..600 {
        let s = if i % 2 == 0 {
            env.random_safe_state(&mut r)
        } else {
            loop {
                let s = env.random_state(&mut r);
                if env.label(&s) == SafetyLabel::Unsafe {
                    break s;
                }
            }
        };
        x.push(pooled(s).into_iter().map(f64::from).collect::<Vec<_>>());
        y.push(env.label(&s) == SafetyLabel::Safe);
    }
    let probe = LinearProbe::fit(&x[..400], &y[..400]).unwrap();
    let acc = probe.accuracy(&x[400..], &y[400..]).unwrap();
    assert!(acc >= 0.9, "held-out probe accuracy {acc}");
}
