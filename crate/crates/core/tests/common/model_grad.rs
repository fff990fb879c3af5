//! Full-network parameter gradients (barrier, policy, transition model)
//! against central differences of the networks' own inference paths.

use latent_cbc::certificate::{BarrierNet, Standardizer};
use latent_cbc::controller::{synthesis_graph, synthesis_loss, PolicyNet, SynthesisBinding, SynthesisSample};
use latent_cbc::encoder::{pool, Latent};
use latent_cbc::ndmath::{Graph, Tensor};
use latent_cbc::nn::ParamStore;
use latent_cbc::world_model::{ContextWindow, LatentShape, StepInput, TransitionModel, WorldModelConfig};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::rel_err;

const H: f32 = 3e-3;

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f32) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-scale..scale)).collect()).collect()
}

fn refs(v: &[Vec<f32>]) -> Vec<&[f32]> {
    v.iter().map(Vec::as_slice).collect()
}

fn flatten(g: &[Vec<f32>]) -> Vec<f64> {
    g.iter().flatten().map(|&x| x as f64).collect()
}

/// Central differences over every scalar of the store reached by `store`.
fn numeric<M>(m: &mut M, store: fn(&mut M) -> &mut ParamStore, f: impl Fn(&M) -> f64) -> Vec<f64> {
    let shapes: Vec<usize> = store(m).tensors().iter().map(|t| t.numel()).collect();
    let mut out = Vec::new();
    for (i, n) in shapes.into_iter().enumerate() {
        for j in 0..n {
            let x = store(m).tensors()[i].data()[j];
            let (xp, xm) = (x + H * x.abs().max(1.0), x - H * x.abs().max(1.0));
            store(m).tensors_mut()[i].data_mut()[j] = xp;
            let fp = f(m);
            store(m).tensors_mut()[i].data_mut()[j] = xm;
            let fm = f(m);
            store(m).tensors_mut()[i].data_mut()[j] = x;
            out.push((fp - fm) / (xp as f64 - xm as f64));
        }
    }
    out
}

/// Richardson-extrapolated central differences along the gradient and along
/// random unit directions: `max |g·v − D_v| / ‖g‖`. Used where per-coordinate
/// differences drown in f32 round-off of a large loss.
fn directional<M>(m: &mut M, store: fn(&mut M) -> &mut ParamStore, g: &[f64], seed: u64, f: impl Fn(&M) -> f64) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1);
    let mut dirs = vec![g.iter().map(|x| x / norm).collect::<Vec<f64>>()];
    for _ in 0..4 {
        let v: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        dirs.push(v.into_iter().map(|x| x / n).collect());
    }
    let base: Vec<f32> = store(m).flat();
    let h = 1e-2;
    let shifted = |m: &mut M, v: &[f64], step: f64| -> f64 {
        let mut k = 0;
        for t in store(m).tensors_mut() {
            for x in t.data_mut() {
                *x = (base[k] as f64 + step * v[k]) as f32;
                k += 1;
            }
        }
        f(m)
    };
    let mut worst = 0.0f64;
    for v in &dirs {
        let d1 = (shifted(m, v, h) - shifted(m, v, -h)) / (2.0 * h);
        let d2 = (shifted(m, v, 2.0 * h) - shifted(m, v, -2.0 * h)) / (4.0 * h);
        let fd = (4.0 * d1 - d2) / 3.0;
        let exact: f64 = g.iter().zip(v).map(|(a, b)| a * b).sum();
        worst = worst.max((exact - fd).abs() / norm);
    }
    let mut k = 0;
    for t in store(m).tensors_mut() {
        for x in t.data_mut() {
            *x = base[k];
            k += 1;
        }
    }
    worst
}

fn weighted(values: impl IntoIterator<Item = f32>, w: &[f64]) -> f64 {
    values.into_iter().zip(w).map(|(v, w)| v as f64 * w).sum()
}

pub fn barrier(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = BarrierNet::new(5, &[8, 8], seed);
    b.set_standardizer(Standardizer::fit(&rows(&mut rng, 32, 5, 2.0)).unwrap()).unwrap();
    let z = rows(&mut rng, 6, 5, 1.5);
    let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut g = Graph::new();
    let p = b.bind(&mut g, true);
    let zv = g.constant(Tensor::from_rows(&z).unwrap());
    let out = b.forward(&mut g, &p, zv).unwrap();
    let wv = g.constant(Tensor::matrix(6, 1, w.iter().map(|&x| x as f32).collect()).unwrap());
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic = flatten(&p.grads(&grads, b.params()));

    let num = numeric(&mut b, BarrierNet::params_mut, |b| weighted(b.values(&refs(&z)).unwrap(), &w));
    rel_err(&analytic, &num)
}

pub fn policy(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pi = PolicyNet::new(5, 1, &[8, 8], &[(-6.0, 6.0)], seed).unwrap();
    pi.set_standardizer(Standardizer::fit(&rows(&mut rng, 32, 6, 2.0)).unwrap()).unwrap();
    let z = rows(&mut rng, 6, 5, 1.5);
    let pr = rows(&mut rng, 6, 1, 3.0);
    let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut g = Graph::new();
    let p = pi.bind(&mut g, true);
    let zv = g.constant(Tensor::from_rows(&z).unwrap());
    let pv = g.constant(Tensor::from_rows(&pr).unwrap());
    let out = pi.forward(&mut g, &p, zv, pv).unwrap();
    let wv = g.constant(Tensor::matrix(6, 1, w.iter().map(|&x| x as f32).collect()).unwrap());
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic = flatten(&p.grads(&grads, pi.params()));

    let num = numeric(&mut pi, PolicyNet::params_mut, |pi| {
        weighted(pi.act_batch(&refs(&z), &refs(&pr)).unwrap().into_iter().flatten(), &w)
    });
    rel_err(&analytic, &num)
}

pub fn tiny_shape() -> LatentShape {
    LatentShape {
        patches: 4,
        embed_dim: 6,
        action_dim: 1,
        proprio_dim: 1,
        action_bounds: (-2.0, 2.0),
        proprio_scale: 3.0,
    }
}

pub fn tiny_model(seed: u64) -> TransitionModel {
    let cfg = WorldModelConfig {
        context: 2,
        blocks: 1,
        heads: 2,
        model_dim: 8,
    };
    let mut m = TransitionModel::new(cfg, tiny_shape(), seed).unwrap();
    // The residual head starts at zero; give it weight so every parameter matters.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in m.params().names().to_vec().iter().zip(0..) {
        if name.starts_with("wm.head") || name.starts_with("wm.step_embed") {
            for v in m.params_mut().tensors_mut()[t].data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    m
}

pub fn tiny_context(rng: &mut ChaCha8Rng, m: &TransitionModel) -> ContextWindow {
    let s = *m.shape();
    let n = m.window_len();
    ContextWindow {
        latents: (0..n)
            .map(|_| {
                let data = (0..s.patches * s.embed_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Latent::from_tokens(Tensor::matrix(s.patches, s.embed_dim, data).unwrap())
            })
            .collect(),
        actions: (0..n).map(|_| vec![rng.gen_range(-2.0..2.0)]).collect(),
        proprios: (0..n).map(|_| vec![rng.gen_range(-3.0..3.0)]).collect(),
    }
}

pub fn world_model(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = tiny_model(seed);
    let ctx = tiny_context(&mut rng, &m);
    let s = *m.shape();
    let w: Vec<f64> = (0..s.patches * s.embed_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut g = Graph::new();
    let p = m.bind(&mut g, true);
    let steps: Vec<StepInput> = ctx
        .latents
        .iter()
        .zip(&ctx.actions)
        .zip(&ctx.proprios)
        .map(|((z, a), pr)| StepInput::constant(&mut g, &z.tokens, a, pr))
        .collect();
    let out = m.forward_window(&mut g, &p, &steps).unwrap();
    let wv = g.constant(Tensor::matrix(s.patches, s.embed_dim, w.iter().map(|&x| x as f32).collect()).unwrap());
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic = flatten(&p.grads(&grads, m.params()));

    let num = numeric(&mut m, TransitionModel::params_mut, |m| {
        weighted(m.predict_next(&ctx).unwrap().tokens.data().iter().copied(), &w)
    });
    rel_err(&analytic, &num)
}

/// Synthesis-loss gradient with respect to the policy only.
pub fn synthesis(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = tiny_model(seed);
    let s = *m.shape();
    let b = BarrierNet::new(s.embed_dim, &[8], seed);
    let mut pi = PolicyNet::new(s.embed_dim, 1, &[8], &[s.action_bounds], seed).unwrap();
    let ctxs: Vec<ContextWindow> = (0..4).map(|_| tiny_context(&mut rng, &m)).collect();
    let caches: Vec<_> = ctxs.iter().map(|c| m.prefix_cache(c).unwrap()).collect();
    let pooled: Vec<Vec<f32>> = ctxs.iter().map(|c| pool(&c.latents.last().unwrap().tokens)).collect();
    let batch: Vec<SynthesisSample> = ctxs
        .iter()
        .zip(&caches)
        .zip(&pooled)
        .map(|((c, k), z)| SynthesisSample {
            prefix: k,
            tokens: &c.latents.last().unwrap().tokens,
            pooled: z,
            proprio: c.proprios.last().unwrap(),
        })
        .collect();

    let mut g = Graph::new();
    let bb = b.bind(&mut g, false);
    let pb = pi.bind(&mut g, true);
    let mb = m.bind(&mut g, false);
    let nets = SynthesisBinding {
        barrier: (&b, &bb),
        policy: (&pi, &pb),
        model: (&m, &mb),
    };
    let loss = synthesis_graph(&mut g, &nets, &batch).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic = flatten(&pb.grads(&grads, pi.params()));

    directional(&mut pi, PolicyNet::params_mut, &analytic, seed, |pi| synthesis_loss(&b, pi, &m, &batch).unwrap() as f64)
}
