use latent_cbc::certificate::{barrier_loss_on, lie_loss_on, BarrierHyper, BarrierNet};
use latent_cbc::controller::{synthesis_loss_on, PolicyNet};
use latent_cbc::envs::{dubins, pendulum, DubinsParams, DubinsState, Env, EnvKind, EnvParams, EnvState, PendulumState, SafetyLabel};
use latent_cbc::ndmath::{AdamConfig, AdamState, Graph, Tensor};
use latent_cbc::nn;
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-30.0f32..30.0, r * c).prop_map(move |d| (r, c, d))
    })
}

fn column(v: &[f32]) -> Tensor {
    Tensor::matrix(v.len(), 1, v.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions((r, c, d) in matrix(6, 8)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(r, c, d).unwrap());
        let y = g.softmax(x, None).unwrap();
        let t = g.value(y);
        for row in 0..r {
            let p = t.row(row);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn ops_are_bitwise_deterministic((r, c, d) in matrix(5, 5)) {
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(r, c, d.clone()).unwrap());
            let gm = g.constant(Tensor::full(&[c], 1.3));
            let bt = g.constant(Tensor::full(&[c], -0.2));
            let xt = g.transpose(x).unwrap();
            let m = g.matmul(x, xt).unwrap();
            let s = g.softmax(m, None).unwrap();
            let l = g.layer_norm(x, gm, bt).unwrap();
            let t = g.tanh(l).unwrap();
            (g.value(s).data().to_vec(), g.value(t).data().to_vec())
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn dubins_straight_line_keeps_its_offset(x in -1.0f32..1.0, y in -1.0f32..1.0, th in -3.1f32..3.1) {
        let p = DubinsParams::default();
        let c0 = y * th.cos() - x * th.sin();
        let mut s = DubinsState { x, y, theta: th };
        for _ in 0..4 {
            s = dubins::step(s, 0.0, &p).unwrap();
            prop_assert!((s.y * th.cos() - s.x * th.sin() - c0).abs() < 1e-5);
        }
    }

    #[test]
    fn labels_are_pure_and_disjoint(th in -3.2f32..3.2, w in -3.5f32..3.5, x in -1.5f32..1.5, y in -1.5f32..1.5) {
        let ps = PendulumState { theta: th, theta_dot: w };
        prop_assert_eq!(pendulum::label(ps), pendulum::label(ps));
        let in_safe_box = th.abs() <= std::f32::consts::PI / 12.0 && w.abs() <= 0.25;
        prop_assert_eq!(pendulum::label(ps) == SafetyLabel::Safe, in_safe_box);
        let ds = DubinsState { x, y, theta: 0.0 };
        let in_obstacle = x.abs() <= 0.7 && y.abs() <= 0.7;
        prop_assert_eq!(dubins::label(ds) == SafetyLabel::Unsafe, in_obstacle);
        prop_assert!(!(dubins::label(ds) == SafetyLabel::Safe && in_obstacle));
    }

    #[test]
    fn rendering_is_a_pure_function(th in -3.1f32..3.1, x in -1.4f32..1.4, y in -1.4f32..1.4) {
        for (kind, s) in [
            (EnvKind::Pendulum, EnvState::Pendulum(PendulumState { theta: th, theta_dot: 0.0 })),
            (EnvKind::Dubins, EnvState::Dubins(DubinsState { x, y, theta: th })),
        ] {
            let env = Env::new(kind, EnvParams::default());
            prop_assert_eq!(env.render(&s).unwrap().data, env.render(&s).unwrap().data);
        }
    }

    #[test]
    fn correctly_signed_points_add_nothing_without_margin(
        safe in proptest::collection::vec(-2.0f32..2.0, 1..6),
        unsafe_ in proptest::collection::vec(-2.0f32..2.0, 1..6),
        extra_safe in proptest::collection::vec(-3.0f32..-0.001, 0..6),
        extra_unsafe in proptest::collection::vec(0.001f32..3.0, 0..6),
    ) {
        let h = BarrierHyper { gamma: 0.0, ..BarrierHyper::default() };
        let eval = |s: &[f32], u: &[f32]| {
            let mut g = Graph::new();
            let (sv, uv) = (g.constant(column(s)), g.constant(column(u)));
            let l = barrier_loss_on(&mut g, sv, uv, &h).unwrap();
            g.value(l).item().unwrap()
        };
        let base = eval(&safe, &unsafe_);
        let grown = eval(&[safe.clone(), extra_safe].concat(), &[unsafe_.clone(), extra_unsafe].concat());
        prop_assert_eq!(base, grown);
    }

    #[test]
    fn lie_loss_vanishes_for_a_constant_barrier(k in -3.0f32..3.0, n in 1usize..8, m in 1usize..8) {
        let h = BarrierHyper { alpha: 1.0, ..BarrierHyper::default() };
        let mut g = Graph::new();
        let s = (g.constant(column(&vec![k; n])), g.constant(column(&vec![k; n])));
        let u = (g.constant(column(&vec![k; m])), g.constant(column(&vec![k; m])));
        let l = lie_loss_on(&mut g, Some(s), Some(u), &h).unwrap();
        prop_assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn synthesis_hinge_is_nonnegative_and_zero_iff_decreasing(
        pairs in proptest::collection::vec((-2.0f32..2.0, -2.0f32..2.0), 1..10)
    ) {
        let next: Vec<f32> = pairs.iter().map(|p| p.0).collect();
        let now: Vec<f32> = pairs.iter().map(|p| p.1).collect();
        let mut g = Graph::new();
        let (a, b) = (g.constant(column(&next)), g.constant(column(&now)));
        let l = synthesis_loss_on(&mut g, a, b).unwrap();
        let v = g.value(l).item().unwrap();
        prop_assert!(v >= 0.0);
        prop_assert_eq!(v == 0.0, pairs.iter().all(|p| p.0 <= p.1));
    }

    #[test]
    fn actions_stay_in_bounds_for_extreme_latents(
        z in proptest::collection::vec(prop_oneof![-1e6f32..1e6, Just(0.0f32), -1.0f32..1.0], 4),
        p in -1e4f32..1e4,
        seed in 0u64..4,
    ) {
        let pi = PolicyNet::new(4, 1, &[8, 8], &[(-6.0, 6.0)], seed).unwrap();
        let a = pi.act(&z, &[p]).unwrap()[0];
        prop_assert!((-6.0..=6.0).contains(&a), "{a}");
    }
}

#[test]
fn frozen_barrier_and_model_are_untouched_by_a_policy_step() {
    use latent_cbc::controller::{synthesis_graph, SynthesisBinding, SynthesisSample};
    use latent_cbc::encoder::pool;
    use latent_cbc::world_model::{ContextWindow, LatentShape, TransitionModel, WorldModelConfig};
    use latent_cbc::encoder::Latent;

    let shape = LatentShape {
        patches: 4,
        embed_dim: 6,
        action_dim: 1,
        proprio_dim: 1,
        action_bounds: (-2.0, 2.0),
        proprio_scale: 1.0,
    };
    let cfg = WorldModelConfig { context: 1, blocks: 1, heads: 2, model_dim: 8 };
    let m = TransitionModel::new(cfg, shape, 3).unwrap();
    let b = BarrierNet::new(6, &[8], 3);
    let mut pi = PolicyNet::new(6, 1, &[8], &[(-2.0, 2.0)], 3).unwrap();
    let tok = |k: f32| Latent::from_tokens(Tensor::matrix(4, 6, (0..24).map(|i| (i as f32 * 0.37 + k).sin()).collect()).unwrap());
    let ctx = ContextWindow {
        latents: vec![tok(0.0), tok(1.0)],
        actions: vec![vec![0.5], vec![-0.5]],
        proprios: vec![vec![0.1], vec![0.2]],
    };
    let cache = m.prefix_cache(&ctx).unwrap();
    let pooled = pool(&ctx.latents[1].tokens);
    let sample = SynthesisSample { prefix: &cache, tokens: &ctx.latents[1].tokens, pooled: &pooled, proprio: &ctx.proprios[1] };
    let (b0, m0) = (b.params().flat(), m.params().flat());

    let mut adam = AdamState::new(AdamConfig::default(), pi.params().tensors());
    let mut g = Graph::new();
    let bb = b.bind(&mut g, false);
    let pb = pi.bind(&mut g, true);
    let mb = m.bind(&mut g, false);
    let nets = SynthesisBinding { barrier: (&b, &bb), policy: (&pi, &pb), model: (&m, &mb) };
    let l = synthesis_graph(&mut g, &nets, &[sample]).unwrap();
    let mut grads = nn::zero_grads(pi.params());
    if let Ok(gr) = g.backward(l) {
        grads = pb.grads(&gr, pi.params());
        assert!(bb.vars().iter().chain(mb.vars()).all(|v| gr.get(*v).is_none()));
    }
    adam.step(pi.params_mut().tensors_mut(), &grads).unwrap();

    assert_eq!(b.params().flat(), b0);
    assert_eq!(m.params().flat(), m0);
}
