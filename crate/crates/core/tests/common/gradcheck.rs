//! Reverse-mode gradients against central differences of independent f64 reference ops.

use latent_cbc::ndmath::{Graph, OpKind, Tensor, Var};
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;

pub struct Input {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn input(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Input {
    let n = shape.iter().product::<usize>().max(1);
    Input {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    }
}

/// Entries pushed at least `gap` away from zero, for ops with a kink there.
pub fn input_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Input {
    let mut x = input(rng, shape, -2.0, 2.0);
    for v in &mut x.data {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap };
        }
    }
    x
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let den = l2(a).max(l2(b));
    if den == 0.0 {
        0.0
    } else {
        l2(&diff) / den
    }
}

/// Checks one op instance. The scalar objective is `Σ wᵢ·outᵢ` with random
/// weights `w`; `reference` recomputes the op output in f64. Returns the
/// worst relative error over the forward value and every input's gradient.
pub fn check(
    rng: &mut ChaCha8Rng,
    inputs: &[Input],
    build: impl Fn(&mut Graph, &[Var]) -> latent_cbc::Result<Var>,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| {
            let data = i.data.iter().map(|&v| v as f32).collect();
            g.leaf(Tensor::new(i.shape.clone(), data).unwrap().with_requires_grad(true))
        })
        .collect();
    let out = build(&mut g, &vars).unwrap();
    let out_shape = g.value(out).shape().to_vec();
    let out_val: Vec<f64> = g.value(out).data().iter().map(|&v| v as f64).collect();
    let w: Vec<f64> = (0..out_val.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wv = g.constant(Tensor::new(out_shape, w.iter().map(|&v| v as f32).collect()).unwrap());
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();

    // Inputs as seen by the graph (rounded to f32), so both sides agree on the point.
    let xs: Vec<Vec<f64>> = inputs
        .iter()
        .map(|i| i.data.iter().map(|&v| v as f32 as f64).collect())
        .collect();
    let objective = |xs: &[Vec<f64>]| -> f64 { reference(xs).iter().zip(&w).map(|(o, w)| o * w).sum() };

    let mut worst = rel_err(&out_val, &reference(&xs));
    for (k, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*v) {
            Some(t) => t.data().iter().map(|&x| x as f64).collect(),
            None => vec![0.0; xs[k].len()],
        };
        let mut numeric = vec![0.0; xs[k].len()];
        for j in 0..xs[k].len() {
            let h = 1e-6 * xs[k][j].abs().max(1.0);
            let mut plus = xs.to_vec();
            plus[k][j] += h;
            let mut minus = xs.to_vec();
            minus[k][j] -= h;
            numeric[j] = (objective(&plus) - objective(&minus)) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

// Reference ops, row-major.

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn broadcast(a: &[f64], b: &[f64], cols: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = if b.len() == a.len() {
                b[i]
            } else if b.len() == 1 {
                b[0]
            } else {
                b[i % cols]
            };
            f(x, y)
        })
        .collect()
}

pub fn softmax(a: &[f64], cols: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..a.len() / cols {
        let ok = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
        let mx = (0..cols).filter(|&j| ok(j)).map(|j| a[r * cols + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..cols).filter(|&j| ok(j)).map(|j| (a[r * cols + j] - mx).exp()).sum();
        for j in (0..cols).filter(|&j| ok(j)) {
            out[r * cols + j] = (a[r * cols + j] - mx).exp() / z;
        }
    }
    out
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / cols {
        let row = &x[r * cols..(r + 1) * cols];
        let mu = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + 1e-5).sqrt();
        for j in 0..cols {
            out[r * cols + j] = (row[j] - mu) * rs * gamma[j] + beta[j];
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One named op family: draws a random instance and returns its worst relative error.
pub struct OpCase {
    pub name: &'static str,
    pub run: fn(&mut ChaCha8Rng) -> f64,
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..6), rng.gen_range(1..6))
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            run: |rng| {
                let (m, k) = dims(rng);
                let n = rng.gen_range(1..6);
                let a = input(rng, &[m, k], -1.0, 1.0);
                let b = input(rng, &[k, n], -1.0, 1.0);
                check(rng, &[a, b], |g, v| g.forward_op(OpKind::MatMul, v), |x| matmul(&x[0], &x[1], m, k, n))
            },
        },
        OpCase {
            name: "matmul_nt",
            run: |rng| {
                let (m, k) = dims(rng);
                let n = rng.gen_range(1..6);
                let a = input(rng, &[m, k], -1.0, 1.0);
                let b = input(rng, &[n, k], -1.0, 1.0);
                check(rng, &[a, b], |g, v| g.matmul_nt(v[0], v[1]), |x| matmul(&x[0], &transpose(&x[1], n, k), m, k, n))
            },
        },
        OpCase {
            name: "add",
            run: |rng| {
                let (r, c) = dims(rng);
                let bshape = [vec![r, c], vec![1, c], vec![]][rng.gen_range(0..3)].clone();
                let a = input(rng, &[r, c], -1.0, 1.0);
                let b = input(rng, &bshape, -1.0, 1.0);
                check(rng, &[a, b], |g, v| g.forward_op(OpKind::Add, v), |x| broadcast(&x[0], &x[1], c, |p, q| p + q))
            },
        },
        OpCase {
            name: "sub",
            run: |rng| {
                let (r, c) = dims(rng);
                let bshape = [vec![r, c], vec![1, c], vec![]][rng.gen_range(0..3)].clone();
                let a = input(rng, &[r, c], -1.0, 1.0);
                let b = input(rng, &bshape, -1.0, 1.0);
                check(rng, &[a, b], |g, v| g.sub(v[0], v[1]), |x| broadcast(&x[0], &x[1], c, |p, q| p - q))
            },
        },
        OpCase {
            name: "mul",
            run: |rng| {
                let (r, c) = dims(rng);
                let bshape = [vec![r, c], vec![1, c], vec![]][rng.gen_range(0..3)].clone();
                let a = input(rng, &[r, c], -1.0, 1.0);
                let b = input(rng, &bshape, -1.0, 1.0);
                check(rng, &[a, b], |g, v| g.forward_op(OpKind::Mul, v), |x| broadcast(&x[0], &x[1], c, |p, q| p * q))
            },
        },
        OpCase {
            name: "scale",
            run: |rng| {
                let (r, c) = dims(rng);
                let k = rng.gen_range(-3.0..3.0f32);
                let a = input(rng, &[r, c], -1.0, 1.0);
                check(rng, &[a], move |g, v| g.scale(v[0], k), move |x| x[0].iter().map(|v| v * k as f64).collect())
            },
        },
        OpCase {
            name: "add_scalar",
            run: |rng| {
                let (r, c) = dims(rng);
                let k = rng.gen_range(-3.0..3.0f32);
                let a = input(rng, &[r, c], -1.0, 1.0);
                check(rng, &[a], move |g, v| g.add_scalar(v[0], k), move |x| x[0].iter().map(|v| v + k as f64).collect())
            },
        },
        OpCase {
            name: "tanh",
            run: |rng| {
                let (r, c) = dims(rng);
                let a = input(rng, &[r, c], -2.5, 2.5);
                check(rng, &[a], |g, v| g.forward_op(OpKind::Tanh, v), |x| x[0].iter().map(|v| v.tanh()).collect())
            },
        },
        OpCase {
            name: "sigmoid",
            run: |rng| {
                let (r, c) = dims(rng);
                let a = input(rng, &[r, c], -4.0, 4.0);
                check(rng, &[a], |g, v| g.forward_op(OpKind::Sigmoid, v), |x| x[0].iter().map(|&v| sigmoid(v)).collect())
            },
        },
        OpCase {
            name: "relu_hinge",
            run: |rng| {
                let (r, c) = dims(rng);
                let a = input_off_zero(rng, &[r, c], 0.05);
                check(rng, &[a], |g, v| g.forward_op(OpKind::ReluHinge, v), |x| x[0].iter().map(|v| v.max(0.0)).collect())
            },
        },
        OpCase {
            name: "softmax",
            run: |rng| {
                let (r, c) = dims(rng);
                let a = input(rng, &[r, c], -2.0, 2.0);
                check(rng, &[a], |g, v| g.forward_op(OpKind::Softmax, v), move |x| softmax(&x[0], c, None))
            },
        },
        OpCase {
            name: "softmax_masked",
            run: |rng| {
                let (r, c) = dims(rng);
                let mut mask: Vec<bool> = (0..r * c).map(|_| rng.gen_bool(0.6)).collect();
                for row in 0..r {
                    mask[row * c + rng.gen_range(0..c)] = true;
                }
                let a = input(rng, &[r, c], -2.0, 2.0);
                let m2 = mask.clone();
                check(rng, &[a], move |g, v| g.softmax(v[0], Some(&mask)), move |x| softmax(&x[0], c, Some(&m2)))
            },
        },
        OpCase {
            name: "sum",
            run: |rng| {
                let (r, c) = dims(rng);
                let a = input(rng, &[r, c], -1.0, 1.0);
                check(rng, &[a], |g, v| g.forward_op(OpKind::Sum, v), |x| vec![x[0].iter().sum()])
            },
        },
        OpCase {
            name: "mean",
            run: |rng| {
                let (r, c) = dims(rng);
                let a = input(rng, &[r, c], -1.0, 1.0);
                check(rng, &[a], |g, v| g.forward_op(OpKind::Mean, v), |x| {
                    vec![x[0].iter().sum::<f64>() / x[0].len() as f64]
                })
            },
        },
        OpCase {
            name: "mean_rows",
            run: |rng| {
                let (r, c) = dims(rng);
                let a = input(rng, &[r, c], -1.0, 1.0);
                check(rng, &[a], |g, v| g.mean_rows(v[0]), move |x| {
                    (0..c).map(|j| (0..r).map(|i| x[0][i * c + j]).sum::<f64>() / r as f64).collect()
                })
            },
        },
        OpCase {
            name: "concat",
            run: |rng| {
                let axis = rng.gen_range(0..2);
                let (r, c) = dims(rng);
                let k = rng.gen_range(1..4);
                let other = if axis == 0 { [k, c] } else { [r, k] };
                let a = input(rng, &[r, c], -1.0, 1.0);
                let b = input(rng, &other, -1.0, 1.0);
                check(rng, &[a, b], move |g, v| g.forward_op(OpKind::Concat { axis }, v), move |x| {
                    if axis == 0 {
                        x[0].iter().chain(&x[1]).copied().collect()
                    } else {
                        (0..r)
                            .flat_map(|i| x[0][i * c..(i + 1) * c].iter().chain(&x[1][i * k..(i + 1) * k]).copied().collect::<Vec<_>>())
                            .collect()
                    }
                })
            },
        },
        OpCase {
            name: "slice",
            run: |rng| {
                let axis = rng.gen_range(0..2);
                let (r, c) = dims(rng);
                let extent = if axis == 0 { r } else { c };
                let start = rng.gen_range(0..extent);
                let end = rng.gen_range(start + 1..=extent);
                let a = input(rng, &[r, c], -1.0, 1.0);
                check(rng, &[a], move |g, v| g.forward_op(OpKind::Slice { axis, start, end }, v), move |x| {
                    let mut out = Vec::new();
                    for i in 0..r {
                        for j in 0..c {
                            let inside = if axis == 0 { (start..end).contains(&i) } else { (start..end).contains(&j) };
                            if inside {
                                out.push(x[0][i * c + j]);
                            }
                        }
                    }
                    out
                })
            },
        },
        OpCase {
            name: "layer_norm",
            run: |rng| {
                let r = rng.gen_range(1..5);
                // With two columns the input gradient is set by the epsilon alone.
                let c = rng.gen_range(3..7);
                let a = input(rng, &[r, c], -2.0, 2.0);
                let gm = input(rng, &[c], 0.5, 1.5);
                let bt = input(rng, &[c], -0.5, 0.5);
                check(rng, &[a, gm, bt], |g, v| g.forward_op(OpKind::LayerNorm, v), move |x| layer_norm(&x[0], &x[1], &x[2], c))
            },
        },
        OpCase {
            name: "transpose",
            run: |rng| {
                let (r, c) = dims(rng);
                let a = input(rng, &[r, c], -1.0, 1.0);
                check(rng, &[a], |g, v| g.transpose(v[0]), move |x| transpose(&x[0], r, c))
            },
        },
        OpCase {
            name: "reshape",
            run: |rng| {
                let (r, c) = dims(rng);
                let a = input(rng, &[r, c], -1.0, 1.0);
                check(rng, &[a], move |g, v| g.reshape(v[0], &[c, r]), |x| x[0].clone())
            },
        },
    ]
}

/// Runs `n` random instances of every op and returns `(name, worst error)` per op.
pub fn all_ops(seed: u64, n: usize) -> Vec<(&'static str, f64)> {
    use rand::SeedableRng;
    op_cases()
        .into_iter()
        .map(|case| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ case.name.len() as u64);
            let worst = (0..n).map(|_| (case.run)(&mut rng)).fold(0.0, f64::max);
            (case.name, worst)
        })
        .collect()
}
