use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Central-difference check of d(sum(w ⊙ f(inputs)))/d(inputs).
fn check_grads(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vs);
        g.shape(out).to_vec()
    };
    let weights = rand_tensor(&mut rng, &probe_shape, -1.0, 1.0);
    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vs);
        g.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vs);
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let root = g.sum_all(prod).unwrap();
    g.backward(root).unwrap();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vs[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; input.numel()]);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel < 1e-4,
                "input {k} index {i}: analytic {a} numeric {numeric} rel {rel}"
            );
        }
    }
}

#[test]
fn mul_is_elementwise() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![2], vec![2.0, 3.0]));
    let b = g.constant(Tensor::new(vec![2], vec![4.0, 5.0]));
    let c = g.mul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[8.0, 15.0]);
}

#[test]
fn division_by_zero_trips_nan_guard() {
    let mut g = Graph::new().with_nan_guard(true);
    let a = g.constant(Tensor::new(vec![2], vec![1.0, 1.0]));
    let b = g.constant(Tensor::new(vec![2], vec![0.0, 1.0]));
    let err = g.div(a, b).unwrap_err();
    assert_eq!(err, TapeError::NonFinite { op: "div", index: 0 });

    let mut g = Graph::new().with_nan_guard(false);
    let a = g.constant(Tensor::new(vec![2], vec![1.0, 1.0]));
    let b = g.constant(Tensor::new(vec![2], vec![0.0, 1.0]));
    let c = g.div(a, b).unwrap();
    assert!(g.value(c).data()[0].is_infinite());
}

proptest! {
    #[test]
    fn first_non_finite_finds_the_first_bad_value(
        data in prop::collection::vec(-1e300f64..1e300, 0..40),
        bad in prop::collection::vec((0usize..40, 0usize..3), 0..3),
    ) {
        let mut data = data;
        for &(i, k) in &bad {
            if i < data.len() {
                data[i] = [f64::NAN, f64::INFINITY, f64::NEG_INFINITY][k];
            }
        }
        let want = data.iter().position(|x| !x.is_finite());
        let t = Tensor::new(vec![data.len()], data);
        prop_assert_eq!(t.first_non_finite(), want);
    }
}

#[test]
fn product_rule() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(2.0));
    let y = g.leaf(Tensor::scalar(5.0));
    let p = g.mul(x, y).unwrap();
    g.backward(p).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[5.0]);
    assert_eq!(g.grad(y).unwrap(), &[2.0]);
}

#[test]
fn incompatible_shapes_name_both() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4]));
    let err = g.add(a, b).unwrap_err();
    assert_eq!(
        err,
        TapeError::Shape {
            op: "add",
            lhs: vec![2, 3],
            rhs: vec![4]
        }
    );
    assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4]"));
}

#[test]
fn broadcasting_trailing_and_unit_dims() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let row = g.constant(Tensor::new(vec![3], vec![10.0, 20.0, 30.0]));
    let col = g.constant(Tensor::new(vec![2, 1], vec![100.0, 200.0]));
    let r = g.add(a, row).unwrap();
    assert_eq!(g.value(r).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let c = g.add(a, col).unwrap();
    assert_eq!(g.value(c).data(), &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]);
}

#[test]
fn matmul_identity_and_row_selection() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let m = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let r = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
    let c = g.constant(Tensor::from_rows(&[vec![2.0], vec![3.0]]));
    let p = g.matmul(r, c).unwrap();
    assert_eq!(g.value(p).shape(), &[1, 1]);
    assert_eq!(g.value(p).data(), &[2.0]);

    let err = g.matmul(m, c).map(|_| ()).and_then(|_| g.matmul(c, m).map(|_| ()));
    assert!(matches!(err, Err(TapeError::Shape { op: "matmul", .. })));
}

#[test]
fn window_mean_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]));
    let m = g.window_mean(x, 0, 4, 1).unwrap();
    assert_eq!(g.value(m).data()[3], 2.5);
    // Warm-up: partial windows average the available taps.
    assert_eq!(g.value(m).data()[..3], [1.0, 1.5, 2.0]);

    let x = g.constant(Tensor::new(vec![4], vec![1.0, 5.0, 1.0, 5.0]));
    let m = g.window_mean(x, 0, 2, 2).unwrap();
    assert_eq!(g.value(m).data()[3], 5.0);

    let x = g.constant(Tensor::full(&[3, 7], -2.25));
    let m = g.window_mean(x, 1, 3, 2).unwrap();
    assert!(g.value(m).data().iter().all(|&v| v == -2.25));
}

#[test]
fn window_mean_rejects_oversized_window() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[5]));
    assert!(matches!(
        g.window_mean(x, 0, 3, 2),
        Err(TapeError::EmptyWindow { window: 3, dilation: 2, len: 5 })
    ));
    assert!(g.window_mean(x, 0, 0, 1).is_err());
}

fn naive_window_mean(x: &[f64], outer: usize, len: usize, inner: usize, w: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for t in 0..len {
            for i in 0..inner {
                let mut s = 0.0;
                let mut n = 0usize;
                // Oldest tap first.
                for j in (0..w).rev() {
                    if j * d <= t {
                        s += x[(o * len + t - j * d) * inner + i];
                        n += 1;
                    }
                }
                out[(o * len + t) * inner + i] = s / n as f64;
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn window_mean_matches_naive_loop(
        seed in any::<u64>(),
        w in 1usize..=8,
        d in 1usize..=8,
        extra in 0usize..=56,
        outer in 1usize..=3,
        inner in 1usize..=3,
    ) {
        let len = (w * d + extra).min(64).max(w * d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[outer, len, inner], -5.0, 5.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let m = g.window_mean(xv, 1, w, d).unwrap();
        let oracle = naive_window_mean(x.data(), outer, len, inner, w, d);
        prop_assert_eq!(g.value(m).data(), &oracle[..]);
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![0.0; 4]]));
    let s = g.softmax_rows(x).unwrap();
    assert_eq!(g.value(s).data(), &[0.25; 4]);

    let x = g.constant(Tensor::from_rows(&[vec![1000.0, 0.0]]));
    let s = g.softmax_rows(x).unwrap();
    let v = g.value(s).data();
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
    assert!(v.iter().all(|x| x.is_finite()));
}

#[test]
fn softplus_value_and_slope_at_zero() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(0.0));
    let y = g.softplus(x).unwrap();
    assert!((g.value(y).item() - std::f64::consts::LN_2).abs() < 1e-15);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.5]);
}

#[test]
fn zero_mask_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let m = g.zero_mask(x, &[true, false, true]).unwrap();
    assert_eq!(g.value(m).data(), &[0.0, 2.0, 0.0, 0.0, 5.0, 0.0]);
    let sq = g.square(m).unwrap();
    let s = g.sum_all(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 4.0, 0.0, 0.0, 10.0, 0.0]);
}

#[test]
fn log_and_sqrt_reject_non_positive() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3], vec![1.0, 0.0, 2.0]));
    assert_eq!(
        g.sqrt(x).unwrap_err(),
        TapeError::Domain { op: "sqrt", index: 1, value: 0.0 }
    );
    let y = g.constant(Tensor::new(vec![2], vec![1.0, -3.0]));
    assert!(matches!(g.log(y), Err(TapeError::Domain { op: "log", index: 1, .. })));
}

#[test]
fn backward_needs_scalar_root() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]));
    assert_eq!(
        g.backward(x).unwrap_err(),
        TapeError::NonScalarRoot { shape: vec![2] }
    );
}

#[test]
fn repeated_backward_accumulates_into_store() {
    let mut store = ParamStore::new();
    let id = store.insert("w", Tensor::new(vec![2], vec![1.5, -0.5]));
    let mut g = Graph::new();
    let w = g.param(&store, id);
    let sq = g.square(w).unwrap();
    let s = g.sum_all(sq).unwrap();
    g.backward(s).unwrap();
    store.accumulate(&g);
    let once = store.grad(id).clone();
    g.backward(s).unwrap();
    store.accumulate(&g);
    let twice = store.grad(id);
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
    store.zero_grad();
    assert!(store.grad(id).data().iter().all(|&g| g == 0.0));
}

#[test]
fn param_inserted_once_per_graph() {
    let mut store = ParamStore::new();
    let id = store.insert("w", Tensor::scalar(3.0));
    let mut g = Graph::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    assert_eq!(a, b);
    let p = g.mul(a, b).unwrap();
    g.backward(p).unwrap();
    store.accumulate(&g);
    assert_eq!(store.grad(id).data(), &[6.0]);
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut store = ParamStore::new();
    let id = store.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
    let before = store.value(id).clone();
    Adam::default().step(&mut store);
    assert_eq!(store.value(id), &before);
}

fn quadratic_step(store: &mut ParamStore, id: ParamId, target: f64, adam: &Adam) {
    store.zero_grad();
    let mut g = Graph::new();
    let x = g.param(store, id);
    let d = g.add_scalar(x, -target).unwrap();
    let l = g.square(d).unwrap();
    let l = g.sum_all(l).unwrap();
    g.backward(l).unwrap();
    store.accumulate(&g);
    adam.step(store);
}

#[test]
fn adam_moves_downhill() {
    // x² is flat at 0, so the sign check uses (x + 1)², minimised at -1.
    let mut store = ParamStore::new();
    let id = store.insert("x", Tensor::scalar(0.0));
    quadratic_step(&mut store, id, -1.0, &Adam::with_lr(0.1));
    let x = store.value(id).item();
    assert!(x < 0.0);
    // First bias-corrected Adam step has magnitude lr.
    assert!((x + 0.1).abs() < 1e-6);
}

#[test]
fn adam_converges_on_scalar_quadratic() {
    // Oracle: scalar Adam written out longhand.
    let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
    let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for t in 1..=100 {
        let g = 2.0 * (x - 3.0);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x -= lr * mh / (vh.sqrt() + eps);
    }
    assert!((x - 3.0).abs() < 0.05, "oracle ended at {x}");

    let mut store = ParamStore::new();
    let id = store.insert("x", Tensor::scalar(0.0));
    let adam = Adam::with_lr(lr);
    for _ in 0..100 {
        quadratic_step(&mut store, id, 3.0, &adam);
    }
    let got = store.value(id).item();
    assert!((got - 3.0).abs() < 0.05);
    assert!((got - x).abs() < 1e-12);
}

#[test]
fn finite_difference_elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[3, 4], 0.5, 2.0);
        let row = rand_tensor(&mut rng, &[4], 0.5, 2.0);
        let col = rand_tensor(&mut rng, &[3, 1], 0.5, 2.0);
        check_grads(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap());
        check_grads(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
        check_grads(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
        check_grads(&[a.clone(), b.clone()], |g, v| g.div(v[0], v[1]).unwrap());
        check_grads(&[a.clone(), row.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
        check_grads(&[a.clone(), col.clone()], |g, v| g.div(v[0], v[1]).unwrap());
        check_grads(&[a.clone()], |g, v| g.softplus(v[0]).unwrap());
        check_grads(&[a.clone()], |g, v| g.square(v[0]).unwrap());
        check_grads(&[b.clone()], |g, v| g.sqrt(v[0]).unwrap());
        check_grads(&[b.clone()], |g, v| g.log(v[0]).unwrap());
        check_grads(&[a.clone()], |g, v| g.scale(v[0], -1.7).unwrap());
        check_grads(&[a.clone()], |g, v| g.add_scalar(v[0], 0.3).unwrap());
        check_grads(&[a.clone()], |g, v| g.clamp_min(v[0], 0.05).unwrap());
        // Second moment above mu^2 keeps every cell on the smooth branch.
        let second = b.map(|v| v + 5.0);
        check_grads(&[second, a.clone()], |g, v| g.moment_std(v[0], v[1], 0.1).unwrap());
        let c = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        check_grads(&[a.clone(), c, b.clone()], |g, v| g.standardize(v[0], v[1], v[2]).unwrap());
    }
}

#[test]
fn fused_moments_match_unfused_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[2, 3, 5], -2.0, 2.0);
    let mut g = Graph::new();
    let xv = g.leaf(x);
    let mu = g.window_mean(xv, 2, 3, 1).unwrap();
    let sq = g.square(xv).unwrap();
    let second = g.window_mean(sq, 2, 3, 1).unwrap();
    let fused_sigma = g.moment_std(second, mu, 0.5).unwrap();
    let fused_z = g.standardize(xv, mu, fused_sigma).unwrap();
    let mu2 = g.square(mu).unwrap();
    let var = g.sub(second, mu2).unwrap();
    let var = g.clamp_min(var, 0.0).unwrap();
    let var = g.add_scalar(var, 0.5).unwrap();
    let sigma = g.sqrt(var).unwrap();
    let diff = g.sub(xv, mu).unwrap();
    let z = g.div(diff, sigma).unwrap();
    assert_eq!(g.value(fused_sigma), g.value(sigma));
    assert_eq!(g.value(fused_z), g.value(z));
    let a = g.sum_all(fused_z).unwrap();
    g.backward(a).unwrap();
    let fused_grad = g.grad(xv).unwrap().to_vec();
    let b = g.sum_all(z).unwrap();
    g.backward(b).unwrap();
    for (p, q) in fused_grad.iter().zip(g.grad(xv).unwrap()) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn moment_std_rejects_non_positive_variance() {
    let mut g = Graph::new();
    let s = g.constant(Tensor::new(vec![2], vec![1.0, 1.0]));
    let m = g.constant(Tensor::new(vec![2], vec![0.0, 2.0]));
    assert!(matches!(g.moment_std(s, m, 0.0), Err(TapeError::Domain { index: 1, .. })));
    let short = g.constant(Tensor::new(vec![3], vec![0.0; 3]));
    assert!(g.moment_std(s, short, 1.0).is_err());
}

#[test]
fn finite_difference_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[4, 2], -2.0, 2.0);
        check_grads(&[a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]).unwrap());
        let x = rand_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
        check_grads(&[x.clone(), w], |g, v| g.linear(v[0], v[1]).unwrap());
        let att = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
        check_grads(&[att.clone(), x.clone()], |g, v| g.left_matmul(v[0], v[1]).unwrap());
        check_grads(&[att], |g, v| g.softmax_rows(v[0]).unwrap());
        let long = rand_tensor(&mut rng, &[2, 9, 2], -2.0, 2.0);
        check_grads(&[long.clone()], |g, v| g.window_mean(v[0], 1, 3, 2).unwrap());
        check_grads(&[long.clone()], |g, v| g.window_mean(v[0], 1, 9, 1).unwrap());
        let other = rand_tensor(&mut rng, &[2, 9, 3], -2.0, 2.0);
        check_grads(&[long.clone(), other], |g, v| g.concat(&[v[0], v[1]], 2).unwrap());
        check_grads(&[long.clone()], |g, v| g.gather(v[0], 1, &[8, 8, 2, 0]).unwrap());
        check_grads(&[long.clone()], |g, v| g.reshape(v[0], &[6, 6]).unwrap());
        check_grads(&[long.clone()], |g, v| g.zero_mask(v[0], &[false, true]).unwrap());
        let kernel = rand_tensor(&mut rng, &[2, 3, 2], -1.0, 1.0);
        check_grads(&[long.clone(), kernel], |g, v| g.causal_conv(v[0], v[1]).unwrap());
        let hist = rand_tensor(&mut rng, &[2, 3, 4, 2], -2.0, 2.0);
        let arw = rand_tensor(&mut rng, &[3, 4, 2, 2], -1.0, 1.0);
        check_grads(&[hist, arw], |g, v| g.ar_project(v[0], v[1]).unwrap());
        check_grads(&[long], |g, v| g.sum_all(v[0]).unwrap());
    }
}

#[test]
fn causal_conv_matches_loop_and_ignores_future() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 6, 3], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[2, 4, 3], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = g.causal_conv(xv, wv).unwrap();
    for o in 0..2 {
        for t in 0..6usize {
            for co in 0..4 {
                let mut s = 0.0;
                for j in 0..2 {
                    let src = t.saturating_sub(j);
                    for c in 0..3 {
                        s += w.get(&[j, co, c]) * x.get(&[o, src, c]);
                    }
                }
                assert!((g.value(y).get(&[o, t, co]) - s).abs() < 1e-12);
            }
        }
    }
    let mut perturbed = x.clone();
    perturbed.set(&[0, 5, 1], 100.0);
    let xp = g.constant(perturbed);
    let yp = g.causal_conv(xp, wv).unwrap();
    for t in 0..5 {
        for co in 0..4 {
            assert_eq!(g.value(y).get(&[0, t, co]), g.value(yp).get(&[0, t, co]));
        }
    }
}
