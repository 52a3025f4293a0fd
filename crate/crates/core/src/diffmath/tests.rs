use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn identity_layer_passes_input_through() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mlp = Mlp::new(&mut store, "id", &[3, 3], &[Activation::None], &mut rng).unwrap();
    let layer = &mlp.layers()[0];
    let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    store.set(layer.weight, eye).unwrap();
    let mut tape = Tape::new();
    let x = Tensor::new(vec![2, 3], vec![1.5, -2.0, 0.25, 3.0, 4.0, -5.0]).unwrap();
    let xv = tape.leaf(x.clone());
    let y = mlp.forward(&store, &mut tape, xv).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
}

#[test]
fn relu_layer_clamps() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mlp = Mlp::new(&mut store, "r", &[1, 1], &[Activation::Relu], &mut rng).unwrap();
    store.set(mlp.layers()[0].weight, Tensor::new(vec![1, 1], vec![2.0]).unwrap()).unwrap();
    store.set(mlp.layers()[0].bias, Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 1], vec![-3.0]).unwrap());
    let y = mlp.forward(&store, &mut tape, x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0]);
}

#[test]
fn mlp_matches_hand_coded_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut store = ParamStore::<f64>::new();
    let mlp = Mlp::new(
        &mut store,
        "net",
        &[5, 7, 3],
        &[Activation::Relu, Activation::Sigmoid],
        &mut rng,
    )
    .unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, rand_tensor(&mut rng, &shape)).unwrap();
    }
    let x = rand_tensor(&mut rng, &[4, 5]);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = mlp.forward(&store, &mut tape, xv).unwrap();

    // independent evaluation: explicit triple loops
    let l0 = &mlp.layers()[0];
    let l1 = &mlp.layers()[1];
    let (w0, b0) = (store.get(l0.weight).data(), store.get(l0.bias).data());
    let (w1, b1) = (store.get(l1.weight).data(), store.get(l1.bias).data());
    for n in 0..4 {
        let mut h = [0.0f64; 7];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut acc = b0[j];
            for i in 0..5 {
                acc += x.data()[n * 5 + i] * w0[i * 7 + j];
            }
            *hj = acc.max(0.0);
        }
        for k in 0..3 {
            let mut acc = b1[k];
            for (j, hj) in h.iter().enumerate() {
                acc += hj * w1[j * 3 + k];
            }
            let expect = 1.0 / (1.0 + (-acc).exp());
            assert!((tape.value(y).data()[n * 3 + k] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn mlp_rejects_wrong_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f32>::new();
    let mlp = Mlp::new(&mut store, "n", &[4, 2], &[Activation::None], &mut rng).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[3, 5]));
    assert!(matches!(mlp.forward(&store, &mut tape, x), Err(Error::Shape(_))));
}

#[test]
fn square_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(3.0).with_requires_grad(true));
    let y = tape.mul(x, x).unwrap();
    let grads = tape.backward(y, None).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
}

#[test]
fn sigmoid_gradient_at_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(0.0).with_requires_grad(true));
    let y = tape.activation(x, Activation::Sigmoid).unwrap();
    let grads = tape.backward(y, None).unwrap();
    assert!((grads.wrt(x).unwrap().data()[0] - 0.25).abs() < 1e-15);
}

#[test]
fn consumed_tape_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(2.0).with_requires_grad(true));
    let y = tape.mul(x, x).unwrap();
    tape.backward(y, None).unwrap();
    assert!(matches!(tape.backward(y, None), Err(Error::State(_))));
    assert!(matches!(tape.add(x, x), Err(Error::State(_))));
}

#[test]
fn strict_tape_rejects_non_finite() {
    let mut tape = Tape::<f64>::strict();
    let x = tape.leaf(Tensor::scalar(f64::MAX));
    assert!(matches!(tape.mul(x, x), Err(Error::Numeric(_))));
}

#[test]
fn softplus_is_stable() {
    assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    assert_eq!(softplus(1000.0f64), 1000.0);
    assert!(softplus(-1000.0f64) >= 0.0);
    assert!((sigmoid(-800.0f64)).is_finite());
}

/// Scalar objective over a store of free leaf tensors, exercising every
/// primitive once so the finite-difference oracle covers all of them.
fn every_op_objective(store: &ParamStore<f64>) -> crate::Result<(f64, Gradients<f64>)> {
    let id = |n: &str| store.id_of(n).unwrap();
    let mut tape = Tape::new();
    let img = tape.param(store, id("img"));
    let cw = tape.param(store, id("conv.w"));
    let cb = tape.param(store, id("conv.b"));
    let conv = tape.conv2d(img, cw, cb, 2)?;
    let conv = tape.activation(conv, Activation::Softplus)?;
    let skip = tape.param(store, id("skip"));
    let stacked = tape.concat_rows(&[conv, skip])?;
    let up = tape.upsample_hwc(stacked, 6, 7)?;
    let coords_a = [(0.7, 1.2), (3.3, 4.9), (6.9, 0.1), (2.5, 2.5)];
    let coords_b = [(1.1, 5.7), (4.4, 2.2), (0.2, 3.3), (5.5, 5.5)];
    let ga = tape.gather_bilinear(up, &coords_a, OutOfBounds::Clamp)?;
    let gb = tape.gather_bilinear(up, &coords_b, OutOfBounds::Zero)?;
    let pooled = tape.pool_mean_var(&[ga, gb])?;
    let w = tape.param(store, id("lin.w"));
    let b = tape.param(store, id("lin.b"));
    let h = tape.linear(pooled, w, Some(b))?;
    let h = tape.activation(h, Activation::Relu)?;
    let extra = tape.param(store, id("extra"));
    let h = tape.concat_cols(&[h, extra])?;
    let sig_raw = tape.slice_cols(h, 0, 2)?;
    let sigma = tape.activation(sig_raw, Activation::Softplus)?;
    let sigma = tape.reshape(sigma, &[8])?;
    let sigma = tape.reshape(sigma, &[4, 2])?;
    // 4 rays × 2 samples
    let weights = tape.render_weights(sigma, &[0.3, 0.5, 0.2, 0.7, 0.1, 0.9, 0.4, 0.6])?;
    let col_a = tape.slice_cols(h, 1, 3)?;
    let col_b = tape.slice_cols(h, 2, 3)?;
    let col_raw = tape.concat_rows(&[col_a, col_b])?;
    let colors = tape.activation(col_raw, Activation::Sigmoid)?;
    let rendered = tape.ray_weighted_sum(weights, colors)?;
    let target: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).fract()).collect();
    let l1 = tape.mse(rendered, &target)?;
    let l2 = tape.weighted_sq_err(weights, colors, &[0.5; 24])?;
    let patch = tape.param(store, id("patch"));
    let patch_sig = tape.activation(patch, Activation::Sigmoid)?;
    let l3 = tape.grad_diff_mse(patch_sig, &[0.1, 0.8, 0.3, 0.2, 0.6, 0.9, 0.4, 0.0], 2)?;
    let s = tape.scale(l3, 1.5)?;
    let prod = tape.mul(s, l1)?;
    let sum = tape.add(prod, l2)?;
    let extra_sum = tape.sum(extra)?;
    let total = tape.weighted_sum(&[(sum, 1.0), (l2, 0.5), (extra_sum, 0.01)])?;
    let value = tape.value(total).data()[0];
    let grads = tape.backward(total, None)?;
    Ok((value, grads))
}

fn every_op_store(seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.add("img", rand_tensor(&mut rng, &[2, 5, 6])).unwrap();
    store.add("conv.w", rand_tensor(&mut rng, &[3, 2, 3, 3])).unwrap();
    store.add("conv.b", rand_tensor(&mut rng, &[3])).unwrap();
    store.add("skip", rand_tensor(&mut rng, &[1, 3, 3])).unwrap();
    store.add("lin.w", rand_tensor(&mut rng, &[8, 3])).unwrap();
    store.add("lin.b", rand_tensor(&mut rng, &[3])).unwrap();
    store.add("extra", rand_tensor(&mut rng, &[4, 2])).unwrap();
    store.add("patch", rand_tensor(&mut rng, &[4, 2])).unwrap();
    store
}

#[test]
fn every_primitive_passes_finite_differences() {
    for seed in 0..3 {
        let mut store = every_op_store(seed);
        let err = finite_diff_check(every_op_objective, &mut store, None, 1e-5).unwrap();
        assert!(err < 1e-4, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn finite_diff_exact_for_quadratic() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::scalar(0.7)).unwrap();
    let f = |s: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let w = tape.param(s, id);
        let y = tape.mul(w, w)?;
        let y = tape.scale(y, 3.0)?;
        Ok((tape.value(y).data()[0], tape.backward(y, None)?))
    };
    let err = finite_diff_check(f, &mut store, None, 1e-5).unwrap();
    assert!(err < 1e-9, "{err}");
    assert_eq!(store.get(id).data(), &[0.7]);
}

#[test]
fn zero_saddle_gives_zero_both_ways() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let mlp = Mlp::new(&mut store, "z", &[3, 4, 1], &[Activation::Relu, Activation::None], &mut rng).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let f = |s: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let y = mlp.forward(s, &mut tape, x)?;
        let l = tape.mse(y, &[0.0, 0.0])?;
        let g = tape.backward(l, None)?;
        Ok((0.0, g))
    };
    let (_, grads) = f(&store).unwrap();
    assert!(store.ids().all(|id| grads.get(id).map_or(true, |g| g.data().iter().all(|&x| x == 0.0))));
    let err = finite_diff_check(f, &mut store, None, 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn finite_diff_rejects_bad_eps() {
    let mut store = ParamStore::<f64>::new();
    store.add("w", Tensor::scalar(1.0)).unwrap();
    let f = |_: &ParamStore<f64>| Ok((0.0, Gradients::empty(1)));
    assert!(finite_diff_check(f, &mut store, None, 0.0).is_err());
    let g = |_: &ParamStore<f64>| Ok((f64::NAN, Gradients::empty(1)));
    assert!(matches!(finite_diff_check(g, &mut store, None, 1e-5), Err(Error::Numeric(_))));
}

#[test]
fn backward_is_linear_in_losses() {
    let store = every_op_store(4);
    let id = |n: &str| store.id_of(n).unwrap();
    let run = |which: u8| {
        let mut tape = Tape::new();
        let w = tape.param(&store, id("lin.w"));
        let x = tape.leaf(Tensor::new(vec![2, 8], (0..16).map(|i| i as f64 * 0.1 - 0.7).collect()).unwrap());
        let h = tape.linear(x, w, None).unwrap();
        let h = tape.activation(h, Activation::Sigmoid).unwrap();
        let a = tape.mse(h, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let b = tape.sum(h).unwrap();
        let out = match which {
            0 => tape.weighted_sum(&[(a, 1.0), (b, 1.0)]).unwrap(),
            1 => a,
            _ => b,
        };
        tape.backward(out, None).unwrap()
    };
    let both = run(0);
    let mut sum = run(1);
    sum.accumulate(&run(2));
    let g1 = both.get(id("lin.w")).unwrap();
    let g2 = sum.get(id("lin.w")).unwrap();
    assert!(g1.max_abs_diff(g2) < 1e-12);
}

#[test]
fn forward_is_deterministic() {
    let store = every_op_store(5);
    let (a, _) = every_op_objective(&store).unwrap();
    let (b, _) = every_op_objective(&store).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::scalar(1.0)).unwrap();
    let mut adam = AdamState::new(&store, 1e-3);
    let mut g = Gradients::empty(1);
    g.params[0] = Some(Tensor::scalar(0.5));
    adam.step(&mut store, &g).unwrap();
    let moved = 1.0 - store.get(id).data()[0];
    assert!((moved - 1e-3).abs() < 1e-8, "{moved}");
    assert_eq!(adam.step, 1);
}

#[test]
fn adam_zero_gradient_keeps_fresh_params() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::scalar(0.3)).unwrap();
    let mut adam = AdamState::new(&store, 1e-2);
    let mut g = Gradients::empty(1);
    g.params[0] = Some(Tensor::scalar(0.0));
    adam.step(&mut store, &g).unwrap();
    assert_eq!(store.get(id).data(), &[0.3]);
    assert_eq!(adam.first[0].data(), &[0.0]);
}

#[test]
fn adam_rejects_non_finite() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::scalar(0.3)).unwrap();
    let mut adam = AdamState::new(&store, 1e-2);
    let mut g = Gradients::empty(1);
    g.params[0] = Some(Tensor::scalar(f64::NAN));
    let err = adam.step(&mut store, &g).unwrap_err();
    assert!(err.to_string().contains('w'));
    assert_eq!(store.get(id).data(), &[0.3]);
    assert_eq!(adam.step, 0);
}

#[test]
fn adam_descends_convex_quadratic() {
    // f(x, y) = (x − 1)² + 3(y + 2)² + x·y/2
    let mut store = ParamStore::<f64>::new();
    let id = store.add("p", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
    let mut adam = AdamState::new(&store, 0.1);
    let grad = |p: &[f64]| [2.0 * (p[0] - 1.0) + p[1] / 2.0, 6.0 * (p[1] + 2.0) + p[0] / 2.0];
    for step in 0..200 {
        halve_lr_schedule(&mut adam, step, 60).unwrap();
        let g = grad(store.get(id).data());
        let mut grads = Gradients::empty(1);
        grads.params[0] = Some(Tensor::new(vec![2], g.to_vec()).unwrap());
        adam.step(&mut store, &grads).unwrap();
    }
    let g = grad(store.get(id).data());
    assert!((g[0] * g[0] + g[1] * g[1]).sqrt() < 1e-3, "{g:?}");
}

#[test]
fn halving_schedule() {
    let store = ParamStore::<f32>::new();
    let mut adam = AdamState::new(&store, 5e-4);
    halve_lr_schedule(&mut adam, 0, 100).unwrap();
    assert_eq!(adam.lr, 5e-4);
    halve_lr_schedule(&mut adam, 100, 100).unwrap();
    assert_eq!(adam.lr, 2.5e-4);
    halve_lr_schedule(&mut adam, 300, 100).unwrap();
    assert_eq!(adam.lr, 5e-4 / 8.0);
    assert!(halve_lr_schedule(&mut adam, 3, 0).is_err());
}

#[test]
fn gemm_batch_rows_are_independent() {
    // row results must not depend on how many rows share the call
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = Tensor::<f32>::new(vec![37, 64], (0..37 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let x = Tensor::<f32>::new(vec![65, 37], (0..65 * 37).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut tape = Tape::new();
    let wv = tape.leaf(w.clone());
    let xv = tape.leaf(x.clone());
    let all = tape.linear(xv, wv, None).unwrap();
    for r in [0, 17, 64] {
        let single = tape.leaf(Tensor::new(vec![1, 37], x.row(r).to_vec()).unwrap());
        let y = tape.linear(single, wv, None).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(all).row(r));
    }
}
