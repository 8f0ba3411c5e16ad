mod common;

use common::*;
use proptest::prelude::*;
use tengrad::fisher::{FisherBlock, LayerJacobian};
use tengrad::flops;
use tengrad::net::{
    backward, finite_diff_gradient, forward, loss_and_grad, per_sample_jacobian_oracle, LayerSpec, LossKind, NetError,
    NetworkSpec, Params,
};
use tengrad::tensor::{hadamard, khatri_rao_cols, matmul, matmul_tn, solve_spd, unfold_conv, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn khatri_rao_gram_identity(d_i in 1usize..=16, d_o in 1usize..=16, m in 1usize..=8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let (i, g) = (uniform(&mut r, d_i, m), uniform(&mut r, d_o, m));
        let kr = khatri_rao_cols(&i, &g).unwrap();
        let lhs = matmul_tn(&kr, &kr).unwrap();
        let rhs = hadamard(&matmul_tn(&i, &i).unwrap(), &matmul_tn(&g, &g).unwrap()).unwrap();
        prop_assert!(max_abs_diff(lhs.data(), rhs.data()) <= 1e-12);
    }

    #[test]
    fn spd_solve_round_trip(n in 1usize..=24, seed in any::<u64>()) {
        let mut r = rng(seed);
        let rr = uniform(&mut r, n, n);
        let mut a = matmul_tn(&rr, &rr).unwrap();
        for k in 0..n {
            a.set(k, k, a.get(k, k) + 1.0);
        }
        let b = uniform(&mut r, n, 2);
        let x = solve_spd(&a, &b).unwrap();
        let back = matmul(&a, &x).unwrap();
        prop_assert!(rel_l2(back.data(), b.data()) <= 1e-9);
    }

    #[test]
    fn unfold_matches_index_arithmetic(
        c in 1usize..=3, h in 3usize..=7, w in 3usize..=7, k in 1usize..=3,
        stride in 1usize..=2, pad in 0usize..=1, seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let img = uniform_vec(&mut r, c * h * w);
        let u = unfold_conv(&Tensor::new(vec![c, h, w], img.clone()).unwrap(), k, stride, pad).unwrap();
        let want = naive_unfold(&img, c, h, w, k, stride, pad);
        prop_assert_eq!(u.shape(), want.shape());
        prop_assert_eq!(u.data(), want.data());
    }

    #[test]
    fn unfold_times_weights_is_direct_convolution(
        c in 1usize..=3, c_out in 1usize..=4, h in 3usize..=8, w in 3usize..=8, k in 1usize..=3,
        stride in 1usize..=2, pad in 0usize..=1, seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let img = uniform_vec(&mut r, c * h * w);
        let filters: Vec<Vec<f64>> = (0..c_out).map(|_| uniform_vec(&mut r, c * k * k)).collect();
        let wmat = Tensor::from_fn(c * k * k, c_out, |p, co| filters[co][p]);
        let u = unfold_conv(&Tensor::new(vec![c, h, w], img.clone()).unwrap(), k, stride, pad).unwrap();
        let out = matmul(&u, &wmat).unwrap(); // S × c_out
        let direct = direct_conv(&img, c, h, w, &filters, None, k, stride, pad);
        let s = out.rows();
        let got: Vec<f64> = (0..c_out * s).map(|idx| out.get(idx % s, idx / s)).collect();
        prop_assert!(max_abs_diff(&got, &direct) <= 1e-13);
    }

    #[test]
    fn conv_layer_forward_is_direct_convolution(
        c in 1usize..=2, c_out in 1usize..=3, size in 3usize..=6, k in 1usize..=3,
        stride in 1usize..=2, pad in 0usize..=1, m in 1usize..=3, seed in any::<u64>(),
    ) {
        let spec = NetworkSpec::new(
            [c, size, size],
            vec![LayerSpec::Conv2d { c_in: c, c_out, kernel: k, stride, padding: pad, bias: true }],
            LossKind::SquaredError,
        ).unwrap();
        let mut r = rng(seed);
        let params = Params::init(&spec, &mut r);
        let x = uniform(&mut r, c * size * size, m);
        let (u, _) = forward(&spec, &params, &x).unwrap();
        let wt = params.layer(0);
        let patch = c * k * k;
        let filters: Vec<Vec<f64>> = (0..c_out).map(|co| (0..patch).map(|p| wt.get(p, co)).collect()).collect();
        let bias: Vec<f64> = (0..c_out).map(|co| wt.get(patch, co)).collect();
        for j in 0..m {
            let img: Vec<f64> = (0..x.rows()).map(|p| x.get(p, j)).collect();
            let want = direct_conv(&img, c, size, size, &filters, Some(&bias), k, stride, pad);
            let got: Vec<f64> = (0..u.rows()).map(|p| u.get(p, j)).collect();
            prop_assert!(max_abs_diff(&got, &want) <= 1e-13);
        }
    }

    #[test]
    fn flop_counter_is_deterministic_and_additive(n in 1usize..=12, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, n, n + 1);
        let b = uniform(&mut r, n + 1, 3);
        let run = || {
            let p = matmul(&a, &b).unwrap();
            hadamard(&p, &p).unwrap();
        };
        let (_, first) = flops::measure(run);
        let (_, second) = flops::measure(run);
        prop_assert_eq!(first, second);
        let (_, both) = flops::measure(|| { run(); run(); });
        prop_assert_eq!(both, first + second);
    }

    #[test]
    fn backprop_matches_central_differences(seed in any::<u64>(), conv in any::<bool>(), ce in any::<bool>()) {
        let mut r = rng(seed);
        let loss = if ce { LossKind::CrossEntropy } else { LossKind::SquaredError };
        let spec = if conv { random_convnet(&mut r, loss) } else { random_mlp(&mut r, loss) };
        let m = 1 + (seed % 4) as usize;
        let params = Params::init(&spec, &mut r);
        let x = uniform(&mut r, spec.input_len(), m);
        let t = random_targets(&mut r, &spec, m);
        let (u, mut cache) = forward(&spec, &params, &x).unwrap();
        let (_, lg) = loss_and_grad(spec.loss(), &u, &t).unwrap();
        let bp: Vec<f64> = backward(&spec, &params, &mut cache, &lg).unwrap().iter().flat_map(|g| g.data().to_vec()).collect();
        let fd: Vec<f64> = finite_diff_gradient(&spec, &params, &x, &t, 1e-5).unwrap().iter().flat_map(|g| g.data().to_vec()).collect();
        let scale = fd.iter().chain(&bp).map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let err = bp.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / scale;
        prop_assert!(err <= 1e-5, "relative error {}", err);
    }

    #[test]
    fn mean_per_sample_gradient_is_batch_gradient(seed in any::<u64>(), conv in any::<bool>()) {
        let mut r = rng(seed);
        let spec = if conv { random_convnet(&mut r, LossKind::CrossEntropy) } else { random_mlp(&mut r, LossKind::SquaredError) };
        let m = 1 + (seed % 4) as usize;
        let params = Params::init(&spec, &mut r);
        let x = uniform(&mut r, spec.input_len(), m);
        let t = random_targets(&mut r, &spec, m);
        let (u, mut cache) = forward(&spec, &params, &x).unwrap();
        let (_, lg) = loss_and_grad(spec.loss(), &u, &t).unwrap();
        let grads = backward(&spec, &params, &mut cache, &lg).unwrap();
        for (l, g) in grads.iter().enumerate() {
            let j = per_sample_jacobian_oracle(&params, &cache, l).unwrap();
            let mean: Vec<f64> = (0..j.cols()).map(|p| (0..m).map(|i| j.get(i, p)).sum::<f64>() / m as f64).collect();
            prop_assert!(max_abs_diff(&mean, &g.vec()) <= 1e-12);
        }
    }

    #[test]
    fn parameter_mutation_invalidates_the_cache(seed in any::<u64>(), layer_pick in any::<usize>()) {
        let mut r = rng(seed);
        let spec = random_mlp(&mut r, LossKind::SquaredError);
        let mut params = Params::init(&spec, &mut r);
        let x = uniform(&mut r, spec.input_len(), 3);
        let t = random_targets(&mut r, &spec, 3);
        let (u, mut cache) = forward(&spec, &params, &x).unwrap();
        let (_, lg) = loss_and_grad(spec.loss(), &u, &t).unwrap();
        backward(&spec, &params, &mut cache, &lg).unwrap();
        prop_assert!(LayerJacobian::from_cache(&cache, &params, 0).is_ok());
        let l = layer_pick % params.num_layers();
        params.layer_mut(l).data_mut()[0] += 1e-3;
        for q in 0..params.num_layers() {
            let stale = matches!(
                LayerJacobian::from_cache(&cache, &params, q),
                Err(tengrad::fisher::FisherError::Net(NetError::StaleCache))
            );
            prop_assert!(stale);
            prop_assert!(matches!(cache.layer(&params, q), Err(NetError::StaleCache)));
        }
        // the block refresh itself goes through the checked accessor
        let mut block = FisherBlock::new(0, 0.1).unwrap();
        prop_assert!(cache.layer(&params, 0).map(|lc| block.refresh(lc, false).is_ok()).is_err());
    }
}
