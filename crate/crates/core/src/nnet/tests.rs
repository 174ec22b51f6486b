use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

// Scalar loss Σ out ⊙ weights, evaluated with train-mode batch statistics.
fn loss(net: &Network, x: &Matrix, w: &Matrix) -> f64 {
    let (out, _) = net.forward_frozen(x, Mode::Train).unwrap();
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

// The floor sits above central-difference rounding noise (~1e-10 at h = 1e-5)
// divided by the tolerance; biases feeding batch norm have an exactly zero
// gradient and would otherwise compare noise with noise.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

// Central difference of `f` around 0. One-sided slopes that disagree by far
// more than curvature explains mean a ReLU kink lies inside the step, so
// retry once with a step 100x smaller.
fn central(h: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (fp, f0, fm) = (f(h), f(0.0), f(-h));
    let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
    if (right - left).abs() < 1e-3 || h < 1e-6 {
        (fp - fm) / (2.0 * h)
    } else {
        central(h / 100.0, f)
    }
}

// Central differences for every parameter and every input entry.
fn check_gradients(net: &Network, x: &Matrix, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = random_matrix(x.rows(), net.output_dim(), &mut rng);
    let (_, tape) = net.forward_frozen(x, Mode::Train).unwrap();
    let (grads, dx) = net.backward(&tape, &w).unwrap();
    let h = 1e-5;
    let n_arrays = net.params().len();
    assert_eq!(grads.len(), n_arrays);
    for a in 0..n_arrays {
        let len = net.params()[a].len();
        for j in 0..len {
            let fd = central(h, |d| {
                let mut net = net.clone();
                net.params_mut()[a][j] += d;
                loss(&net, x, &w)
            });
            let err = rel_err(grads[a][j], fd);
            assert!(err < 1e-4, "seed {seed} array {a}[{j}]: analytic {} fd {fd}", grads[a][j]);
        }
    }
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let fd = central(h, |d| {
                let mut x = x.clone();
                x.set(i, j, x.get(i, j) + d);
                loss(net, &x, &w)
            });
            assert!(rel_err(dx.get(i, j), fd) < 1e-4, "seed {seed} input ({i},{j})");
        }
    }
}

fn perturb_bn(net: &mut Network, rng: &mut ChaCha8Rng) {
    for arr in net.params_mut() {
        for v in arr.iter_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    for arr in net.running_stats_mut() {
        for v in arr.iter_mut() {
            *v = 0.5 + rng.gen::<f64>();
        }
    }
}

#[test]
fn zero_dense_gives_zero() {
    let net = Network::new(vec![Layer::Dense(Dense::zeros(3, 2))]).unwrap();
    let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0]]);
    assert_eq!(net.predict(&x).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn zeroed_residual_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for norm in [None, Some(BatchNorm::new(4, 0.9, 1e-5))] {
        let net = Network::new(vec![Layer::Residual(Residual {
            norm,
            dense: Dense::zeros(4, 4),
        })])
        .unwrap();
        let x = random_matrix(5, 4, &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let (y, _) = net.forward_frozen(&x, mode).unwrap();
            for (a, b) in y.data().iter().zip(x.data()) {
                assert!((a - b).abs() <= 1e-15);
            }
        }
    }
}

#[test]
fn batchnorm_train_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Matrix::from_vec(64, 3, (0..192).map(|i| 5.0 * rng.gen::<f64>() + i as f64 * 0.01).collect());
    let mut net = Network::new(vec![Layer::BatchNorm(BatchNorm::new(3, 0.9, 1e-5))]).unwrap();
    let (y, _) = net.forward(&x, Mode::Train).unwrap();
    let mean = y.col_sums();
    for j in 0..3 {
        let m = mean[j] / 64.0;
        let var: f64 = (0..64).map(|i| (y.get(i, j) - m).powi(2)).sum::<f64>() / 64.0;
        let xm: f64 = (0..64).map(|i| x.get(i, j)).sum::<f64>() / 64.0;
        let xv: f64 = (0..64).map(|i| (x.get(i, j) - xm).powi(2)).sum::<f64>() / 64.0;
        assert!(m.abs() < 1e-9);
        // eps shrinks the unit variance by xv / (xv + eps).
        assert!((var - xv / (xv + 1e-5)).abs() < 1e-12, "var {var}");
        assert!((var - 1.0).abs() < 1e-5);
    }
    // Running statistics moved toward the batch statistics.
    let Layer::BatchNorm(bn) = &net.layers()[0] else { unreachable!() };
    assert!(bn.running_mean.iter().all(|&m| m > 0.0));
}

#[test]
fn batchnorm_moments_before_epsilon() {
    // With eps = 0 the normalized output has exactly unit variance.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_matrix(64, 4, &mut rng);
    let bn = BatchNorm::new(4, 0.9, 0.0);
    let (x_hat, _, _) = bn.normalize(&x, Mode::Train);
    for j in 0..4 {
        let m: f64 = (0..64).map(|i| x_hat.get(i, j)).sum::<f64>() / 64.0;
        let v: f64 = (0..64).map(|i| (x_hat.get(i, j) - m).powi(2)).sum::<f64>() / 64.0;
        assert!(m.abs() < 1e-9);
        assert!((v - 1.0).abs() < 1e-6);
    }
}

#[test]
fn eval_forward_is_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = build_architecture(ArchKind::ResnetBn, Role::Decoder, 6, 4, 6, 2, &ArchOptions::default(), &mut rng)
        .unwrap();
    let x = random_matrix(7, 4, &mut rng);
    let a = net.predict(&x).unwrap();
    let b = net.predict(&x).unwrap();
    let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn linear_net_gradient() {
    // loss = Σ outputs of x·W + b: dW[p][o] = Σ_i x[i][p], db = n.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = Network::new(vec![Layer::Dense(Dense::random(3, 2, &mut rng))]).unwrap();
    let x = random_matrix(4, 3, &mut rng);
    let (_, tape) = net.forward_frozen(&x, Mode::Train).unwrap();
    let ones = Matrix::from_vec(4, 2, vec![1.0; 8]);
    let (grads, _) = net.backward(&tape, &ones).unwrap();
    let sums = x.col_sums();
    for p in 0..3 {
        for o in 0..2 {
            assert!((grads[0][p * 2 + o] - sums[p]).abs() < 1e-12);
        }
    }
    assert_eq!(grads[1], vec![4.0, 4.0]);
    let zero = Matrix::zeros(4, 2);
    let (grads, dx) = net.backward(&tape, &zero).unwrap();
    assert!(grads.iter().flatten().all(|&g| g == 0.0));
    assert!(dx.data().iter().all(|&g| g == 0.0));
}

#[test]
fn two_layer_relu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let net = Network::new(vec![
        Layer::Dense(Dense::random(4, 6, &mut rng)),
        Layer::Relu { dim: 6 },
        Layer::Dense(Dense::random(6, 3, &mut rng)),
    ])
    .unwrap();
    let x = random_matrix(5, 4, &mut rng);
    check_gradients(&net, &x, 21);
}

#[test]
fn bounding_layer() {
    let b = Bounding::new(-4.0, 4.0, 1.0).unwrap();
    assert_eq!(b.apply(0.0, 0.0), (0.0, 0.5));
    let (mu, var) = b.apply(1e6, -1e6);
    assert!(mu < 4.0 && mu > 3.999_999 && var > 0.0);
    let mut prev = f64::NEG_INFINITY;
    for i in -40..40 {
        let (mu, _) = b.apply(i as f64 * 0.7, 0.0);
        assert!(mu > prev);
        prev = mu;
    }
    assert!(Bounding::new(1.0, 1.0, 1.0).is_err());
    assert!(Bounding::new(-1.0, 1.0, 0.0).is_err());
    assert!(bounding_forward(&Matrix::zeros(2, 3), &b).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let net = Network::new(vec![Layer::Dense(Dense::random(3, 2, &mut rng)), Layer::Bounding(b)]).unwrap();
    let x = random_matrix(6, 3, &mut rng);
    check_gradients(&net, &x, 31);
}

#[test]
fn architecture_shapes() {
    let opts = ArchOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let enc = build_architecture(ArchKind::Mlp, Role::Encoder, 2, 8000, 1000, 20, &opts, &mut rng).unwrap();
    assert_eq!(enc.specs(), vec![LayerSpec::Dense { d_in: 8000, d_out: 20 }]);

    let dec = build_architecture(ArchKind::Mlp, Role::Decoder, 4, 40, 80, 2, &opts, &mut rng).unwrap();
    let dense: Vec<_> = dec
        .specs()
        .into_iter()
        .filter_map(|s| match s {
            LayerSpec::Dense { d_in, d_out } => Some((d_in, d_out)),
            _ => None,
        })
        .collect();
    assert_eq!(dense, vec![(40, 80), (80, 80), (80, 2)]);
    assert!(matches!(dec.layers().last(), Some(Layer::Bounding(_))));

    let enc6 = build_architecture(ArchKind::Mlp, Role::Encoder, 6, 100, 30, 5, &opts, &mut rng).unwrap();
    assert_eq!(enc6.layers().iter().filter(|l| matches!(l, Layer::Dense(_))).count(), 3);

    for kind in [ArchKind::Resnet, ArchKind::ResnetBn] {
        assert!(build_architecture(kind, Role::Decoder, 2, 4, 8, 2, &opts, &mut rng).is_err());
        let d = build_architecture(kind, Role::Decoder, 4, 4, 8, 2, &opts, &mut rng).unwrap();
        assert!(d.layers().iter().any(|l| matches!(l, Layer::Residual(_))));
    }
    let bn = build_architecture(ArchKind::MlpBn, Role::Encoder, 4, 10, 6, 3, &opts, &mut rng).unwrap();
    assert!(bn.has_batchnorm());
    assert!(build_architecture(ArchKind::Mlp, Role::Encoder, 3, 10, 6, 3, &opts, &mut rng).is_err());
    assert!(build_architecture(ArchKind::Mlp, Role::Decoder, 4, 10, 6, 3, &opts, &mut rng).is_err());
}

#[test]
fn shape_and_tape_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = build_architecture(ArchKind::Mlp, Role::Encoder, 4, 5, 4, 2, &ArchOptions::default(), &mut rng)
        .unwrap();
    assert!(matches!(net.predict(&Matrix::zeros(2, 4)), Err(NetError::Shape(_))));
    let other = build_architecture(ArchKind::Mlp, Role::Encoder, 2, 5, 4, 2, &ArchOptions::default(), &mut rng)
        .unwrap();
    let (_, tape) = other.forward_frozen(&Matrix::zeros(2, 5), Mode::Train).unwrap();
    assert!(matches!(net.backward(&tape, &Matrix::zeros(2, 2)), Err(NetError::Tape(_))));
    let bad = Network::new(vec![Layer::Dense(Dense::zeros(3, 4)), Layer::Dense(Dense::zeros(5, 1))]);
    assert!(bad.is_err());
    let mut huge = Dense::zeros(1, 1);
    huge.weight.set(0, 0, f64::MAX);
    let net = Network::new(vec![Layer::Dense(huge)]).unwrap();
    assert!(matches!(
        net.predict(&Matrix::from_vec(1, 1, vec![10.0])),
        Err(NetError::NonFinite { layer: 0, .. })
    ));
}

#[test]
fn segment_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net =
        build_architecture(ArchKind::ResnetBn, Role::Decoder, 4, 3, 5, 2, &ArchOptions::default(), &mut rng).unwrap();
    perturb_bn(&mut net, &mut rng);
    let mut buf = Vec::new();
    net.write_segment(&mut buf).unwrap();
    let back = Network::read_segment(&buf[..]).unwrap();
    assert_eq!(back, net);
    let mut buf2 = Vec::new();
    back.write_segment(&mut buf2).unwrap();
    assert_eq!(buf, buf2);
    assert!(Network::read_segment(&buf[..buf.len() - 3]).is_err());
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(20))]
    #[test]
    fn gradients_match_finite_differences(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kinds = [ArchKind::Mlp, ArchKind::MlpBn, ArchKind::Resnet, ArchKind::ResnetBn];
        let kind = kinds[rng.gen_range(0..4)];
        let role = if rng.gen_bool(0.5) { Role::Encoder } else { Role::Decoder };
        let depth = [4, 6][rng.gen_range(0..2)];
        let d_out = if role == Role::Decoder { 2 } else { 3 };
        let mut net = build_architecture(kind, role, depth, 3, 4, d_out, &ArchOptions::default(), &mut rng).unwrap();
        perturb_bn(&mut net, &mut rng);
        let x = random_matrix(5, 3, &mut rng);
        check_gradients(&net, &x, seed);
    }

    #[test]
    fn bounding_stays_inside(raw_mu in -1e3f64..1e3, raw_var in -1e3f64..1e3) {
        let b = Bounding::default();
        let (mu, var) = b.apply(raw_mu, raw_var);
        proptest::prop_assert!(b.mu_lo < mu && mu < b.mu_hi);
        proptest::prop_assert!(0.0 < var && var < b.var_max);
    }
}

