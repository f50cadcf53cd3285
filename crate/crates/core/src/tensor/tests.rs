use super::*;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Registers one trainable parameter per shape with deterministic random
/// values in `[-1, 1]`.
fn random_params(shapes: &[&[usize]], seed: u64) -> (ParamSet, Vec<ParamId>) {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| ps.add(format!("p{i}"), Tensor::uniform(s, 1.0, &mut rng).with_requires_grad(true)))
        .collect();
    (ps, ids)
}

/// Finite-difference check of `op` under a random linear read-out, so every
/// output element contributes a distinct weight.
fn fd_error<F>(shapes: &[&[usize]], seed: u64, op: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut ps, ids) = random_params(shapes, seed);
    let mut rng = StdRng::seed_from_u64(seed ^ 0xabcdef);
    let mut weights: Option<Vec<f64>> = None;
    finite_diff_check(&mut ps, &FdOptions::default(), |ps, g| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(ps, id)).collect();
        let out = op(g, &vars)?;
        let n = g.value(out).len();
        let w = weights
            .get_or_insert_with(|| (0..n).map(|_| rng.gen_range(0.5..1.5)).collect())
            .clone();
        let shape = g.shape(out).to_vec();
        let wv = g.constant(Tensor::new(shape, w)?);
        let prod = g.mul(out, wv)?;
        Ok(g.sum_all(prod))
    })
    .unwrap()
}

#[test]
fn add_vectors() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2], &[1.0, 2.0]));
    let b = g.constant(t(&[2], &[3.0, 4.0]));
    let c = g.add(a, b).unwrap();
    assert_eq!(g.value(c), &[4.0, 6.0]);
}

#[test]
fn mul_by_scalar_zero_has_zero_grad() {
    let mut ps = ParamSet::new();
    let id = ps.add("x", t(&[1], &[2.0]).with_requires_grad(true));
    let mut g = Graph::new();
    let x = g.param(&ps, id);
    let y = g.elementwise(BinaryKind::Mul, x, Operand::Scalar(0.0)).unwrap();
    assert_eq!(g.value(y), &[0.0]);
    let loss = g.sum_all(y);
    g.backward(loss, &mut ps).unwrap();
    assert_eq!(ps.get(id).grad().unwrap(), &[0.0]);
}

#[test]
fn gelu_gradient_matches_finite_difference() {
    let mut ps = ParamSet::new();
    let id = ps.add("x", t(&[1], &[0.5]).with_requires_grad(true));
    let err = finite_diff_check(&mut ps, &FdOptions::default(), |ps, g| {
        let x = g.param(ps, id);
        let y = g.gelu(x);
        Ok(g.sum_all(y))
    })
    .unwrap();
    assert!(err < 1e-6, "gelu rel err {err}");
}

#[test]
fn gelu_uses_tanh_approximation() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1], &[1.0]));
    let y = g.gelu(x);
    let expected = 0.5 * (1.0 + (GELU_SCALE * (1.0 + GELU_CUBIC)).tanh());
    assert_eq!(g.value(y)[0], expected);
    assert!((GELU_SCALE - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-16);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2]));
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
}

#[test]
fn trailing_broadcast_gradient_sums_over_rows() {
    let err = fd_error(&[&[3, 4], &[4]], 1, |g, v| g.mul(v[0], v[1]));
    assert!(err < 1e-6, "{err}");
    let err = fd_error(&[&[2, 4], &[4]], 2, |g, v| {
        let d = g.add_scalar(v[1], 3.0);
        g.div(v[0], d)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn log_and_div_domain_errors() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2], &[1.0, 0.0]));
    assert!(matches!(g.log(a), Err(TensorError::Domain { op: "log", .. })));
    let b = g.constant(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.div(b, a), Err(TensorError::Domain { op: "div", .. })));
    let n = g.constant(t(&[1], &[-1.0]));
    assert!(g.powf(n, 0.5).is_err());
    assert!(g.powf(n, 2.0).is_ok());
}

#[test]
fn unary_gradients_match_finite_difference() {
    let kinds = [
        UnaryKind::Neg,
        UnaryKind::Exp,
        UnaryKind::Tanh,
        UnaryKind::Gelu,
        UnaryKind::Pow(3.0),
    ];
    for (i, kind) in kinds.into_iter().enumerate() {
        let err = fd_error(&[&[3, 5]], 10 + i as u64, move |g, v| g.unary(kind, v[0]));
        assert!(err < 1e-6, "{kind:?}: {err}");
    }
    // log and fractional powers on a positive domain
    let err = fd_error(&[&[6]], 20, |g, v| {
        let sq = g.unary(UnaryKind::Pow(2.0), v[0])?;
        let pos = g.add_scalar(sq, 0.5);
        let l = g.log(pos)?;
        let r = g.powf(pos, 1.5)?;
        g.add(l, r)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn relu_gradient_away_from_kink() {
    let mut ps = ParamSet::new();
    let id = ps.add("x", t(&[4], &[-1.0, -0.3, 0.4, 2.0]).with_requires_grad(true));
    let err = finite_diff_check(&mut ps, &FdOptions::default(), |ps, g| {
        let x = g.param(ps, id);
        let y = g.relu(x);
        let s = g.mul(y, y)?;
        Ok(g.sum_all(s))
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn matmul_identity_and_arithmetic() {
    let mut g = Graph::new();
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.matmul(i, m).unwrap();
    assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);
    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &[11.0]);
    assert_eq!(g.shape(c), &[1, 1]);
}

#[test]
fn matmul_dimension_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    assert!(g.matmul_nt(a, b).is_ok());
}

#[test]
fn matmul_gradients_match_finite_difference() {
    let err = fd_error(&[&[4, 3], &[3, 5]], 3, |g, v| g.matmul(v[0], v[1]));
    assert!(err < 1e-6, "2-D: {err}");
    let err = fd_error(&[&[2, 4, 3], &[2, 3, 5]], 4, |g, v| g.matmul(v[0], v[1]));
    assert!(err < 1e-6, "batched: {err}");
    let err = fd_error(&[&[2, 4, 3], &[3, 5]], 5, |g, v| g.matmul(v[0], v[1]));
    assert!(err < 1e-6, "shared rhs: {err}");
    let err = fd_error(&[&[2, 4, 3], &[2, 5, 3]], 6, |g, v| g.matmul_nt(v[0], v[1]));
    assert!(err < 1e-6, "transposed rhs: {err}");
}

#[test]
fn reductions_examples() {
    let mut g = Graph::new();
    let z = g.constant(t(&[2], &[0.0, 0.0]));
    let ls = g.log_softmax(z, 0).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!((g.value(ls)[0] + ln2).abs() < 1e-15 && (g.value(ls)[1] + ln2).abs() < 1e-15);
    let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let mean = g.mean(m, 0).unwrap();
    assert_eq!(g.value(mean), &[2.0, 3.0]);
    let sum = g.sum(m, 1).unwrap();
    assert_eq!(g.value(sum), &[3.0, 7.0]);
    let mx = g.max(m, 1).unwrap();
    assert_eq!(g.value(mx), &[2.0, 4.0]);
    assert_eq!(g.argmax(m, 0).unwrap(), vec![1, 1]);
}

#[test]
fn reduction_axis_errors() {
    let mut g = Graph::new();
    let m = g.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.sum(m, 2), Err(TensorError::Axis { .. })));
    let e = g.constant(Tensor::zeros(&[2, 0]));
    assert!(matches!(g.mean(e, 1), Err(TensorError::EmptyAxis { .. })));
}

#[test]
fn softmax_rows_normalized_and_consistent_with_log_softmax() {
    let mut rng = StdRng::seed_from_u64(7);
    let x = Tensor::uniform(&[5, 7], 10.0, &mut rng);
    let mut g = Graph::new();
    let v = g.constant(x);
    let sm = g.softmax(v, 1).unwrap();
    let lsm = g.log_softmax(v, 1).unwrap();
    for r in 0..5 {
        let row = &g.value(sm)[r * 7..(r + 1) * 7];
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..7 {
            assert!((row[j].ln() - g.value(lsm)[r * 7 + j]).abs() < 1e-10);
        }
    }
}

#[test]
fn reduction_gradients_match_finite_difference() {
    for kind in [
        ReduceKind::Sum,
        ReduceKind::Mean,
        ReduceKind::Max,
        ReduceKind::LogSumExp,
        ReduceKind::Softmax,
        ReduceKind::LogSoftmax,
    ] {
        for axis in 0..3 {
            let err = fd_error(&[&[2, 3, 4]], 30 + axis as u64, move |g, v| g.reduce(kind, v[0], axis));
            assert!(err < 1e-6, "{kind:?} axis {axis}: {err}");
        }
    }
}

#[test]
fn layer_norm_gradient_matches_finite_difference() {
    let err = fd_error(&[&[3, 6], &[6], &[6]], 40, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn layer_norm_normalizes_rows() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let one = g.constant(t(&[4], &[1.0; 4]));
    let zero = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, one, zero, 0.0).unwrap();
    let v = g.value(y);
    assert!(v.iter().sum::<f64>().abs() < 1e-12);
    assert!((v.iter().map(|a| a * a).sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
}

#[test]
fn l2_normalize_behaviour_and_gradient() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]));
    let y = g.l2_normalize(x).unwrap();
    assert_eq!(g.value(y), &[0.6, 0.8, 0.0, 0.0]);
    let err = fd_error(&[&[3, 5]], 41, |g, v| g.l2_normalize(v[0]));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv1d_stride_example() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 4], &[1.0; 4]));
    let w = g.constant(t(&[1, 1, 2], &[1.0, 1.0]));
    let y = g.conv1d(x, w, None, 2, 0, 1).unwrap();
    assert_eq!(g.value(y), &[2.0, 2.0]);
    assert_eq!(g.shape(y), &[1, 2]);
}

#[test]
fn conv1d_output_length_formula() {
    let mut g = Graph::new();
    for (t_in, k, s, p) in [(50, 5, 3, 2), (17, 4, 4, 0), (9, 9, 1, 0), (10, 3, 1, 1)] {
        let x = g.constant(Tensor::zeros(&[2, t_in]));
        let w = g.constant(Tensor::zeros(&[3, 2, k]));
        let y = g.conv1d(x, w, None, s, p, 1).unwrap();
        assert_eq!(g.shape(y)[1], (t_in + 2 * p - k) / s + 1);
    }
}

#[test]
fn conv1d_kernel_too_large() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3]));
    let w = g.constant(Tensor::zeros(&[1, 1, 4]));
    assert!(matches!(g.conv1d(x, w, None, 1, 0, 1), Err(TensorError::Domain { .. })));
    assert!(g.conv1d(x, w, None, 1, 1, 1).is_ok());
    let w2 = g.constant(Tensor::zeros(&[2, 2, 1]));
    let x3 = g.constant(Tensor::zeros(&[3, 5]));
    assert!(g.conv1d(x3, w2, None, 1, 0, 1).is_err());
}

#[test]
fn conv1d_gradients_match_finite_difference() {
    let err = fd_error(&[&[2, 4, 11], &[6, 2, 3], &[6]], 50, |g, v| {
        g.conv1d(v[0], v[1], Some(v[2]), 2, 1, 2)
    });
    assert!(err < 1e-6, "{err}");
    let err = fd_error(&[&[1, 13], &[3, 1, 4]], 51, |g, v| g.conv1d(v[0], v[1], None, 3, 0, 1));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn shape_ops_gradients_match_finite_difference() {
    let err = fd_error(&[&[2, 3, 4]], 60, |g, v| g.permute(v[0], &[2, 0, 1]));
    assert!(err < 1e-6, "permute {err}");
    let err = fd_error(&[&[2, 5, 3]], 61, |g, v| g.slice(v[0], 1, 1, 3));
    assert!(err < 1e-6, "slice {err}");
    let err = fd_error(&[&[2, 2, 3], &[2, 1, 3]], 62, |g, v| g.concat(&[v[0], v[1], v[0]], 1));
    assert!(err < 1e-6, "concat {err}");
    let err = fd_error(&[&[3, 4]], 63, |g, v| {
        let sel = g.gather_last(v[0], &[Some(1), Some(1), Some(3), Some(0)])?;
        g.reshape(sel, &[12])
    });
    assert!(err < 1e-6, "gather {err}");
}

#[test]
fn gather_fills_missing_with_negative_infinity() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let y = g.gather_last(x, &[None, Some(0), Some(2)]).unwrap();
    assert_eq!(g.value(y), &[f64::NEG_INFINITY, 1.0, 3.0]);
    let lse = g.logsumexp(y, 0).unwrap();
    assert!((g.value(lse)[0] - (1f64.exp() + 3f64.exp()).ln()).abs() < 1e-14);
}

#[test]
fn logsumexp_of_all_negative_infinity_has_zero_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[0.0, 0.0]));
    let y = g.gather_last(x, &[None, None]).unwrap();
    let lse = g.logsumexp(y, 0).unwrap();
    assert_eq!(g.value(lse)[0], f64::NEG_INFINITY);
    let grads = g.gradients(lse).unwrap();
    assert_eq!(grads[0].1, vec![0.0, 0.0]);
}

#[test]
fn angular_margin_values_and_gradient() {
    let m = 0.2;
    let mut g = Graph::new();
    let c = g.constant(t(&[3], &[1.0, 0.0, -1.0]));
    let y = g.angular_margin(c, m);
    let v = g.value(y);
    assert!((v[0] - m.cos()).abs() < 1e-15);
    assert!((v[1] - (std::f64::consts::FRAC_PI_2 + m).cos()).abs() < 1e-15);
    assert!((v[2] - (-1.0 - m * m.sin())).abs() < 1e-15);
    let err = fd_error(&[&[7]], 70, |g, v| {
        let c = g.tanh(v[0]);
        Ok(g.angular_margin(c, 0.2))
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_of_sum_is_ones() {
    let mut ps = ParamSet::new();
    let id = ps.add("x", t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
    let mut g = Graph::new();
    let x = g.param(&ps, id);
    let s = g.sum_all(x);
    g.backward(s, &mut ps).unwrap();
    assert_eq!(ps.get(id).grad().unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn gradients_accumulate_across_graphs() {
    let mut ps = ParamSet::new();
    let id = ps.add("w", t(&[2], &[1.0, -1.0]).with_requires_grad(true));
    for scale in [2.0, 3.0] {
        let mut g = Graph::new();
        let w = g.param(&ps, id);
        let y = g.mul_scalar(w, scale);
        let s = g.sum_all(y);
        g.backward(s, &mut ps).unwrap();
    }
    assert_eq!(ps.get(id).grad().unwrap(), &[5.0, 5.0]);
}

#[test]
fn backward_errors() {
    let mut ps = ParamSet::new();
    let id = ps.add("w", t(&[2], &[1.0, 2.0]).with_requires_grad(true));
    let mut g = Graph::new();
    let w = g.param(&ps, id);
    assert!(matches!(g.backward(w, &mut ps), Err(TensorError::NonScalarLoss(_))));
    let s = g.sum_all(w);
    g.backward(s, &mut ps).unwrap();
    assert!(matches!(g.backward(s, &mut ps), Err(TensorError::BackwardTwice)));
}

#[test]
fn frozen_tensor_never_accumulates() {
    let mut ps = ParamSet::new();
    let id = ps.add("w", t(&[2], &[1.0, 2.0]));
    let mut g = Graph::new();
    let w = g.param(&ps, id);
    let s = g.sum_all(w);
    g.backward(s, &mut ps).unwrap();
    assert!(ps.get(id).grad().is_none());
    let mut lone = t(&[1], &[0.0]);
    lone.accumulate_grad(&[1.0]);
    assert!(lone.grad().is_none());
}

#[test]
fn finite_diff_check_examples() {
    let mut ps = ParamSet::new();
    let id = ps.add("x", t(&[1], &[3.0]).with_requires_grad(true));
    let err = finite_diff_check(&mut ps, &FdOptions::default(), |ps, g| {
        let x = g.param(ps, id);
        let sq = g.mul(x, x)?;
        Ok(g.sum_all(sq))
    })
    .unwrap();
    assert!(err < 1e-8, "{err}");
    let err = finite_diff_check(&mut ps, &FdOptions::default(), |_, g| {
        Ok(g.constant(Tensor::scalar(4.0)))
    })
    .unwrap();
    assert_eq!(err, 0.0);
    let nan = finite_diff_check(&mut ps, &FdOptions::default(), |_, g| {
        Ok(g.constant(Tensor::scalar(f64::NAN)))
    });
    assert!(matches!(nan, Err(TensorError::NonFinite(_))));
    let bad_eps = FdOptions {
        eps: 0.0,
        ..FdOptions::default()
    };
    assert!(finite_diff_check(&mut ps, &bad_eps, |_, g| Ok(g.constant(Tensor::scalar(1.0)))).is_err());
}

#[test]
fn finite_diff_check_restores_existing_grads() {
    let mut ps = ParamSet::new();
    let id = ps.add("x", t(&[1], &[3.0]).with_requires_grad(true));
    ps.get_mut(id).accumulate_grad(&[7.0]);
    finite_diff_check(&mut ps, &FdOptions::default(), |ps, g| {
        let x = g.param(ps, id);
        Ok(g.sum_all(x))
    })
    .unwrap();
    assert_eq!(ps.get(id).grad().unwrap(), &[7.0]);
    assert_eq!(ps.get(id).data(), &[3.0]);
}

#[test]
fn identical_inputs_give_bitwise_identical_outputs() {
    let run = || {
        let (ps, ids) = random_params(&[&[3, 8, 5], &[4, 5], &[4]], 99);
        let mut g = Graph::new();
        let x = g.param(&ps, ids[0]);
        let w = g.param(&ps, ids[1]);
        let h = g.matmul_nt(x, w).unwrap();
        let gamma = g.param(&ps, ids[2]);
        let beta = g.param(&ps, ids[2]);
        let n = g.layer_norm(h, gamma, beta, 1e-5).unwrap();
        g.value(n).to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn binary_ops_match_finite_difference(seed in 0u64..10_000, kind in 0usize..4) {
        let kind = [BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul, BinaryKind::Div][kind];
        let err = fd_error(&[&[2, 3], &[3]], seed, move |g, v| {
            // keep divisors away from zero
            let sq = g.mul(v[1], v[1])?;
            let b = g.add_scalar(sq, 0.5);
            g.elementwise(kind, v[0], Operand::Var(b))
        });
        prop_assert!(err < 1e-6, "{:?}: {}", kind, err);
    }

    #[test]
    fn softmax_sums_to_one(values in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
        let n = values.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![n], values).unwrap());
        let s = g.softmax(x, 0).unwrap();
        prop_assert!((g.value(s).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn mask_lengths_zeroes_tails() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 3, 2], &[1.0; 12]));
    let y = g.mask_lengths(x, 1, &[1, 3]).unwrap();
    assert_eq!(g.value(y), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    let z = g.mask_lengths(x, 2, &[1, 2]).unwrap();
    assert_eq!(g.value(z), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    assert!(g.mask_lengths(x, 0, &[1, 1]).is_err());
    assert!(g.mask_lengths(x, 1, &[1]).is_err());
    let err = fd_error(&[&[2, 4, 3]], 31, |g, v| g.mask_lengths(v[0], 1, &[2, 4]));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn param_gradients_match_backward_and_repeat() {
    let (mut params, ids) = random_params(&[&[2, 3], &[3]], 5);
    params.get_mut(ids[1]).set_requires_grad(false);
    let mut g = Graph::new();
    let a = g.param(&params, ids[0]);
    let b = g.param(&params, ids[1]);
    let a2 = g.param(&params, ids[0]);
    let p = g.mul(a, a2).unwrap();
    let q = g.add(p, b).unwrap();
    let q = g.tanh(q);
    let loss = g.sum_all(q);
    let first = g.param_gradients(loss, params.len()).unwrap();
    let second = g.param_gradients(loss, params.len()).unwrap();
    assert_eq!(first, second);
    assert!(first[1].is_none());
    g.backward(loss, &mut params).unwrap();
    assert_eq!(first[0].as_deref(), params.get(ids[0]).grad());
}
