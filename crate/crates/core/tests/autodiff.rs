use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sloshnet::gradcheck::GradCheck;
use sloshnet::{Error, Graph, Tensor, Var};

const OP_TOL: f64 = 1e-5;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Scalar readout `sum(w * y)` with fixed pseudo-random weights.
fn readout(g: &mut Graph, y: Var, seed: u64) -> sloshnet::Result<Var> {
    let w = g.constant(random(g.shape(y), seed ^ 0xabcd));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn t(shape: &[usize], values: &[f64]) -> Tensor {
    Tensor::from_f64(shape.to_vec(), values).unwrap()
}

fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> sloshnet::Result<Var>) -> f64 {
    GradCheck::default().check(inputs, f).unwrap().max_rel_error
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0]);

    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let err = check(&[random(&[4, 5], seed), random(&[5, 2], seed + 100)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            readout(g, y, seed)
        });
        assert!(err <= 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn transposed_and_batched_products() {
    for seed in 0..10 {
        let err = check(&[random(&[3, 4], seed), random(&[5, 4], seed + 1)], |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            readout(g, y, seed)
        });
        assert!(err <= OP_TOL, "matmul_nt seed {seed}: {err}");
        let err = check(&[random(&[2, 3, 4], seed), random(&[2, 4, 5], seed + 1)], |g, v| {
            let y = g.bmm(v[0], v[1])?;
            readout(g, y, seed)
        });
        assert!(err <= OP_TOL, "bmm seed {seed}: {err}");
        let err = check(&[random(&[2, 3, 4], seed), random(&[2, 5, 4], seed + 1)], |g, v| {
            let y = g.bmm_nt(v[0], v[1])?;
            readout(g, y, seed)
        });
        assert!(err <= OP_TOL, "bmm_nt seed {seed}: {err}");
    }
}

#[test]
fn conv3x3_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones([1, 1, 3, 3]));
    let k = g.constant(Tensor::ones([1, 1, 3, 3]));
    let y = g.conv3x3(x, k, 1).unwrap();
    assert_eq!(g.value(y).data()[4], 9.0);
    // corners see 4 taps, edges 6
    assert_eq!(g.value(y).data()[0], 4.0);
    assert_eq!(g.value(y).data()[1], 6.0);

    let mut delta = Tensor::zeros([1, 1, 5, 5]);
    delta.data_mut()[12] = 1.0;
    let mut center = Tensor::zeros([1, 1, 3, 3]);
    center.data_mut()[4] = 1.0;
    let x = g.constant(delta.clone());
    let k = g.constant(center);
    let y = g.conv3x3(x, k, 1).unwrap();
    assert!(g.value(y).bitwise_eq(&delta));
}

#[test]
fn conv3x3_output_extent_and_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([2, 4, 16, 16]));
    let k = g.constant(Tensor::zeros([64, 4, 3, 3]));
    let y = g.conv3x3(x, k, 4).unwrap();
    assert_eq!(g.shape(y), &[2, 64, 4, 4]);
    let bad = g.constant(Tensor::zeros([8, 3, 3, 3]));
    assert!(matches!(g.conv3x3(x, bad, 1), Err(Error::Dimension { .. })));
}

#[test]
fn conv3x3_gradient_matches_finite_differences() {
    for seed in 0..10 {
        for stride in [1, 2] {
            let err = check(&[random(&[2, 4, 8, 8], seed), random(&[3, 4, 3, 3], seed + 7)], |g, v| {
                let y = g.conv3x3(v[0], v[1], stride)?;
                readout(g, y, seed)
            });
            assert!(err <= 1e-6, "seed {seed} stride {stride}: {err}");
        }
    }
}

#[test]
fn depthwise_examples() {
    let x = random(&[2, 3, 5, 5], 3);
    let mut kernel = Tensor::zeros([3, 3, 3]);
    for c in 0..3 {
        kernel.data_mut()[c * 9 + 4] = 1.0;
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(kernel);
    let y = g.depthwise_conv3x3(xv, kv).unwrap();
    assert!(g.value(y).bitwise_eq(&x));

    // channel 1 zero in, channel 1 zero out
    let mut x = random(&[1, 2, 4, 4], 4);
    for v in &mut x.data_mut()[16..] {
        *v = 0.0;
    }
    let xv = g.constant(x);
    let kv = g.constant(random(&[2, 3, 3], 5));
    let y = g.depthwise_conv3x3(xv, kv).unwrap();
    assert!(g.value(y).data()[16..].iter().all(|&v| v == 0.0));

    let wrong = g.constant(Tensor::zeros([3, 3, 3]));
    assert!(matches!(g.depthwise_conv3x3(xv, wrong), Err(Error::Dimension { .. })));
}

#[test]
fn depthwise_equals_dense_conv_with_block_diagonal_kernel() {
    let x = random(&[1, 4, 6, 6], 11);
    let k = random(&[4, 3, 3], 12);
    let mut dense = Tensor::zeros([4, 4, 3, 3]);
    for c in 0..4 {
        for i in 0..9 {
            dense.data_mut()[(c * 4 + c) * 9 + i] = k.data()[c * 9 + i];
        }
    }
    let mut g = Graph::new();
    let xv = g.constant(x);
    let kv = g.constant(k);
    let dv = g.constant(dense);
    let a = g.depthwise_conv3x3(xv, kv).unwrap();
    let b = g.conv3x3(xv, dv, 1).unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)) <= 1e-12);
}

#[test]
fn depthwise_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let err = check(&[random(&[4, 3, 5, 5], seed), random(&[6, 3, 3], seed + 3)], |g, v| {
            let y = g.depthwise_conv3x3_grouped(v[0], v[1], 2)?;
            readout(g, y, seed)
        });
        assert!(err <= OP_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = g.softmax_lastdim(x);
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(t(&[3], &[2f64.ln(), 0.0, 0.0]));
    let y = g.softmax_lastdim(x);
    let want = [0.5, 0.25, 0.25];
    for (v, w) in g.value(y).data().iter().zip(want) {
        assert!((v - w).abs() < 1e-15);
    }
    let x = g.constant(t(&[3], &[1000.0, 0.0, 0.0]));
    let y = g.softmax_lastdim(x);
    let d = g.value(y).data();
    assert!(d.iter().all(|v| v.is_finite()));
    assert!((d[0] - 1.0).abs() < 1e-15 && d[1] < 1e-300);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::ones([4]));
    let bias = g.constant(Tensor::zeros([4]));
    let x = g.constant(Tensor::full([4], 3.5));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let gain = g.constant(Tensor::ones([2]));
    let bias = g.constant(Tensor::zeros([2]));
    let x = g.constant(t(&[2], &[-1.0, 1.0]));
    let y = g.layer_norm(x, gain, bias, 1e-300).unwrap();
    assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let err = check(&[random(&[3, 8], seed), random(&[8], seed + 1), random(&[8], seed + 2)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            readout(g, y, seed)
        });
        assert!(err <= 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1], &[0.0]));
    let s = g.sigmoid(x);
    assert_eq!(g.value(s).item(), 0.5);
    let ge = g.gelu(x);
    assert_eq!(g.value(ge).item(), 0.0);

    let x = g.constant(t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]));
    let p = g.global_avg_pool_spatial(x).unwrap();
    assert_eq!(g.shape(p), &[1, 2]);
    assert_eq!(g.value(p).data(), &[2.5, 0.0]);

    let x = g.constant(t(&[2], &[3.0, 4.0]));
    let n = g.l2_norm_lastdim(x);
    assert_eq!(g.value(n).item(), 5.0);
}

#[test]
fn gelu_uses_exact_gaussian_cdf() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[1.0, -0.5]));
    let y = g.gelu(x);
    // x * Phi(x) with Phi(1) = 0.841344746068543, Phi(-0.5) = 0.308537538725987
    assert!((g.value(y).data()[0] - 0.841_344_746_068_543).abs() < 1e-14);
    assert!((g.value(y).data()[1] + 0.5 * 0.308_537_538_725_987).abs() < 1e-14);
}

#[test]
fn binary_ops_reject_mismatched_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([3, 2]));
    assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    assert!(matches!(g.sub(a, b), Err(Error::Dimension { .. })));
    assert!(matches!(g.mul(a, b), Err(Error::Dimension { .. })));
    assert!(matches!(g.reshape(a, [4, 2]), Err(Error::Dimension { .. })));
}

#[test]
fn elementwise_suite_gradients_match_finite_differences() {
    for seed in 0..10 {
        let a = random(&[2, 3, 2, 2], seed);
        let b = random(&[2, 3, 2, 2], seed + 1);
        let gate = random(&[2, 3], seed + 2);
        let w = random(&[1], seed + 3);
        let cases: Vec<(&str, f64)> = vec![
            ("add/sub/mul", check(&[a.clone(), b.clone()], |g, v| {
                let s = g.add(v[0], v[1])?;
                let d = g.sub(v[0], v[1])?;
                let p = g.mul(s, d)?;
                readout(g, p, seed)
            })),
            ("scale/sigmoid/gelu", check(std::slice::from_ref(&a), |g, v| {
                let s = g.scale(v[0], 1.7);
                let y = g.sigmoid(s);
                let z = g.gelu(v[0]);
                let p = g.mul(y, z)?;
                readout(g, p, seed)
            })),
            ("pool/mul_channel", check(&[a.clone(), gate.clone()], |g, v| {
                let p = g.global_avg_pool_spatial(v[0])?;
                let q = g.mul(p, v[1])?;
                let m = g.mul_channel(v[0], q)?;
                readout(g, m, seed)
            })),
            ("mix", check(&[a.clone(), b.clone(), w.clone()], |g, v| {
                let m = g.mix(v[0], v[1], v[2])?;
                let m2 = g.mul(m, m)?;
                readout(g, m2, seed)
            })),
            ("scale_by", check(&[a.clone(), gate.clone()], |g, v| {
                let m = g.scale_by(v[0], v[1], 4)?;
                readout(g, m, seed)
            })),
            ("concat/narrow/reshape/permute", check(&[a.clone(), b.clone()], |g, v| {
                let c = g.concat_time(&[v[0], v[1]])?;
                let n = g.narrow(c, 1, 2, 3)?;
                let r = g.reshape(n, [2, 3, 4])?;
                let p = g.permute(r, &[2, 0, 1])?;
                let tr = g.transpose(p, 0, 2)?;
                readout(g, tr, seed)
            })),
            ("mean/l2norm/mean_lastdim", check(std::slice::from_ref(&a), |g, v| {
                let n = g.l2_norm_lastdim(v[0]);
                let m = g.mean_lastdim(n);
                let s = g.mul(m, m)?;
                let t = g.mean(s);
                let u = g.sum(v[0]);
                let both = g.concat(&[t, u], 0)?;
                readout(g, both, seed)
            })),
            ("bias/gather/cross_entropy", check(&[random(&[5, 4], seed), random(&[4], seed + 5)], |g, v| {
                let x = g.add_bias(v[0], v[1])?;
                let r = g.gather_rows(x, &[4, 0, 0, 2])?;
                g.cross_entropy(r, &[1, 3, 0, 2])
            })),
            ("channel_bias/softmax", check(&[a.clone(), random(&[3], seed + 6)], |g, v| {
                let x = g.add_channel_bias(v[0], v[1])?;
                let s = g.softmax_lastdim(x);
                readout(g, s, seed)
            })),
        ];
        for (name, err) in cases {
            assert!(err <= OP_TOL, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[0.3, -1.0, 2.0]));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros([2]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::ones([2]));
    let p = g.param(Tensor::ones([2]));
    let y = g.mul(c, p).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert!(grads.get(p).is_some());
}

#[test]
fn gradient_is_linear_in_the_loss() {
    let x0 = random(&[3, 4], 9);
    let build = |g: &mut Graph, x: Var| -> (Var, Var) {
        let a = g.gelu(x);
        let l1 = readout(g, a, 1).unwrap();
        let s = g.softmax_lastdim(x);
        let l2 = readout(g, s, 2).unwrap();
        (l1, l2)
    };
    let grad_of = |which: u8| {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let (l1, l2) = build(&mut g, x);
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        g.backward(loss).unwrap().get(x).unwrap().clone()
    };
    let (g1, g2, g12) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..g12.numel() {
        assert!((g12.data()[i] - g1.data()[i] - g2.data()[i]).abs() <= 1e-12);
    }
}

#[test]
fn finite_difference_noise_floor_exceeds_machine_precision() {
    // The cli gradcheck relies on a 1e-12 tolerance being unattainable.
    let err = check(&[random(&[3, 8], 1), random(&[8], 2), random(&[8], 3)], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        let z = g.gelu(y);
        readout(g, z, 4)
    });
    assert!(err > 1e-12, "{err}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_are_permutation_equivariant(
        values in prop::collection::vec(-30.0f64..30.0, 2..9),
        rot in 0usize..8,
    ) {
        let n = values.len();
        let rot = rot % n;
        let mut permuted = values.clone();
        permuted.rotate_left(rot);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([n], values).unwrap());
        let xp = g.constant(Tensor::new([n], permuted).unwrap());
        let y = g.softmax_lastdim(x);
        let yp = g.softmax_lastdim(xp);
        let total: f64 = g.value(y).data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(g.value(y).data().iter().all(|&v| v > 0.0));
        let mut rotated = g.value(y).data().to_vec();
        rotated.rotate_left(rot);
        for (a, b) in rotated.iter().zip(g.value(yp).data()) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn reshape_round_trip_is_bitwise_identity(
        dims in prop::collection::vec(1usize..5, 1..5),
        seed in 0u64..1000,
    ) {
        let x = random(&dims, seed);
        let n = x.numel();
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let flat = g.reshape(v, [n]).unwrap();
        let back = g.reshape(flat, dims.clone()).unwrap();
        prop_assert!(g.value(back).bitwise_eq(&x));
    }
}
