use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::LsptError;

const H: f64 = 1e-5;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

/// Contracts an output with a fixed random weighting so every output
/// coordinate contributes a distinct amount to the scalar.
fn weighted_sum<'a>(g: &mut Graph<'a, f64>, y: Var, seed: u64) -> crate::Result<Var> {
    let w = rand_t(g.shape(y), seed ^ 0xabcd);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_identity_and_orthogonal_rows() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let m = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
    let b = g.constant(Tensor::from_rows(&[vec![0.0], vec![5.0]]));
    let p = g.matmul(a, b).unwrap();
    assert_eq!(g.value(p).data(), &[0.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(LsptError::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let a = rand_t(&[3, 4], seed);
        let b = rand_t(&[4, 2], seed + 100);
        let r = grad_check_many(
            |g, v| {
                let c = g.matmul(v[0], v[1])?;
                weighted_sum(g, c, seed)
            },
            &[a, b],
            H,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "seed {seed}: rel {}", r.max_rel_err);
    }
}

#[test]
fn softmax_symmetry_and_overflow() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]));
    let s = g.softmax_rows(x).unwrap();
    let v: &[f64] = g.value(s).data();
    assert_eq!(&v[..2], &[0.5, 0.5]);
    assert!((v[2] - 1.0).abs() <= 1e-12);
    assert!(v[3].abs() <= 1e-12);
}

#[test]
fn softmax_rejects_nan() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![f64::NAN, 0.0]]));
    assert!(matches!(g.softmax_rows(x), Err(LsptError::Numeric(_))));
}

#[test]
fn softmax_rows_sum_to_one_and_gradient_checks() {
    for seed in 0..20 {
        let x = rand_t(&[2, 5], seed);
        let mut g = Graph::new();
        let v = g.constant(x.clone().map(|v| v * 30.0));
        let s = g.softmax_rows(v).unwrap();
        for r in 0..2 {
            let sum: f64 = g.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
        let r = grad_check(
            |g, v| {
                let s = g.softmax_rows(v)?;
                weighted_sum(g, s, seed)
            },
            &x,
            H,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "seed {seed}: rel {}", r.max_rel_err);
    }
}

#[test]
fn layernorm_constant_row_and_zero_gamma() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![2.5, 2.5, 2.5]]));
    let one = g.constant(Tensor::full(&[3], 1.0));
    let zero = g.constant(Tensor::zeros(&[3]));
    let y = g.layernorm(x, one, zero, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

    let x = g.constant(Tensor::from_rows(&[vec![1.0, -4.0, 7.0]]));
    let b = g.constant(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
    let y = g.layernorm(x, zero, b, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3]);
}

#[test]
fn layernorm_gradient_checks_all_inputs() {
    for seed in 0..20 {
        let x = rand_t(&[3, 6], seed);
        let gamma = rand_t(&[6], seed + 1);
        let beta = rand_t(&[6], seed + 2);
        let r = grad_check_many(
            |g, v| {
                let y = g.layernorm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(g, y, seed)
            },
            &[x, gamma, beta],
            H,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "seed {seed}: rel {}", r.max_rel_err);
    }
}

#[test]
fn elementwise_values_at_zero() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z);
    let t = g.tanh(z);
    let e = g.gelu(z);
    assert_eq!(g.value(s).data(), &[0.5]);
    assert_eq!(g.value(t).data(), &[0.0]);
    assert_eq!(g.value(e).data(), &[0.0]);
}

#[test]
fn gelu_matches_tanh_approximation_formula() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3], vec![-1.5, 0.3, 2.0]).unwrap());
    let y = g.gelu(x);
    for (&u, &v) in [-1.5f64, 0.3, 2.0].iter().zip(g.value(y).data()) {
        let expect = 0.5 * u * (1.0 + (0.7978845608 * (u + 0.044715 * u.powi(3))).tanh());
        assert!((expect - v).abs() < 1e-10);
    }
}

#[test]
fn elementwise_gradients_check() {
    for seed in 0..20 {
        let x = rand_t(&[4, 3], seed);
        let y = rand_t(&[4, 3], seed + 7);
        let row = rand_t(&[3], seed + 9);
        let r = grad_check(
            |g, v| {
                let e = g.gelu(v);
                weighted_sum(g, e, seed)
            },
            &x,
            H,
            1e-5,
        )
        .unwrap();
        assert!(r.passed(), "gelu seed {seed}: rel {}", r.max_rel_err);

        let r = grad_check_many(
            |g, v| {
                let s = g.sigmoid(v[0]);
                let t = g.tanh(v[1]);
                let m = g.mul(s, t)?;
                let a = g.add(m, v[2])?;
                let b = g.sub(a, v[1])?;
                let c = g.mul(b, v[2])?;
                weighted_sum(g, c, seed)
            },
            &[x.clone(), y.clone(), row.clone()],
            H,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "mixed seed {seed}: rel {}", r.max_rel_err);
    }
}

#[test]
fn broadcasting_is_limited_to_rows_and_scalars() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let col = g.constant(Tensor::zeros(&[2, 1]));
    assert!(matches!(g.add(a, col), Err(LsptError::Dimension { .. })));
    let row = g.constant(Tensor::full(&[1, 3], 2.0));
    let s = g.constant(Tensor::scalar(3.0));
    let r = g.add(a, row).unwrap();
    let r = g.mul(r, s).unwrap();
    assert_eq!(g.value(r).data(), &[6.0; 6]);
}

#[test]
fn mean_over_rows_values_and_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]));
    let m = g.mean_over_rows(x).unwrap();
    assert_eq!(g.value(m).data(), &[1.0, 1.0]);
    assert_eq!(g.shape(m), &[1, 2]);

    let single = g.constant(Tensor::from_rows(&[vec![0.25, -3.0]]));
    let m = g.mean_over_rows(single).unwrap();
    assert_eq!(g.value(m).data(), &[0.25, -3.0]);

    let empty = g.constant(Tensor::zeros(&[0, 2]));
    assert!(matches!(
        g.mean_over_rows(empty),
        Err(LsptError::EmptyInput(_))
    ));
}

#[test]
fn mean_over_rows_gradient_checks() {
    for seed in 0..20 {
        let x = rand_t(&[5, 3], seed);
        let r = grad_check(
            |g, v| {
                let m = g.mean_over_rows(v)?;
                weighted_sum(g, m, seed)
            },
            &x,
            H,
            1e-8,
        )
        .unwrap();
        assert!(r.passed(), "seed {seed}: rel {}", r.max_rel_err);
    }
}

#[test]
fn concat_then_split_is_bitwise_identity() {
    let c = rand_t(&[1, 4], 1);
    let p = rand_t(&[3, 4], 2);
    let x = rand_t(&[5, 4], 3);
    let mut g = Graph::new();
    let vars = [g.constant(c.clone()), g.constant(p.clone()), g.constant(x.clone())];
    let cat = g.concat_rows(&vars).unwrap();
    let parts = g.split_rows(cat, &[1, 3, 5]).unwrap();
    assert_eq!(g.value(parts[0]), &c);
    assert_eq!(g.value(parts[1]), &p);
    assert_eq!(g.value(parts[2]), &x);
    assert!(matches!(
        g.split_rows(cat, &[1, 3, 4]),
        Err(LsptError::Dimension { .. })
    ));
}

#[test]
fn empty_prompt_segment_is_transparent() {
    let c = rand_t(&[1, 4], 1);
    let x = rand_t(&[5, 4], 3);
    let mut g = Graph::new();
    let (cv, ev, xv) = (
        g.constant(c.clone()),
        g.constant(Tensor::zeros(&[0, 4])),
        g.constant(x.clone()),
    );
    let with_empty = g.concat_rows(&[cv, ev, xv]).unwrap();
    let without = g.concat_rows(&[cv, xv]).unwrap();
    assert_eq!(g.value(with_empty), g.value(without));
    let parts = g.split_rows(with_empty, &[1, 0, 5]).unwrap();
    assert_eq!(g.shape(parts[1]), &[0, 4]);
    assert_eq!(g.value(parts[2]), &x);
}

#[test]
fn split_then_sum_gradient_is_all_ones() {
    let x = rand_t(&[6, 3], 11);
    let r = grad_check(
        |g, v| {
            let parts = g.split_rows(v, &[1, 2, 3])?;
            let sums: Vec<Var> = parts.iter().map(|&p| g.sum(p)).collect();
            let ab = g.add(sums[0], sums[1])?;
            g.add(ab, sums[2])
        },
        &x,
        H,
        1e-8,
    )
    .unwrap();
    assert!(r.analytic.iter().all(|&a| a == 1.0));
    assert!(r.passed());
}

#[test]
fn column_slicing_round_trips_with_gradients() {
    for seed in 0..20 {
        let x = rand_t(&[3, 6], seed);
        let r = grad_check(
            |g, v| {
                let a = g.slice_cols(v, 0, 2)?;
                let b = g.slice_cols(v, 2, 4)?;
                let bt = g.transpose(b)?;
                let bt = g_shape_fix(g, bt)?;
                let p = g.matmul(a, bt)?;
                let cat = g.concat_cols(&[p, a])?;
                weighted_sum(g, cat, seed)
            },
            &x,
            H,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "seed {seed}: rel {}", r.max_rel_err);
    }
}

/// `[4×3] → [2×3]` via a row slice, so the product above is `[3×2]·[2×3]`.
fn g_shape_fix(g: &mut Graph<'_, f64>, bt: Var) -> crate::Result<Var> {
    g.slice_rows(bt, 1, 2)
}

#[test]
fn cross_entropy_values() {
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::zeros(&[1, 4]));
    let ce = g.cross_entropy(l, &[2]).unwrap();
    assert!((g.value(ce).data()[0] - 4f64.ln()).abs() < 1e-15);

    let mut last = f64::INFINITY;
    for margin in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let l = g.constant(Tensor::from_rows(&[vec![margin, 0.0, 0.0]]));
        let ce = g.cross_entropy(l, &[0]).unwrap();
        let v = g.value(ce).data()[0];
        assert!(v < last);
        last = v;
    }

    let l = g.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(
        g.cross_entropy(l, &[3]),
        Err(LsptError::Label { label: 3, classes: 3 })
    ));
}

#[test]
fn cross_entropy_gradient_checks() {
    for seed in 0..20 {
        let x = rand_t(&[2, 3], seed);
        let labels = [(seed % 3) as usize, ((seed + 1) % 3) as usize];
        let r = grad_check(|g, v| g.cross_entropy(v, &labels), &x, H, 1e-7).unwrap();
        assert!(r.passed(), "seed {seed}: rel {}", r.max_rel_err);
    }
}

#[test]
fn backward_of_sum_and_unreachable_leaf() {
    let mut g = Graph::new();
    let x = g.leaf(rand_t(&[2, 3], 1), true);
    let y = g.leaf(rand_t(&[4], 2), true);
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    assert_eq!(grads.get(y).unwrap().data(), &[0.0; 4]);
}

#[test]
fn backward_rejects_non_scalar_and_second_call() {
    let mut g = Graph::new();
    let x = g.leaf(rand_t(&[2, 3], 1), true);
    assert!(matches!(g.backward(x), Err(LsptError::Contract(_))));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(LsptError::Contract(_))));
}

#[test]
fn composite_mlp_gradient_checks() {
    for seed in 0..20 {
        let x = rand_t(&[4, 5], seed);
        let w1 = rand_t(&[5, 6], seed + 1);
        let b1 = rand_t(&[6], seed + 2);
        let w2 = rand_t(&[6, 3], seed + 3);
        let gamma = rand_t(&[5], seed + 4);
        let beta = rand_t(&[5], seed + 5);
        let labels = [0, 2, 1, 2];
        let r = grad_check_many(
            |g, v| {
                let n = g.layernorm(v[0], v[4], v[5], 1e-5)?;
                let h = g.matmul(n, v[1])?;
                let h = g.add(h, v[2])?;
                let h = g.gelu(h);
                let o = g.matmul(h, v[3])?;
                g.cross_entropy(o, &labels)
            },
            &[x, w1, b1, w2, gamma, beta],
            H,
            1e-5,
        )
        .unwrap();
        assert!(r.passed(), "seed {seed}: rel {}", r.max_rel_err);
    }
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let w = rand_t(&[3, 3], 4);
    let mut g = Graph::new();
    let x = g.leaf(rand_t(&[2, 3], 5), true);
    let wv = g.constant_ref(&w);
    let y = g.matmul(x, wv).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(wv).is_none());
    assert!(grads.get(x).is_some());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_normalize(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
            let s = g.softmax_rows(x).unwrap();
            for r in 0..3 {
                let row = g.value(s).row(r);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn concat_split_identity(a in 0usize..4, b in 0usize..4, c in 1usize..4, seed in 0u64..1000) {
            let parts = [rand_t(&[a, 3], seed), rand_t(&[b, 3], seed + 1), rand_t(&[c, 3], seed + 2)];
            let mut g = Graph::new();
            let vars: Vec<Var> = parts.iter().map(|p| g.constant(p.clone())).collect();
            let cat = g.concat_rows(&vars).unwrap();
            let back = g.split_rows(cat, &[a, b, c]).unwrap();
            for (v, p) in back.iter().zip(&parts) {
                prop_assert_eq!(g.value(*v), p);
            }
        }
    }
}

/// Per-head attention built from primitive ops.
fn unfused_attention(g: &mut Graph<'_, f64>, qkv: Var, heads: usize) -> crate::Result<Var> {
    let d = g.value(qkv).cols() / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::new();
    for h in 0..heads {
        let q = g.slice_cols(qkv, h * dh, dh)?;
        let k = g.slice_cols(qkv, d + h * dh, dh)?;
        let v = g.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, scale);
        let a = g.softmax_rows(s)?;
        outs.push(g.matmul(a, v)?);
    }
    g.concat_cols(&outs)
}

#[test]
fn linear_matches_matmul_plus_bias() {
    for seed in 0..5 {
        let (x, w, b) = (rand_t(&[5, 4], seed), rand_t(&[4, 3], seed + 1), rand_t(&[3], seed + 2));
        let mut g = Graph::new();
        let (x, w, b) = (g.constant(x), g.constant(w), g.constant(b));
        let fused = g.linear(x, w, b).unwrap();
        let m = g.matmul(x, w).unwrap();
        let plain = g.add(m, b).unwrap();
        for (a, b) in g.value(fused).data().iter().zip(g.value(plain).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_rejects_bad_bias() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let w = g.constant(Tensor::zeros(&[3, 4]));
    let b = g.constant(Tensor::zeros(&[3]));
    assert!(g.linear(x, w, b).is_err());
}

#[test]
fn linear_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let xs = [rand_t(&[3, 4], seed), rand_t(&[4, 2], seed + 50), rand_t(&[2], seed + 90)];
        let r = grad_check_many(
            |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                // Reuse x so its gradient slot is accumulated into.
                let z = g.linear(v[0], v[1], v[2])?;
                let y = g.mul(y, z)?;
                weighted_sum(g, y, seed)
            },
            &xs,
            H,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "seed {seed}: rel {}", r.max_rel_err);
    }
}

#[test]
fn fused_attention_matches_primitive_ops() {
    for (seed, heads) in [(0u64, 1usize), (1, 2), (2, 3)] {
        let qkv = rand_t(&[5, 3 * 2 * heads], seed);
        let mut g = Graph::new();
        let x = g.constant(qkv);
        let (y, w) = g.attention(x, heads).unwrap();
        let r = unfused_attention(&mut g, x, heads).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(r).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(g.shape(w), &[heads, 5, 5]);
        for row in g.value(w).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(!g.requires_grad(w));
    }
}

#[test]
fn attention_rejects_bad_width() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[3, 8]));
    assert!(g.attention(x, 2).is_err());
    let x = g.constant(Tensor::zeros(&[3, 12]));
    assert!(g.attention(x, 0).is_err());
}

#[test]
fn attention_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let heads = 1 + (seed as usize % 2);
        let x = rand_t(&[4, 3 * 2 * heads], seed);
        let r = grad_check(
            |g, v| {
                let (y, _) = g.attention(v, heads)?;
                // A second use of the input exercises accumulation.
                let s = g.slice_cols(v, 0, 2 * heads)?;
                let y = g.add(y, s)?;
                weighted_sum(g, y, seed)
            },
            &x,
            H,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "seed {seed}: rel {}", r.max_rel_err);
    }
}

#[test]
fn attention_gradient_matches_primitive_ops() {
    let x = rand_t(&[6, 12], 7);
    let grad = |fused: bool| {
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true);
        let y = if fused { g.attention(v, 2).unwrap().0 } else { unfused_attention(&mut g, v, 2).unwrap() };
        let l = weighted_sum(&mut g, y, 3).unwrap();
        g.backward(l).unwrap().take(v).unwrap()
    };
    for (a, b) in grad(true).data().iter().zip(grad(false).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_over_empty_sequence() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[0, 12]), true);
    let (y, w) = g.attention(x, 2).unwrap();
    assert_eq!(g.shape(y), &[0, 4]);
    assert_eq!(g.shape(w), &[2, 0, 0]);
}
