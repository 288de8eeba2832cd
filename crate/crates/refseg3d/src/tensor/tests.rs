use super::*;
use proptest::prelude::*;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let dist = Uniform::new(-1.0, 1.0);
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= tol,
            "index {i}: {x} vs {y} (tol {tol})"
        );
    }
}

/// Reference product, written independently of the tape implementation:
/// plain i-j-k triple loop, innermost accumulation over the shared axis.
fn matmul_oracle(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for j in 0..r {
            let mut s = 0.0;
            for k in 0..q {
                s += a[i * q + k] * b[k * r + j];
            }
            out[i * r + j] = s;
        }
    }
    out
}

// ── matmul ──────────────────────────────────────────────────────────

#[test]
fn matmul_identity() {
    let tape = Tape::new();
    let a = tape
        .constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3])
        .unwrap();
    let eye = tape
        .constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![3, 3])
        .unwrap();
    let c = a.matmul(&eye).unwrap();
    assert_eq!(c.data(), a.data());
}

#[test]
fn matmul_small_known() {
    let tape = Tape::new();
    let a = tape.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
    let b = tape.constant(vec![0.0, 1.0], vec![2, 1]).unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), vec![2, 1]);
    assert_eq!(c.data(), vec![2.0, 4.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(p, q, r) in &[(1, 1, 1), (3, 4, 5), (7, 2, 9), (8, 16, 8)] {
        let tape = Tape::new();
        let ad = rand_vec(&mut rng, p * q);
        let bd = rand_vec(&mut rng, q * r);
        let a = tape.constant(ad.clone(), vec![p, q]).unwrap();
        let b = tape.constant(bd.clone(), vec![q, r]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_close(&c.data(), &matmul_oracle(&ad, &bd, p, q, r), 1e-12);
    }
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(vec![0.0; 6], vec![2, 3]).unwrap();
    let b = tape.constant(vec![0.0; 8], vec![4, 2]).unwrap();
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn tape_mismatch_rejected() {
    let t1 = Tape::new();
    let t2 = Tape::new();
    let a = t1.constant(vec![1.0], vec![1, 1]).unwrap();
    let b = t2.constant(vec![1.0], vec![1, 1]).unwrap();
    assert!(matches!(
        a.matmul(&b),
        Err(TensorError::TapeMismatch { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_associativity(seed in 0u64..1_000, p in 1usize..5, q in 1usize..5,
                            r in 1usize..5, s in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let a = tape.constant(rand_vec(&mut rng, p * q), vec![p, q]).unwrap();
        let b = tape.constant(rand_vec(&mut rng, q * r), vec![q, r]).unwrap();
        let c = tape.constant(rand_vec(&mut rng, r * s), vec![r, s]).unwrap();
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..1_000, rows in 1usize..6, cols in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let x = tape.constant(rand_vec(&mut rng, rows * cols), vec![rows, cols]).unwrap();
        // Mask a few entries, but always keep column 0.
        let keep: Vec<bool> = (0..rows * cols).map(|i| i % cols == 0 || i % 3 != 1).collect();
        let m = x.masked_fill(&keep, f64::NEG_INFINITY).unwrap();
        let sm = m.softmax(1).unwrap();
        let d = sm.data();
        for i in 0..rows {
            let s: f64 = d[i * cols..(i + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            for j in 0..cols {
                if !keep[i * cols + j] {
                    prop_assert_eq!(d[i * cols + j], 0.0);
                }
            }
        }
    }
}

// ── softmax ─────────────────────────────────────────────────────────

#[test]
fn softmax_uniform_on_equal_inputs() {
    let tape = Tape::new();
    let x = tape.constant(vec![0.0, 0.0, 0.0], vec![3]).unwrap();
    let s = x.softmax(0).unwrap();
    assert_close(&s.data(), &[1.0 / 3.0; 3], 1e-15);
}

#[test]
fn softmax_neg_inf_is_exact_zero() {
    let tape = Tape::new();
    let x = tape
        .constant(vec![f64::NEG_INFINITY, 0.0], vec![2])
        .unwrap();
    let s = x.softmax(0).unwrap();
    assert_eq!(s.data(), vec![0.0, 1.0]);
}

#[test]
fn softmax_large_inputs_stay_finite() {
    let tape = Tape::new();
    let big = tape.constant(vec![1000.0, 1001.0], vec![2]).unwrap();
    let small = tape.constant(vec![0.0, 1.0], vec![2]).unwrap();
    let sb = big.softmax(0).unwrap().data();
    let ss = small.softmax(0).unwrap().data();
    assert_close(&sb, &ss, 1e-15);
}

#[test]
fn softmax_shift_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let xd = rand_vec(&mut rng, 12);
    let x = tape.constant(xd.clone(), vec![3, 4]).unwrap();
    let shifted = tape
        .constant(xd.iter().map(|v| v + 7.5).collect(), vec![3, 4])
        .unwrap();
    assert_close(
        &x.softmax(1).unwrap().data(),
        &shifted.softmax(1).unwrap().data(),
        1e-12,
    );
}

#[test]
fn softmax_all_masked_lane_is_error() {
    let tape = Tape::new();
    let x = tape.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
    let m = x
        .masked_fill(&[true, true, false, false], f64::NEG_INFINITY)
        .unwrap();
    let err = m.softmax(1).unwrap_err();
    assert!(matches!(err, TensorError::DegenerateSoftmaxLane { lane: 1 }));
}

#[test]
fn softmax_column_axis() {
    let tape = Tape::new();
    let x = tape
        .constant(vec![0.0, 10.0, 0.0, 10.0, 0.0, 10.0], vec![3, 2])
        .unwrap();
    let s = x.softmax(0).unwrap().data();
    for j in 0..2 {
        let col_sum: f64 = (0..3).map(|i| s[i * 2 + j]).sum();
        assert!((col_sum - 1.0).abs() <= 1e-12);
    }
    assert_close(&s[0..2], &[1.0 / 3.0, 1.0 / 3.0], 1e-12);
}

// ── elementwise and structure ops ───────────────────────────────────

#[test]
fn linear_identity_weight_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tape = Tape::new();
    let xd = rand_vec(&mut rng, 6);
    let x = tape.constant(xd.clone(), vec![2, 3]).unwrap();
    let eye = tape
        .constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![3, 3])
        .unwrap();
    let zero_bias = tape.constant(vec![0.0; 3], vec![3]).unwrap();
    let y = x.linear(&eye, Some(&zero_bias)).unwrap();
    assert_eq!(y.data(), xd);
}

#[test]
fn linear_zero_input_gives_bias_rows() {
    let tape = Tape::new();
    let x = tape.constant(vec![0.0; 6], vec![2, 3]).unwrap();
    let w = tape.constant(vec![0.5; 12], vec![3, 4]).unwrap();
    let b = tape.constant(vec![1.0, -2.0, 3.0, 0.25], vec![4]).unwrap();
    let y = x.linear(&w, Some(&b)).unwrap();
    assert_eq!(y.data(), vec![1.0, -2.0, 3.0, 0.25, 1.0, -2.0, 3.0, 0.25]);
}

#[test]
fn transpose_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tape = Tape::new();
    let xd = rand_vec(&mut rng, 15);
    let x = tape.constant(xd.clone(), vec![3, 5]).unwrap();
    let tt = x.transpose().unwrap().transpose().unwrap();
    assert_eq!(tt.shape(), vec![3, 5]);
    assert_eq!(tt.data(), xd);
}

#[test]
fn sum_axis_matches_manual() {
    let tape = Tape::new();
    let x = tape
        .constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3])
        .unwrap();
    assert_eq!(x.sum_axis(0).unwrap().data(), vec![5.0, 7.0, 9.0]);
    assert_eq!(x.sum_axis(1).unwrap().data(), vec![6.0, 15.0]);
}

#[test]
fn sigmoid_extremes_are_stable() {
    let tape = Tape::new();
    let x = tape.constant(vec![-800.0, 0.0, 800.0], vec![3]).unwrap();
    let s = x.sigmoid().unwrap().data();
    assert_eq!(s[0], 0.0);
    assert_eq!(s[1], 0.5);
    assert_eq!(s[2], 1.0);
}

#[test]
fn division_by_zero_is_an_error_not_inf() {
    let tape = Tape::new();
    let a = tape.constant(vec![1.0], vec![1]).unwrap();
    let b = tape.constant(vec![0.0], vec![1]).unwrap();
    assert!(matches!(a.div(&b), Err(TensorError::NonFinite { .. })));
}

#[test]
fn logsumexp_matches_naive_and_survives_large_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tape = Tape::new();
    let xd = rand_vec(&mut rng, 6);
    let x = tape.constant(xd.clone(), vec![6]).unwrap();
    let naive = xd.iter().map(|v| v.exp()).sum::<f64>().ln();
    assert!((x.logsumexp().unwrap().value() - naive).abs() <= 1e-12);

    let big = tape.constant(vec![1000.0, 1000.0], vec![2]).unwrap();
    let v = big.logsumexp().unwrap().value();
    assert!((v - (1000.0 + 2f64.ln())).abs() <= 1e-9);
}

#[test]
fn bce_with_logits_survives_extreme_logits() {
    let tape = Tape::new();
    let x = tape.constant(vec![1000.0, -1000.0], vec![2]).unwrap();
    // Targets match the saturated predictions; loss should be ~0, not NaN.
    let loss = x.bce_with_logits_mean(&[1.0, 0.0]).unwrap();
    assert!(loss.value().abs() < 1e-12);
    // And opposing targets give |x| on average.
    let loss2 = x.bce_with_logits_mean(&[0.0, 1.0]).unwrap();
    assert!((loss2.value() - 1000.0).abs() < 1e-9);
}

// ── backward ────────────────────────────────────────────────────────

#[test]
fn backward_of_sum_is_ones() {
    let tape = Tape::new();
    let x = tape.leaf(vec![3.0, -1.0, 2.5, 0.0], vec![4], true).unwrap();
    let loss = x.sum_all().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
}

#[test]
fn backward_of_sum_of_squares() {
    let tape = Tape::new();
    let x = tape.leaf(vec![1.0, 2.0, 3.0], vec![3], true).unwrap();
    let loss = x.mul(&x).unwrap().sum_all().unwrap();
    assert_eq!(loss.value(), 14.0);
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
}

#[test]
fn backward_twice_without_reset_is_error() {
    let tape = Tape::new();
    let x = tape.leaf(vec![1.0], vec![1], true).unwrap();
    let loss = x.sum_all().unwrap();
    loss.backward().unwrap();
    assert!(matches!(
        loss.backward(),
        Err(TensorError::BackwardAlreadyRan)
    ));
    tape.zero_grad();
    assert!(x.grad().is_none());
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0]);
}

#[test]
fn backward_on_non_scalar_is_error() {
    let tape = Tape::new();
    let x = tape.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
    assert!(matches!(
        x.backward(),
        Err(TensorError::NonScalarLoss { .. })
    ));
}

#[test]
fn backward_detects_nan_anywhere_in_graph() {
    let tape = Tape::new();
    let _poison = tape.leaf(vec![f64::NAN], vec![1], true).unwrap();
    let x = tape.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
    let loss = x.sum_all().unwrap();
    assert!(matches!(
        loss.backward(),
        Err(TensorError::NanInGraph { node: 0 })
    ));
}

#[test]
fn matmul_backward_matches_analytic() {
    // loss = sum(A B); dA = 1 B^T, dB = A^T 1.
    let tape = Tape::new();
    let ad = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let bd = vec![0.5, -1.0, 2.0, 1.5, -0.5, 1.0];
    let a = tape.leaf(ad.clone(), vec![2, 3], true).unwrap();
    let b = tape.leaf(bd.clone(), vec![3, 2], true).unwrap();
    let loss = a.matmul(&b).unwrap().sum_all().unwrap();
    loss.backward().unwrap();
    let ga = a.grad().unwrap();
    let gb = b.grad().unwrap();
    for i in 0..2 {
        for k in 0..3 {
            let expect: f64 = bd[k * 2] + bd[k * 2 + 1];
            assert!((ga[i * 3 + k] - expect).abs() <= 1e-12);
        }
    }
    for k in 0..3 {
        for j in 0..2 {
            let expect: f64 = ad[k] + ad[3 + k];
            assert!((gb[k * 2 + j] - expect).abs() <= 1e-12);
        }
    }
}

#[test]
fn softmax_backward_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let xd = rand_vec(&mut rng, 8);
    let wd = rand_vec(&mut rng, 8);
    let run = |x: &[f64]| -> f64 {
        let tape = Tape::new();
        let xt = tape.constant(x.to_vec(), vec![2, 4]).unwrap();
        let w = tape.constant(wd.clone(), vec![2, 4]).unwrap();
        xt.softmax(1).unwrap().mul(&w).unwrap().sum_all().unwrap().value()
    };
    let tape = Tape::new();
    let x = tape.leaf(xd.clone(), vec![2, 4], true).unwrap();
    let w = tape.constant(wd.clone(), vec![2, 4]).unwrap();
    let loss = x.softmax(1).unwrap().mul(&w).unwrap().sum_all().unwrap();
    loss.backward().unwrap();
    let g = x.grad().unwrap();
    let h = 1e-6;
    for i in 0..8 {
        let mut plus = xd.clone();
        plus[i] += h;
        let mut minus = xd.clone();
        minus[i] -= h;
        let fd = (run(&plus) - run(&minus)) / (2.0 * h);
        assert!((g[i] - fd).abs() <= 1e-8, "index {i}: {} vs {fd}", g[i]);
    }
}

#[test]
fn gather_rows_backward_scatter_adds_duplicates() {
    let tape = Tape::new();
    let x = tape
        .leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2], true)
        .unwrap();
    let g = x.gather_rows(&[0, 0, 2]).unwrap();
    assert_eq!(g.data(), vec![1.0, 2.0, 1.0, 2.0, 5.0, 6.0]);
    g.sum_all().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn slice_and_concat_backward_route_grads() {
    let tape = Tape::new();
    let a = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], true).unwrap();
    let b = tape.leaf(vec![5.0, 6.0], vec![1, 2], true).unwrap();
    let cat = a.concat_rows(&b).unwrap();
    assert_eq!(cat.shape(), vec![3, 2]);
    let sl = cat.slice_rows(1, 3).unwrap();
    assert_eq!(sl.data(), vec![3.0, 4.0, 5.0, 6.0]);
    sl.mul_scalar(2.0).unwrap().sum_all().unwrap().backward().unwrap();
    assert_eq!(a.grad().unwrap(), vec![0.0, 0.0, 2.0, 2.0]);
    assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
}

#[test]
fn row_scale_backward_both_sides() {
    let tape = Tape::new();
    let x = tape
        .leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], true)
        .unwrap();
    let w = tape.leaf(vec![2.0, -1.0], vec![2], true).unwrap();
    let y = x.row_scale(&w).unwrap();
    assert_eq!(y.data(), vec![2.0, 4.0, -3.0, -4.0]);
    y.sum_all().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0, -1.0, -1.0]);
    assert_eq!(w.grad().unwrap(), vec![3.0, 7.0]);
}

#[test]
fn add_bias_backward_sums_rows() {
    let tape = Tape::new();
    let x = tape.leaf(vec![0.0; 6], vec![3, 2], true).unwrap();
    let b = tape.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
    let y = x.add_bias(&b).unwrap();
    y.sum_all().unwrap().backward().unwrap();
    assert_eq!(b.grad().unwrap(), vec![3.0, 3.0]);
}

#[test]
fn bce_backward_is_sigmoid_minus_target_over_n() {
    let tape = Tape::new();
    let x = tape.leaf(vec![0.3, -1.2], vec![2], true).unwrap();
    let loss = x.bce_with_logits_mean(&[1.0, 0.0]).unwrap();
    loss.backward().unwrap();
    let g = x.grad().unwrap();
    let expect = [
        (stable_sigmoid(0.3) - 1.0) / 2.0,
        (stable_sigmoid(-1.2) - 0.0) / 2.0,
    ];
    assert_close(&g, &expect, 1e-15);
}

#[test]
fn div_backward_matches_analytic() {
    let tape = Tape::new();
    let a = tape.leaf(vec![3.0], vec![1], true).unwrap();
    let b = tape.leaf(vec![2.0], vec![1], true).unwrap();
    let loss = a.div(&b).unwrap().sum_all().unwrap();
    loss.backward().unwrap();
    assert!((a.grad().unwrap()[0] - 0.5).abs() <= 1e-15);
    assert!((b.grad().unwrap()[0] + 0.75).abs() <= 1e-15);
}

#[test]
fn masked_fill_blocks_gradient_through_filled_entries() {
    let tape = Tape::new();
    let x = tape.leaf(vec![1.0, 2.0, 3.0], vec![3], true).unwrap();
    let m = x.masked_fill(&[true, false, true], -5.0).unwrap();
    assert_eq!(m.data(), vec![1.0, -5.0, 3.0]);
    m.sum_all().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 1.0]);
}

#[test]
fn constants_accumulate_no_grad() {
    let tape = Tape::new();
    let x = tape.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
    let c = tape.constant(vec![3.0, 4.0], vec![2]).unwrap();
    let loss = x.mul(&c).unwrap().sum_all().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![3.0, 4.0]);
    assert!(c.grad().is_none());
}

#[test]
fn logsumexp_backward_is_softmax() {
    let tape = Tape::new();
    let x = tape.leaf(vec![0.1, -0.4, 0.7], vec![3], true).unwrap();
    x.logsumexp().unwrap().backward().unwrap();
    let g = x.grad().unwrap();
    let sm = tape
        .constant(vec![0.1, -0.4, 0.7], vec![3])
        .unwrap()
        .softmax(0)
        .unwrap()
        .data();
    assert_close(&g, &sm, 1e-12);
}

#[test]
fn relu_and_sqrt_backward() {
    let tape = Tape::new();
    let x = tape.leaf(vec![-1.0, 2.0], vec![2], true).unwrap();
    x.relu().unwrap().sum_all().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.0, 1.0]);

    let tape = Tape::new();
    let y = tape.leaf(vec![4.0], vec![1], true).unwrap();
    y.sqrt().unwrap().sum_all().unwrap().backward().unwrap();
    assert_eq!(y.grad().unwrap(), vec![0.25]);
}
