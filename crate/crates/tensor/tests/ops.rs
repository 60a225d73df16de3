//! Forward-path oracles for the core operations: hand-computed cases,
//! independent reference implementations, and numeric-stability checks.

use emstack_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

// ── matmul ──────────────────────────────────────────────────────────

#[test]
fn matmul_identity_passes_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::<f64>::new();
    let eye = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let b = Tensor::from_vec(&[3, 3], rand_vec(&mut rng, 9, -2.0, 2.0)).unwrap();
    let i = tape.constant(eye);
    let bv = tape.constant(b.clone());
    let c = tape.matmul(i, bv).unwrap();
    assert_eq!(tape.data(c).data(), b.data());
}

#[test]
fn matmul_hand_case() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap());
    let b = tape.constant(Tensor::from_vec(&[2, 1], vec![0., 1.]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.data(c).shape(), &[2, 1]);
    assert_eq!(tape.data(c).data(), &[2.0, 4.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

// ── conv2d ──────────────────────────────────────────────────────────

/// Independent quadruple-loop cross-correlation reference.
#[allow(clippy::too_many_arguments)]
fn conv_reference(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (wd + 2 * padding - k) / stride + 1;
    let mut y = vec![0.0; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                acc += x.at3(c, iy as usize, ix as usize)
                                    * w.data()[((o * ci + c) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                y[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    y
}

#[test]
fn conv2d_1x1_unit_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::from_vec(&[1, 4, 4], rand_vec(&mut rng, 16, -2.0, 2.0)).unwrap();
    let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w);
    let y = tape.conv2d(xv, wv, 1, 0).unwrap();
    assert_eq!(tape.data(y).data(), x.data());
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_vec(&[1, 5, 5], rand_vec(&mut rng, 25, -2.0, 2.0)).unwrap();
    let mut kw = vec![0.0; 9];
    kw[4] = 1.0; // center tap
    let w = Tensor::from_vec(&[1, 1, 3, 3], kw).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w);
    let y = tape.conv2d(xv, wv, 1, 1).unwrap();
    assert_eq!(tape.data(y).data(), x.data());
}

#[test]
fn conv2d_matches_naive_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1)] {
        let x = Tensor::from_vec(&[2, 5, 5], rand_vec(&mut rng, 50, -2.0, 2.0)).unwrap();
        let w = Tensor::from_vec(&[3, 2, 3, 3], rand_vec(&mut rng, 54, -1.0, 1.0)).unwrap();
        let expect = conv_reference(&x, &w, stride, padding);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.constant(w);
        let y = tape.conv2d(xv, wv, stride, padding).unwrap();
        let got = tape.data(y).data();
        let max_diff = got
            .iter()
            .zip(expect.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12, "stride {stride} pad {padding}: {max_diff}");
    }
}

#[test]
fn conv2d_kernel_exceeding_padded_input_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 2]));
    let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(tape.conv2d(x, w, 1, 0).is_err());
}

// ── softmax ─────────────────────────────────────────────────────────

#[test]
fn softmax_uniform_on_equal_inputs() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec(&[3], vec![0.0; 3]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    for &v in tape.data(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_no_overflow_on_huge_logits() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec(&[2], vec![1000.0, 0.0]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    let d = tape.data(y).data();
    assert!(d.iter().all(|v| v.is_finite()));
    assert!((d[0] - 1.0).abs() < 1e-12);
    assert!(d[1] < 1e-12);
}

#[test]
fn softmax_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = rand_vec(&mut rng, 12, -2.0, 2.0);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec(&[3, 4], data.clone()).unwrap());
    let y = tape.softmax(x, 1).unwrap();
    let got = tape.data(y).data();
    for r in 0..3 {
        let row = &data[r * 4..(r + 1) * 4];
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        for c in 0..4 {
            let expect = row[c].exp() / denom;
            assert!(
                (got[r * 4 + c] - expect).abs() / expect < 1e-12,
                "row {r} col {c}"
            );
        }
    }
}

// ── bilinear resize ─────────────────────────────────────────────────

#[test]
fn resize_same_size_is_bitwise_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_vec(&[2, 4, 6], rand_vec(&mut rng, 48, -2.0, 2.0)).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.bilinear_resize(xv, 4, 6).unwrap();
    assert_eq!(tape.data(y).data(), x.data());
}

#[test]
fn resize_preserves_constants_exactly() {
    let x = Tensor::<f64>::filled(&[1, 3, 3], 0.7531);
    for &(th, tw) in &[(1usize, 1usize), (2, 5), (7, 3), (16, 16)] {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.bilinear_resize(xv, th, tw).unwrap();
        assert!(tape.data(y).data().iter().all(|&v| v == 0.7531));
    }
}

#[test]
fn resize_2x2_to_3x3_matches_half_pixel_oracle() {
    // Half-pixel source coords for 2 -> 3 are {-1/6, 1/2, 7/6}, clamped to
    // [0, 1], so each axis interpolates as [a, (a+b)/2, b].
    let x = Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = tape.bilinear_resize(xv, 3, 3).unwrap();
    let expect = [0.0f64, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
    let got = tape.data(y).data();
    for (g, e) in got.iter().zip(expect.iter()) {
        assert!((g - e).abs() < 1e-12, "{got:?}");
    }
}

// ── batch normalization ─────────────────────────────────────────────

#[test]
fn batchnorm_train_standardizes_each_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::from_vec(&[3, 4, 4], rand_vec(&mut rng, 48, -2.0, 2.0)).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::filled(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let (y, _, _) = tape.batchnorm_train(xv, g, b, 1e-5).unwrap();
    let out = tape.data(y).data();
    for c in 0..3 {
        let sl = &out[c * 16..(c + 1) * 16];
        let mean: f64 = sl.iter().sum::<f64>() / 16.0;
        let var: f64 = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
    }
}

#[test]
fn batchnorm_zero_gamma_outputs_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_vec(&[2, 3, 3], rand_vec(&mut rng, 18, -2.0, 2.0)).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::zeros(&[2]));
    let b = tape.constant(Tensor::filled(&[2], 5.0));
    let (y, _, _) = tape.batchnorm_train(xv, g, b, 1e-5).unwrap();
    assert!(tape.data(y).data().iter().all(|&v| v == 5.0));
}

#[test]
fn batchnorm_eval_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data = rand_vec(&mut rng, 32, -2.0, 2.0);
    let x = Tensor::from_vec(&[2, 4, 4], data.clone()).unwrap();
    let gamma = rand_vec(&mut rng, 2, 0.5, 1.5);
    let beta = rand_vec(&mut rng, 2, -0.5, 0.5);
    let mean = vec![0.3, -0.2];
    let var = vec![1.5, 0.8];
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::from_vec(&[2], gamma.clone()).unwrap());
    let b = tape.constant(Tensor::from_vec(&[2], beta.clone()).unwrap());
    let y = tape.batchnorm_eval(xv, g, b, &mean, &var, 1e-5).unwrap();
    let got = tape.data(y).data();
    for c in 0..2 {
        for i in 0..16 {
            let expect =
                (data[c * 16 + i] - mean[c]) / (var[c] + 1e-5).sqrt() * gamma[c] + beta[c];
            let rel = (got[c * 16 + i] - expect).abs() / expect.abs().max(1e-9);
            assert!(rel < 1e-10);
        }
    }
}

#[test]
fn batchnorm_rejects_zero_spatial_extent() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 0, 4]));
    let g = tape.constant(Tensor::filled(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(tape.batchnorm_train(x, g, b, 1e-5).is_err());
}

// ── backward basics ─────────────────────────────────────────────────

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec(&[4], vec![1., -2., 3., 0.5]).unwrap(), true);
    let loss = tape.sum_all(x).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn backward_through_relu_masks_negatives() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap(), true);
    let r = tape.relu(x).unwrap();
    let loss = tape.sum_all(r).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[3]), true);
    let y = tape.relu(x).unwrap();
    assert!(tape.backward(y).is_err());
}

#[test]
fn backward_accumulates_across_calls() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
    let loss = tape.sum_all(x).unwrap();
    tape.backward(loss).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
}

#[test]
fn rollback_keeps_parameters_and_their_grads() {
    let mut tape = Tape::<f64>::new();
    let p = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
    let mark = tape.mark();
    let y = tape.relu(p).unwrap();
    let loss = tape.sum_all(y).unwrap();
    tape.backward(loss).unwrap();
    tape.rollback(mark);
    assert_eq!(tape.len(), 1);
    assert_eq!(tape.grad(p).unwrap(), &[1.0, 1.0]);
    // A second pass reuses the parameter node.
    let y = tape.relu(p).unwrap();
    let loss = tape.sum_all(y).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(p).unwrap(), &[2.0, 2.0]);
}

// ── misc stability oracles ──────────────────────────────────────────

#[test]
fn bce_at_zero_logits_is_ln2() {
    let mut tape = Tape::<f64>::new();
    let z = tape.leaf(Tensor::zeros(&[5]), true);
    let t = Tensor::from_vec(&[5], vec![0., 1., 0., 1., 1.]).unwrap();
    let loss = tape.bce_with_logits(z, &t).unwrap();
    assert!((tape.data(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn bce_confident_correct_logit_has_tiny_loss() {
    let mut tape = Tape::<f64>::new();
    let z = tape.leaf(Tensor::from_vec(&[1], vec![50.0]).unwrap(), true);
    let t = Tensor::from_vec(&[1], vec![1.0]).unwrap();
    let loss = tape.bce_with_logits(z, &t).unwrap();
    let v = tape.data(loss).data()[0];
    assert!(v.is_finite() && v < 1e-20, "{v}");
}

#[test]
fn bce_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let z: Vec<f64> = rand_vec(&mut rng, 16, -4.0, 4.0);
    let t: Vec<f64> = (0..16).map(|_| f64::from(rng.random_range(0..2))).collect();
    let mut tape = Tape::<f64>::new();
    let zv = tape.constant(Tensor::from_vec(&[16], z.clone()).unwrap());
    let tv = Tensor::from_vec(&[16], t.clone()).unwrap();
    let loss = tape.bce_with_logits(zv, &tv).unwrap();
    let direct: f64 = z
        .iter()
        .zip(t.iter())
        .map(|(&zi, &ti)| {
            let s = 1.0 / (1.0 + (-zi).exp());
            -(ti * s.ln() + (1.0 - ti) * (1.0 - s).ln())
        })
        .sum::<f64>()
        / 16.0;
    let got = tape.data(loss).data()[0];
    assert!((got - direct).abs() / direct.abs().max(1e-12) < 1e-10);
}

#[test]
fn slot_attention_flops_scale_linearly_in_slots_and_positions() {
    let run = |m: usize, hw: usize| -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::<f64>::new();
        let d = 8;
        let q = tape.constant(
            Tensor::from_vec(&[d, hw, hw], rand_vec(&mut rng, d * hw * hw, -1.0, 1.0)).unwrap(),
        );
        let slots: Vec<_> = (0..m)
            .map(|_| {
                tape.constant(
                    Tensor::from_vec(&[d, hw, hw], rand_vec(&mut rng, d * hw * hw, -1.0, 1.0))
                        .unwrap(),
                )
            })
            .collect();
        tape.reset_flops();
        tape.slot_attention(q, &slots, &slots).unwrap();
        tape.flops()
    };
    let f1 = run(2, 8);
    let f2 = run(4, 8);
    let f4 = run(8, 8);
    assert_eq!(f2, 2 * f1, "doubling slots doubles work");
    assert_eq!(f4, 2 * f2);
    let p1 = run(4, 8);
    let p4 = run(4, 16); // 4x positions
    assert_eq!(p4, 4 * p1, "4x positions means 4x work");
}
