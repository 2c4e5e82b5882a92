use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Six-nested-loop cross-correlation used as the reference for conv2d.
fn conv_reference(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let [f, _, kh, kw] = k.shape().try_into().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * ho * wo];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[fi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k.data()[((fi * c + ci) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((ni * f + fi) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_all_ones_sums_window() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, k, b, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    assert_eq!(tape.value(y).data(), &[4.0; 4]);
}

#[test]
fn conv_single_tap_kernel_shifts_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = random(&[1, 1, 4, 4], &mut rng);
    let mut kdata = vec![0.0; 9];
    kdata[2 * 3 + 2] = 1.0; // bottom-right tap
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let k = tape.constant(Tensor::new(&[1, 1, 3, 3], kdata).unwrap());
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, k, b, 1, 1).unwrap();
    let out = tape.value(y).data();
    for i in 0..4 {
        for j in 0..4 {
            let expected = if i < 3 && j < 3 { input.data()[(i + 1) * 4 + j + 1] } else { 0.0 };
            assert_eq!(out[i * 4 + j], expected);
        }
    }
}

#[test]
fn conv_matches_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1)] {
        let x = random(&[1, 2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let expected = conv_reference(&x, &k, &b, stride, pad);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x), tape.constant(k), tape.constant(b));
        let y = tape.conv2d(xv, kv, bv, stride, pad).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {e}");
        }
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(tape.conv2d(x, k, b, 1, 0).is_err());
    let k = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    // (4 - 2) / 3 is non-integral
    assert!(tape.conv2d(x, k, b, 3, 0).is_err());
    let k = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(tape.conv2d(x, k, b, 1, 0).is_err());
}

#[test]
fn max_pool_small_cases() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.max_pool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(&[1, 1, 4, 4], 3.0));
    let y = tape.max_pool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0; 4]);
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(x).unwrap().data();
    let mut expected = vec![0.0; 16];
    for idx in [0, 2, 8, 10] {
        expected[idx] = 1.0;
    }
    assert_eq!(g, expected.as_slice());
}

#[test]
fn max_pool_matches_window_scan_and_conserves_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = random(&[2, 3, 4, 4], &mut rng);
    let mut tape = Tape::new();
    let x = tape.param(input.clone());
    let y = tape.max_pool2d(x, 2, 2).unwrap();
    let out = tape.value(y).data().to_vec();
    for p in 0..6 {
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(input.data()[p * 16 + (oy * 2 + dy) * 4 + ox * 2 + dx]);
                    }
                }
                assert_eq!(out[p * 4 + oy * 2 + ox], m);
            }
        }
    }
    let w = random(&[2, 3, 2, 2], &mut rng);
    let wv = tape.constant(w.clone());
    let prod = tape.mul(y, wv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    let routed: f64 = grads.get(x).unwrap().data().iter().sum();
    let incoming: f64 = w.data().iter().sum();
    assert!((routed - incoming).abs() < 1e-12);
}

#[test]
fn max_pool_rejects_non_integral_output() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(tape.max_pool2d(x, 2, 2).is_err());
}

#[test]
fn dense_identity_and_bias_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let input = random(&[2, 3], &mut rng);
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let w = tape.constant(Tensor::new(&[3, 3], eye).unwrap());
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.dense(x, w, b).unwrap();
    assert_eq!(tape.value(y), &input);

    let w0 = tape.constant(Tensor::zeros(&[3, 4]));
    let bias = Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let b4 = tape.constant(bias.clone());
    let y = tape.dense(x, w0, b4).unwrap();
    for r in 0..2 {
        assert_eq!(tape.value(y).row(r), bias.data());
    }
}

#[test]
fn dense_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x, w, b) = (random(&[2, 3], &mut rng), random(&[3, 4], &mut rng), random(&[4], &mut rng));
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.dense(xv, wv, bv).unwrap();
    for i in 0..2 {
        for j in 0..4 {
            let mut acc = b.data()[j];
            for k in 0..3 {
                acc += x.data()[i * 3 + k] * w.data()[k * 4 + j];
            }
            assert!((tape.value(y).data()[i * 4 + j] - acc).abs() < 1e-12);
        }
    }
    let bad = tape.constant(Tensor::zeros(&[4, 4]));
    assert!(tape.dense(xv, bad, bv).is_err());
}

#[test]
fn softmax_examples() {
    let cases: [([f64; 2], [f64; 2]); 3] = [
        ([0.0, 0.0], [0.5, 0.5]),
        ([1000.0, 1000.0], [0.5, 0.5]),
        ([1f64.ln(), 3f64.ln()], [0.25, 0.75]),
    ];
    for (logits, expected) in cases {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(&[1, 2], logits.to_vec()).unwrap());
        let p = tape.softmax(z).unwrap();
        for (a, e) in tape.value(p).data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::new(&[1, 2], vec![f64::NAN, 0.0]).unwrap());
    assert!(tape.softmax(z).is_err());
}

#[test]
fn backward_of_sum_and_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input = random(&[3, 4], &mut rng);
    let mut tape = Tape::new();
    let x = tape.param(input.clone());
    let s = tape.sum(x);
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 12]);

    let mut tape = Tape::new();
    let x = tape.param(input.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let grads = tape.backward(s).unwrap();
    for (g, v) in grads.get(x).unwrap().data().iter().zip(input.data()) {
        assert!((g - 2.0 * v).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(crate::Error::Graph(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2], 2.0));
    let w = tape.param(Tensor::full(&[2], 3.0));
    let y = tape.mul(x, w).unwrap();
    let s = tape.sum(y);
    let grads = tape.backward(s).unwrap();
    assert!(grads.get(x).is_none());
    assert_eq!(grads.get(w).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn cross_entropy_clips_at_floor() {
    let mut tape = Tape::new();
    let z = tape.param(Tensor::new(&[1, 2], vec![0.0, -100.0]).unwrap());
    let l = tape.cross_entropy(z, &[1]).unwrap();
    assert!((tape.value(l).data()[0] + PROB_FLOOR.ln()).abs() < 1e-9);
    let s = tape.sum(l);
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(z).unwrap().data(), &[0.0, 0.0]);
}

mod props {
    use proptest::prelude::*;

    use super::super::*;

    proptest! {
        #[test]
        fn softmax_rows_are_positive_and_normalised(
            logits in proptest::collection::vec(-50.0f64..50.0, 12)
        ) {
            let t = Tensor::new(&[4, 3], logits).unwrap();
            let p = softmax_rows(&t).unwrap();
            for row in p.chunks(3) {
                prop_assert!(row.iter().all(|&v| v > 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
