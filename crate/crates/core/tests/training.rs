mod common;

use common::*;
use fetal_chd::autodiff::{Tape, Tensor};
use fetal_chd::frame::{Frame, FrameKind, Pathology, Quality, View};
use fetal_chd::network::{build_model, scale_input};
use fetal_chd::training::*;
use proptest::prelude::*;
use rand::Rng;

/// Separable toy set: the bright square sits top-left for HLHS and
/// bottom-right for NC; the view label follows the square's size.
fn toy_set(n: usize, seed: u64) -> FrameSet {
    let mut r = rng(seed);
    let mut set = FrameSet::default();
    for i in 0..n {
        let chd = i % 2;
        let view = (i / 2) % 3;
        let mut pixels: Vec<f64> = (0..256).map(|_| r.gen_range(40.0..80.0)).collect();
        let side = 3 + view;
        let origin = if chd == 1 { 2 } else { 16 - 2 - side };
        for y in origin..origin + side {
            for x in origin..origin + side {
                pixels[y * 16 + x] = r.gen_range(200.0..240.0);
            }
        }
        let frame = Frame {
            height: 16,
            width: 16,
            channels: 1,
            pixels,
            kind: FrameKind::BMode,
            view: View::CARDIAC[view],
            pathology: if chd == 1 { Pathology::Hlhs } else { Pathology::Nc },
            quality: Quality::High,
            patient_id: (i % 8) as u32,
            frame_id: i as u32,
        };
        set.push(frame, chd, view);
    }
    set
}

fn config(mode: LambdaMode, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs,
        lambda_mode: mode,
        patience: epochs,
        seed: 3,
        ..TrainConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn lambda_is_bounded_and_antitone_in_chd_loss(
        chd in prop::collection::vec(0.0f64..5.0, 1..40),
        view_seed in any::<u64>(),
    ) {
        let mut r = rng(view_seed);
        let view: Vec<f64> = (0..chd.len()).map(|_| r.gen_range(0.0..3.0)).collect();
        let b = combine_losses(&chd, Some(&view), LambdaMode::Weighted).unwrap();
        let lambda = b.lambda.unwrap();
        let scaled = b.scaled_loss.unwrap();
        for i in 0..chd.len() {
            prop_assert!((0.5..=1.0).contains(&lambda[i]));
            prop_assert!((0.0..=1.0).contains(&scaled[i]));
            for j in 0..chd.len() {
                if chd[i] > chd[j] {
                    prop_assert!(lambda[i] <= lambda[j]);
                }
            }
        }
        let expected: f64 = chd.iter().sum::<f64>() + lambda.iter().zip(&view).map(|(l, v)| l * v).sum::<f64>();
        prop_assert!((b.total - expected).abs() <= 1e-9 * expected.max(1.0));
    }

    #[test]
    fn equal_chd_losses_fall_back_to_unit_weights(v in 0.0f64..4.0, n in 1usize..20) {
        let chd = vec![v; n];
        let view = vec![0.3; n];
        let w = combine_losses(&chd, Some(&view), LambdaMode::Weighted).unwrap();
        let f = combine_losses(&chd, Some(&view), LambdaMode::Fixed1).unwrap();
        prop_assert_eq!(w.lambda.unwrap(), vec![1.0; n]);
        prop_assert_eq!(w.total, f.total);
    }
}

#[test]
fn combine_examples() {
    assert_eq!(combine_losses(&[0.7], None, LambdaMode::Off).unwrap().total, 0.7);
    let w = combine_losses(&[0.2, 1.0], Some(&[0.4, 0.4]), LambdaMode::Weighted).unwrap();
    assert_eq!(w.lambda, Some(vec![1.0, 0.5]));
    assert!((w.total - 1.8).abs() < 1e-9);
    let f = combine_losses(&[0.2, 1.0], Some(&[0.4, 0.4]), LambdaMode::Fixed1).unwrap();
    assert!((f.total - 2.0).abs() < 1e-9);
    let scaled = minmax_scale(&[0.2, 0.6, 1.0]).unwrap();
    assert!(scaled.iter().zip([0.0, 0.5, 1.0]).all(|(a, b)| (a - b).abs() < 1e-9));
    assert_eq!(minmax_scale(&[0.4, 0.4, 0.4]).unwrap(), vec![0.0; 3]);
    assert_eq!(minmax_scale(&[0.9]).unwrap(), vec![0.0]);
    assert_eq!(instance_lambda(0.0).unwrap(), 1.0);
    assert_eq!(instance_lambda(1.0).unwrap(), 0.5);
    assert_eq!(instance_lambda(0.5).unwrap(), 0.75);
    assert!(instance_lambda(1.5).is_err());
}

#[test]
fn lambda_enters_the_gradient_as_a_constant() {
    let model = jittered_model(&SMALL_ARCH, 21);
    let set = toy_set(12, 4);
    let frames: Vec<&Frame> = set.frames.iter().collect();
    let input = scale_input(model.raw_batch(&frames).unwrap());

    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let heads = model.record(&mut tape, x, true).unwrap();
    let (total, breakdown) = multitask_loss(&mut tape, &heads, &set.chd, &set.view, LambdaMode::Weighted).unwrap();
    let grads = tape.backward(total).unwrap();

    let lambda = breakdown.lambda.unwrap();
    let mut manual = Tape::new();
    let x = manual.constant(input);
    let h = model.record(&mut manual, x, true).unwrap();
    let chd = manual.cross_entropy(h.chd_logits, &set.chd).unwrap();
    let chd = manual.sum(chd);
    let view = manual.cross_entropy(h.view_logits, &set.view).unwrap();
    let weights = manual.constant(Tensor::new(&[lambda.len()], lambda).unwrap());
    let view = manual.mul(view, weights).unwrap();
    let view = manual.sum(view);
    let obj = manual.add(chd, view).unwrap();
    let reference = manual.backward(obj).unwrap();

    assert!((manual.value(obj).data()[0] - tape.value(total).data()[0]).abs() < 1e-12);
    for (a, b) in heads.params.iter().zip(&h.params) {
        let (ga, gb) = (grads.get(*a).unwrap(), reference.get(*b).unwrap());
        for (u, v) in ga.data().iter().zip(gb.data()) {
            assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
        }
    }
}

#[test]
fn off_mode_never_scores_the_view_head() {
    let model = jittered_model(&SMALL_ARCH, 22);
    let set = toy_set(6, 5);
    let frames: Vec<&Frame> = set.frames.iter().collect();
    let mut tape = Tape::new();
    let x = tape.constant(scale_input(model.raw_batch(&frames).unwrap()));
    let heads = model.record(&mut tape, x, true).unwrap();
    let (total, b) = multitask_loss(&mut tape, &heads, &set.chd, &set.view, LambdaMode::Off).unwrap();
    assert!(b.view_loss.is_none() && b.lambda.is_none());
    let grads = tape.backward(total).unwrap();
    let n = heads.params.len();
    assert!(grads.get(heads.params[n - 2]).is_none());
    assert!(grads.get(heads.params[n - 1]).is_none());
    assert!(grads.get(heads.params[n - 3]).is_some());
}

#[test]
fn off_mode_loss_decreases_on_separable_data() {
    let train = toy_set(64, 6);
    let val = toy_set(16, 7);
    let model = build_model(&SMALL_ARCH, 23).unwrap();
    let (_, log) = fit(model, &train, &val, &config(LambdaMode::Off, 5), Monitor::ChdAuc).unwrap();
    assert_eq!(log.len(), 5);
    for pair in log.windows(2) {
        assert!(pair[1].train_loss <= pair[0].train_loss * 1.05, "{log:?}");
    }
    assert!(log.iter().all(|m| m.lambda_mean.is_none()));
    assert!(!metrics_jsonl(&log).contains("lambda"));
}

#[test]
fn weighted_mode_logs_lambda_in_range_and_is_deterministic() {
    let train = toy_set(48, 8);
    let val = toy_set(12, 9);
    let run = || {
        let model = build_model(&SMALL_ARCH, 24).unwrap();
        fit(model, &train, &val, &config(LambdaMode::Weighted, 3), Monitor::ChdAuc).unwrap()
    };
    let (m1, log1) = run();
    let (m2, log2) = run();
    assert_eq!(log1, log2);
    assert_eq!(m1, m2);
    for m in &log1 {
        let (lo, hi) = (m.lambda_min.unwrap(), m.lambda_max.unwrap());
        assert!(0.5 <= lo && lo <= m.lambda_mean.unwrap() && m.lambda_mean.unwrap() <= hi && hi <= 1.0);
    }
    let other = {
        let model = build_model(&SMALL_ARCH, 24).unwrap();
        let cfg = TrainConfig {
            seed: 4,
            ..config(LambdaMode::Weighted, 1)
        };
        fit(model, &train, &val, &cfg, Monitor::ChdAuc).unwrap().1
    };
    assert_ne!(other[0].train_loss, log1[0].train_loss);
}

#[test]
fn gradient_clipping_bounds_the_joint_norm() {
    let mut g = vec![
        Tensor::new(&[2], vec![3.0, 0.0]).unwrap(),
        Tensor::new(&[1], vec![4.0]).unwrap(),
    ];
    assert_eq!(clip_gradients(&mut g, 1.0), 5.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[0] - 0.8).abs() < 1e-15);
    let mut small = vec![Tensor::new(&[1], vec![0.5]).unwrap()];
    clip_gradients(&mut small, 1.0);
    assert_eq!(small[0].data(), &[0.5]);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { momentum: 1.0, ..TrainConfig::default() },
        TrainConfig { grad_clip: -1.0, ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    assert_eq!("weighted".parse::<LambdaMode>().unwrap(), LambdaMode::Weighted);
    assert!("sometimes".parse::<LambdaMode>().is_err());
}
