//! Oracles shared by the integration suites.
#![allow(dead_code)]

use fetal_chd::autodiff::{Tape, Tensor, Var};
use fetal_chd::frame::{Frame, FrameKind, Pathology, Quality, View, MAX_PIXEL};
use fetal_chd::network::{build_model, ArchConfig, ModelParams, INPUT_CENTRE, INPUT_SPREAD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_RTOL: f64 = 1e-4;
/// Absolute slack for gradients that are zero up to rounding: the relative
/// error's denominator never drops below `FD_ATOL / FD_RTOL`.
pub const FD_ATOL: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform values with magnitude at least `gap`, so ReLU kinks sit far from
/// every probe point.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, 0.0, 1.0, rng);
    for v in t.data_mut() {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        *v = sign * (gap + *v);
    }
    t
}

/// Distinct values spaced at least `gap` apart, in random order.
pub fn distinct(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * gap + rng.gen_range(0.0..gap * 0.25)).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape, vals).unwrap()
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).data()[0]
}

/// Worst relative error between reverse-mode gradients of a scalar function
/// and central differences, over every entry of every input.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for k in 0..inputs[i].len() {
            let x = inputs[i].data()[k];
            probe[i].data_mut()[k] = x + FD_STEP;
            let up = evaluate(&probe, &f);
            probe[i].data_mut()[k] = x - FD_STEP;
            let down = evaluate(&probe, &f);
            probe[i].data_mut()[k] = x;
            let fd = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[k], fd));
        }
    }
    worst
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let err = (analytic - numeric).abs();
    err / analytic.abs().max(numeric.abs()).max(FD_ATOL / FD_RTOL)
}

/// Reduces any tensor to a scalar through fixed random weights.
pub fn project(tape: &mut Tape, v: Var, weights: &[f64]) -> Var {
    tape.weighted_sum(v, weights).unwrap()
}

pub fn weights(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub const SMALL_ARCH: ArchConfig = ArchConfig {
    n_blocks: 2,
    base_channels: 3,
    input_h: 16,
    input_w: 16,
    view_classes: 3,
};

/// Weights moved off their zero-bias initialisation so every path carries
/// gradient.
pub fn jittered_model(arch: &ArchConfig, seed: u64) -> ModelParams {
    let mut model = build_model(arch, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for t in model.tensors_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    model
}

/// Summed two-head cross-entropy of `model` at `input`.
pub fn network_loss(model: &ModelParams, input: &Tensor, chd: &[usize], view: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let heads = model.record(&mut tape, x, false).unwrap();
    let a = tape.cross_entropy(heads.chd_logits, chd).unwrap();
    let b = tape.cross_entropy(heads.view_logits, view).unwrap();
    let s = tape.add(a, b).unwrap();
    let s = tape.sum(s);
    tape.value(s).data()[0]
}

/// Worst relative error over every parameter of the model.
pub fn network_gradcheck(model: &mut ModelParams, input: &Tensor, chd: &[usize], view: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let heads = model.record(&mut tape, x, true).unwrap();
    let a = tape.cross_entropy(heads.chd_logits, chd).unwrap();
    let b = tape.cross_entropy(heads.view_logits, view).unwrap();
    let s = tape.add(a, b).unwrap();
    let s = tape.sum(s);
    let grads = tape.backward(s).unwrap();
    let analytic: Vec<Tensor> = heads.params.iter().map(|p| grads.get(*p).unwrap().clone()).collect();
    let mut worst: f64 = 0.0;
    for (pi, g) in analytic.iter().enumerate() {
        for k in 0..g.len() {
            let orig = model.tensors()[pi].data()[k];
            model.tensors_mut()[pi].data_mut()[k] = orig + FD_STEP;
            let up = network_loss(model, input, chd, view);
            model.tensors_mut()[pi].data_mut()[k] = orig - FD_STEP;
            let down = network_loss(model, input, chd, view);
            model.tensors_mut()[pi].data_mut()[k] = orig;
            worst = worst.max(relative_error(g.data()[k], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting
/// one half.
pub fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Named primitive checks, each a closure over a fresh random instance.
pub type PrimitiveCase = (&'static str, fn(&mut ChaCha8Rng) -> f64);

fn case_add(r: &mut ChaCha8Rng) -> f64 {
    let (a, b) = (uniform(&[3, 4], -1.0, 1.0, r), uniform(&[3, 4], -1.0, 1.0, r));
    let w = weights(12, r);
    gradcheck(&[a, b], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        project(t, s, &w)
    })
}

fn case_mul(r: &mut ChaCha8Rng) -> f64 {
    let (a, b) = (uniform(&[2, 5], -1.0, 1.0, r), uniform(&[2, 5], -1.0, 1.0, r));
    let w = weights(10, r);
    gradcheck(&[a, b], |t, v| {
        let s = t.mul(v[0], v[1]).unwrap();
        project(t, s, &w)
    })
}

fn case_scale(r: &mut ChaCha8Rng) -> f64 {
    let a = uniform(&[7], -1.0, 1.0, r);
    let factor = r.gen_range(-3.0..3.0);
    let w = weights(7, r);
    gradcheck(&[a], |t, v| {
        let s = t.scale(v[0], factor);
        project(t, s, &w)
    })
}

fn case_sum(r: &mut ChaCha8Rng) -> f64 {
    let a = uniform(&[2, 3, 2], -1.0, 1.0, r);
    gradcheck(&[a], |t, v| {
        let sq = t.mul(v[0], v[0]).unwrap();
        t.sum(sq)
    })
}

fn case_relu(r: &mut ChaCha8Rng) -> f64 {
    let a = away_from_zero(&[4, 5], 0.01, r);
    let w = weights(20, r);
    gradcheck(&[a], |t, v| {
        let s = t.relu(v[0]);
        project(t, s, &w)
    })
}

fn case_conv(r: &mut ChaCha8Rng) -> f64 {
    let stride = r.gen_range(1..=2);
    let padding = r.gen_range(0..=1);
    let (c, f) = (r.gen_range(1..=3), r.gen_range(1..=3));
    let x = uniform(&[2, c, 7, 5], -1.0, 1.0, r);
    let k = uniform(&[f, c, 3, 3], -1.0, 1.0, r);
    let b = uniform(&[f], -1.0, 1.0, r);
    let out_h = (7 + 2 * padding - 3) / stride + 1;
    let out_w = (5 + 2 * padding - 3) / stride + 1;
    let w = weights(2 * f * out_h * out_w, r);
    gradcheck(&[x, k, b], |t, v| {
        let s = t.conv2d(v[0], v[1], v[2], stride, padding).unwrap();
        project(t, s, &w)
    })
}

fn case_max_pool(r: &mut ChaCha8Rng) -> f64 {
    let x = distinct(&[2, 2, 4, 6], 1e-2, r);
    let w = weights(2 * 2 * 2 * 3, r);
    gradcheck(&[x], |t, v| {
        let s = t.max_pool2d(v[0], 2, 2).unwrap();
        project(t, s, &w)
    })
}

fn case_gap(r: &mut ChaCha8Rng) -> f64 {
    let x = uniform(&[3, 2, 3, 4], -1.0, 1.0, r);
    let w = weights(6, r);
    gradcheck(&[x], |t, v| {
        let s = t.global_avg_pool(v[0]).unwrap();
        project(t, s, &w)
    })
}

fn case_dense(r: &mut ChaCha8Rng) -> f64 {
    let x = uniform(&[3, 4], -1.0, 1.0, r);
    let wt = uniform(&[4, 2], -1.0, 1.0, r);
    let b = uniform(&[2], -1.0, 1.0, r);
    let w = weights(6, r);
    gradcheck(&[x, wt, b], |t, v| {
        let s = t.dense(v[0], v[1], v[2]).unwrap();
        project(t, s, &w)
    })
}

fn case_softmax(r: &mut ChaCha8Rng) -> f64 {
    let x = uniform(&[3, 4], -3.0, 3.0, r);
    let w = weights(12, r);
    gradcheck(&[x], |t, v| {
        let s = t.softmax(v[0]).unwrap();
        project(t, s, &w)
    })
}

fn case_cross_entropy(r: &mut ChaCha8Rng) -> f64 {
    let x = uniform(&[4, 3], -3.0, 3.0, r);
    let targets: Vec<usize> = (0..4).map(|_| r.gen_range(0..3)).collect();
    let w = weights(4, r);
    gradcheck(&[x], |t, v| {
        let s = t.cross_entropy(v[0], &targets).unwrap();
        project(t, s, &w)
    })
}

fn case_weighted_sum(r: &mut ChaCha8Rng) -> f64 {
    let x = uniform(&[6], -1.0, 1.0, r);
    let w = weights(6, r);
    gradcheck(&[x], |t, v| {
        let s = t.weighted_sum(v[0], &w).unwrap();
        let sq = t.mul(s, s).unwrap();
        t.sum(sq)
    })
}

pub const PRIMITIVES: [PrimitiveCase; 12] = [
    ("add", case_add),
    ("mul", case_mul),
    ("scale", case_scale),
    ("sum", case_sum),
    ("relu", case_relu),
    ("conv2d", case_conv),
    ("max_pool2d", case_max_pool),
    ("global_avg_pool", case_gap),
    ("dense", case_dense),
    ("softmax", case_softmax),
    ("cross_entropy", case_cross_entropy),
    ("weighted_sum", case_weighted_sum),
];

pub const GRADCHECK_INSTANCES: u64 = 20;

/// Smallest distance of any trunk ReLU input from zero, and of any positive
/// pooling maximum from the runner-up in its window. Central differences
/// are only meaningful when a probe cannot cross either kind of kink.
pub fn kink_margin(model: &ModelParams, input: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let standardised = input.data().iter().map(|v| (v - INPUT_CENTRE) / INPUT_SPREAD).collect();
    let mut x = tape.constant(Tensor::new(input.shape(), standardised).unwrap());
    let mut margin = f64::INFINITY;
    for block in &model.trunk {
        for layer in [&block.conv1, &block.conv2] {
            let k = tape.constant(layer.kernel.clone());
            let b = tape.constant(layer.bias.clone());
            x = tape.conv2d(x, k, b, 1, 1).unwrap();
            margin = margin.min(tape.value(x).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())));
            x = tape.relu(x);
        }
        let t = tape.value(x);
        let (n, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
        for plane in 0..n * c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let mut win: Vec<f64> = (0..4)
                        .map(|q| t.data()[plane * h * w + (2 * oy + q / 2) * w + 2 * ox + q % 2])
                        .collect();
                    win.sort_by(|a, b| b.total_cmp(a));
                    if win[0] > 0.0 {
                        margin = margin.min(win[0] - win[1]);
                    }
                }
            }
        }
        x = tape.max_pool2d(x, 2, 2).unwrap();
    }
    margin
}

pub const KINK_MARGIN: f64 = 1e-3;

/// One random instance of the full two-headed network check. Draws are
/// skipped while a kink lies within `KINK_MARGIN` of the instance.
pub fn network_case(seed: u64) -> f64 {
    for attempt in 0.. {
        let s = seed * 1000 + attempt;
        let mut model = jittered_model(&SMALL_ARCH, s);
        let mut r = rng(s);
        let input = uniform(&[2, 1, 16, 16], 0.0, 1.0, &mut r);
        if kink_margin(&model, &input) < KINK_MARGIN {
            continue;
        }
        let chd = [r.gen_range(0..2), r.gen_range(0..2)];
        let view = [r.gen_range(0..3), r.gen_range(0..3)];
        return network_gradcheck(&mut model, &input, &chd, &view);
    }
    unreachable!()
}

/// Pixels drawn from a mix of the range ends and the interior, so both
/// clamps get exercised.
pub fn random_frame(h: usize, w: usize, id: u32, r: &mut ChaCha8Rng) -> Frame {
    let pixels = (0..h * w)
        .map(|_| match r.gen_range(0..10) {
            0 => 0.0,
            1 => MAX_PIXEL,
            2 => r.gen_range(0.0..6.0),
            3 => r.gen_range(MAX_PIXEL - 6.0..=MAX_PIXEL),
            _ => r.gen_range(0.0..=MAX_PIXEL),
        })
        .collect();
    Frame {
        height: h,
        width: w,
        channels: 1,
        pixels,
        kind: FrameKind::BMode,
        view: View::FourCh,
        pathology: if id % 2 == 0 { Pathology::Nc } else { Pathology::Hlhs },
        quality: Quality::ALL[id as usize % 3],
        patient_id: id / 4,
        frame_id: id,
    }
}
