//! Non-B-mode frames that the curation tests must catch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::render::{self, finish, NuisanceTexture, Placement};
use super::{rng_for, stream, PhantomConfig};
use crate::frame::{Frame, FrameKind, Pathology, Quality, View};

/// Doppler overlay: a box of flow colour over a grey cardiac image.
pub(super) fn doppler(frame_seed: u64, config: &PhantomConfig) -> Frame {
    let (h, w) = (config.image_height, config.image_width);
    let mut rng = rng_for(frame_seed, stream::CONTAMINANT);
    let gray = grey_panel(h, w, &mut rng, config);
    let bh = ((h as f64) * rng.gen_range(0.4..0.6)).round() as usize;
    let bw = ((w as f64) * rng.gen_range(0.4..0.6)).round() as usize;
    let top = rng.gen_range(0..=h - bh);
    let left = rng.gen_range(0..=w - bw);
    let toward_probe = rng.gen_bool(0.5);
    let mut pixels = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            let v = gray[i * w + j];
            if (top..top + bh).contains(&i) && (left..left + bw).contains(&j) {
                let hot = 180.0 + 0.3 * v;
                let cold = 0.3 * v;
                let (r, b) = if toward_probe { (hot, cold) } else { (cold, hot) };
                pixels.extend_from_slice(&[finish(r), finish(0.3 * v + 20.0), finish(b)]);
            } else {
                pixels.extend_from_slice(&[v, v, v]);
            }
        }
    }
    contaminant_frame(FrameKind::Doppler, h, w, 3, pixels)
}

/// Half-width of the dark separator between split-view panels.
const SPLIT_GAP: usize = 3;

/// Two squeezed B-mode panels either side of a black vertical band.
pub(super) fn split_view(frame_seed: u64, config: &PhantomConfig) -> Frame {
    let (h, w) = (config.image_height, config.image_width);
    let mut rng = rng_for(frame_seed, stream::CONTAMINANT);
    let band_start = w / 2 - SPLIT_GAP;
    let band_end = band_start + 2 * SPLIT_GAP;
    let mut pixels = vec![0.0; h * w];
    for (offset, width) in [(0, band_start), (band_end, w - band_end)] {
        let full = grey_panel(h, 2 * width, &mut rng, config);
        for i in 0..h {
            for j in 0..width {
                let a = full[i * 2 * width + 2 * j];
                let b = full[i * 2 * width + 2 * j + 1];
                pixels[i * w + offset + j] = finish(0.5 * (a + b));
            }
        }
    }
    contaminant_frame(FrameKind::SplitView, h, w, 1, pixels)
}

/// M-mode: a small B-mode panel above horizontally swept tissue traces.
pub(super) fn m_mode(frame_seed: u64, config: &PhantomConfig) -> Frame {
    let (h, w) = (config.image_height, config.image_width);
    let mut rng = rng_for(frame_seed, stream::CONTAMINANT);
    let top = grey_panel(h / 2, w, &mut rng, config);
    let band_period = rng.gen_range(20.0..28.0);
    let sweep_amp = rng.gen_range(0.55..0.7) * band_period;
    let sweep_period = rng.gen_range(120.0..200.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, 3.0).expect("valid sigma");
    let mut pixels = Vec::with_capacity(h * w);
    pixels.extend_from_slice(&top);
    for i in h / 2..h {
        let y = (i - h / 2) as f64;
        for j in 0..w {
            let shift = sweep_amp * (std::f64::consts::TAU * j as f64 / sweep_period + phase).sin();
            let u = (std::f64::consts::TAU * (y - shift) / band_period).cos();
            let level = 20.0 + 250.0 * smoothstep(-0.2, 0.6, u);
            pixels.push(finish(level + noise.sample(&mut rng)));
        }
    }
    contaminant_frame(FrameKind::MMode, h, w, 1, pixels)
}

fn smoothstep(lo: f64, hi: f64, x: f64) -> f64 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Grey cardiac-like panel with its own random texture.
fn grey_panel(h: usize, w: usize, rng: &mut ChaCha8Rng, config: &PhantomConfig) -> Vec<f64> {
    let texture = NuisanceTexture::sample(rng);
    let mut base = render::background_field(h, w, &texture, config.nuisance_strength.min(1.0));
    let view = View::CARDIAC[rng.gen_range(0..3)];
    let place = Placement::centred(h, w);
    let layout = render::heart_layout(view, Pathology::Nc, config.hlhs_lv_scale, &place);
    let cov = render::union_coverage(layout.iter().map(|(_, s)| s), h, w);
    render::composite(&mut base, &cov, render::STRUCTURE_LEVEL);
    let (sigma, blur) = Quality::Medium.degradation();
    render::degrade(&base, h, w, sigma, blur, rng)
}

fn contaminant_frame(kind: FrameKind, h: usize, w: usize, channels: usize, pixels: Vec<f64>) -> Frame {
    Frame {
        height: h,
        width: w,
        channels,
        pixels,
        kind,
        view: View::Background,
        pathology: Pathology::Nc,
        quality: Quality::Medium,
        patient_id: 0,
        frame_id: 0,
    }
}
