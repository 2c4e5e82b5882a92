//! Deterministic synthetic ultrasound-like dataset.
//!
//! Each patient contributes a raw stream of frames: cardiac B-mode frames in
//! three views, non-cardiac B-mode frames, and Doppler / split-view / M-mode
//! contaminants. Every patient carries a background texture that is fixed per
//! patient and independent of the pathology label, so a classifier that keys
//! on it cannot generalise to unseen patients.

mod contaminant;
pub mod render;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use self::render::{NuisanceTexture, Placement, Shape, Structure};
use crate::error::{Error, Result};
use crate::frame::{Frame, FrameKind, Pathology, Quality, View};
use crate::manifest::{save_frame, DatasetManifest, ManifestRecord, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub n_patients_nc: usize,
    pub n_patients_hlhs: usize,
    pub frames_per_patient: usize,
    /// Probabilities of Low, Medium and High quality.
    pub quality_mix: [f64; 3],
    pub contaminant_fraction: f64,
    /// Share of each raw stream showing non-cardiac anatomy.
    pub background_fraction: f64,
    pub nuisance_strength: f64,
    pub hlhs_lv_scale: f64,
    pub master_seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_height: 224,
            image_width: 188,
            n_patients_nc: 20,
            n_patients_hlhs: 20,
            frames_per_patient: 40,
            quality_mix: [0.4, 0.35, 0.25],
            contaminant_fraction: 0.2,
            background_fraction: 0.1,
            nuisance_strength: 1.0,
            hlhs_lv_scale: 0.6,
            master_seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let reals = [
            self.contaminant_fraction,
            self.background_fraction,
            self.nuisance_strength,
            self.hlhs_lv_scale,
        ];
        if reals.iter().chain(&self.quality_mix).any(|v| !v.is_finite()) {
            return bad("phantom config contains a non-finite value".into());
        }
        if self.image_height < 32 || self.image_width < 32 {
            return bad(format!(
                "image must be at least 32x32, got {}x{}",
                self.image_height, self.image_width
            ));
        }
        if self.n_patients_nc == 0 || self.n_patients_hlhs == 0 || self.frames_per_patient == 0 {
            return bad("patient and frame counts must be positive".into());
        }
        if self.quality_mix.iter().any(|&q| q < 0.0) || (self.quality_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("quality_mix {:?} must be nonnegative and sum to 1", self.quality_mix));
        }
        if !(0.0..1.0).contains(&self.contaminant_fraction) || !(0.0..1.0).contains(&self.background_fraction) {
            return bad("contaminant_fraction and background_fraction must lie in [0, 1)".into());
        }
        if self.nuisance_strength < 0.0 {
            return bad("nuisance_strength must be nonnegative".into());
        }
        if !(self.hlhs_lv_scale > 0.0 && self.hlhs_lv_scale < 1.0) {
            return bad(format!("hlhs_lv_scale {} must lie in (0, 1)", self.hlhs_lv_scale));
        }
        if self.stream_counts().2 < View::CARDIAC.len() {
            return bad("frames_per_patient leaves fewer than three cardiac frames".into());
        }
        Ok(())
    }

    /// Per-patient (contaminant, non-cardiac, cardiac) frame counts.
    pub fn stream_counts(&self) -> (usize, usize, usize) {
        let n = self.frames_per_patient;
        let contam = (self.contaminant_fraction * n as f64).round() as usize;
        let background = (self.background_fraction * n as f64).round() as usize;
        (contam, background, n.saturating_sub(contam + background))
    }

    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn n_patients(&self) -> usize {
        self.n_patients_nc + self.n_patients_hlhs
    }
}

/// Independent random streams derived from one seed.
pub(crate) mod stream {
    pub const ANATOMY: u64 = 0x616e_6174;
    pub const NUISANCE: u64 = 0x6e75_6973;
    pub const JITTER: u64 = 0x6a69_7474;
    pub const NOISE: u64 = 0x6e6f_6973;
    pub const CONTAMINANT: u64 = 0x636f_6e74;
    pub const STREAM: u64 = 0x7374_726d;
}

/// Hashes a seed together with a list of words (SplitMix64 finaliser).
pub fn mix_seed(seed: u64, words: &[u64]) -> u64 {
    fn finalise(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut z = finalise(seed.wrapping_add(GOLDEN));
    for &w in words {
        z = finalise(z.rotate_left(23).wrapping_add(finalise(w.wrapping_add(GOLDEN))));
    }
    z
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, &[stream]))
}

/// Heart placement for one frame: patient anatomy composed with frame jitter.
fn placement(patient_seed: u64, frame_seed: u64, h: usize, w: usize) -> Placement {
    let mut anatomy = rng_for(patient_seed, stream::ANATOMY);
    let unit = h.min(w) as f64;
    let p_scale = anatomy.gen_range(0.9..1.1);
    let p_dy = anatomy.gen_range(-0.04..0.04) * unit;
    let p_dx = anatomy.gen_range(-0.04..0.04) * unit;
    let mut jitter = rng_for(frame_seed, stream::JITTER);
    Placement {
        cy: h as f64 / 2.0 + p_dy + jitter.gen_range(-0.02..0.02) * unit,
        cx: w as f64 / 2.0 + p_dx + jitter.gen_range(-0.02..0.02) * unit,
        scale: unit * p_scale * jitter.gen_range(0.96..1.04),
        angle: jitter.gen_range(-0.12..0.12),
    }
}

/// Structures rendered for a cardiac frame, exactly as `generate_frame`
/// places them.
pub fn cardiac_layout(
    view: View,
    pathology: Pathology,
    patient_seed: u64,
    frame_seed: u64,
    config: &PhantomConfig,
) -> Vec<(Structure, Shape)> {
    let place = placement(patient_seed, frame_seed, config.image_height, config.image_width);
    render::heart_layout(view, pathology, config.hlhs_lv_scale, &place)
}

/// Renders one cardiac B-mode frame.
pub fn generate_frame(
    view: View,
    pathology: Pathology,
    quality: Quality,
    patient_seed: u64,
    frame_seed: u64,
    config: &PhantomConfig,
) -> Result<Frame> {
    if view == View::Background {
        return Err(Error::InvalidArgument(
            "generate_frame renders cardiac views only; use generate_background_frame".into(),
        ));
    }
    config.validate()?;
    let (h, w) = (config.image_height, config.image_width);
    let layout = cardiac_layout(view, pathology, patient_seed, frame_seed, config);
    let texture = NuisanceTexture::sample(&mut rng_for(patient_seed, stream::NUISANCE));
    let mut img = render::background_field(h, w, &texture, config.nuisance_strength);
    let mut jitter = rng_for(frame_seed, stream::JITTER ^ 1);
    let level = render::STRUCTURE_LEVEL * jitter.gen_range(0.92..1.08);
    let cov = render::union_coverage(layout.iter().map(|(_, s)| s), h, w);
    render::composite(&mut img, &cov, level);
    Ok(finish_frame(img, h, w, FrameKind::BMode, view, pathology, quality, frame_seed))
}

/// Renders a B-mode frame of non-cardiac anatomy (a spine-like chain of
/// bright dots beside a large dim structure).
pub fn generate_background_frame(
    pathology: Pathology,
    quality: Quality,
    patient_seed: u64,
    frame_seed: u64,
    config: &PhantomConfig,
) -> Result<Frame> {
    config.validate()?;
    let (h, w) = (config.image_height, config.image_width);
    let unit = h.min(w) as f64;
    let texture = NuisanceTexture::sample(&mut rng_for(patient_seed, stream::NUISANCE));
    let mut img = render::background_field(h, w, &texture, config.nuisance_strength);
    let mut rng = rng_for(frame_seed, stream::JITTER);
    let body = Shape::Ellipse {
        cy: h as f64 * rng.gen_range(0.35..0.65),
        cx: w as f64 * rng.gen_range(0.35..0.65),
        ry: unit * rng.gen_range(0.25..0.35),
        rx: unit * rng.gen_range(0.15..0.25),
        angle: rng.gen_range(0.0..std::f64::consts::PI),
    };
    render::composite(&mut img, &body.coverage(h, w), 95.0);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (sy, sx) = (h as f64 * rng.gen_range(0.3..0.7), w as f64 * rng.gen_range(0.3..0.7));
    let dots: Vec<Shape> = (-3..=3)
        .map(|k| {
            let t = k as f64 * 0.06 * unit;
            Shape::Ellipse {
                cy: sy + t * angle.sin(),
                cx: sx + t * angle.cos(),
                ry: 0.022 * unit,
                rx: 0.022 * unit,
                angle: 0.0,
            }
        })
        .collect();
    let cov = render::union_coverage(&dots, h, w);
    render::composite(&mut img, &cov, 230.0);
    Ok(finish_frame(
        img,
        h,
        w,
        FrameKind::BMode,
        View::Background,
        pathology,
        quality,
        frame_seed,
    ))
}

#[allow(clippy::too_many_arguments)]
fn finish_frame(
    img: Vec<f64>,
    h: usize,
    w: usize,
    kind: FrameKind,
    view: View,
    pathology: Pathology,
    quality: Quality,
    frame_seed: u64,
) -> Frame {
    let (sigma, blur) = quality.degradation();
    let pixels = render::degrade(&img, h, w, sigma, blur, &mut rng_for(frame_seed, stream::NOISE));
    Frame {
        height: h,
        width: w,
        channels: 1,
        pixels,
        kind,
        view,
        pathology,
        quality,
        patient_id: 0,
        frame_id: 0,
    }
}

/// Renders a Doppler, split-view or M-mode frame.
pub fn generate_contaminant(kind: FrameKind, frame_seed: u64, config: &PhantomConfig) -> Result<Frame> {
    config.validate()?;
    Ok(match kind {
        FrameKind::Doppler => contaminant::doppler(frame_seed, config),
        FrameKind::SplitView => contaminant::split_view(frame_seed, config),
        FrameKind::MMode => contaminant::m_mode(frame_seed, config),
        FrameKind::BMode => {
            return Err(Error::InvalidArgument(
                "generate_contaminant does not render B-mode frames".into(),
            ))
        }
    })
}

/// What a stream slot will hold.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Cardiac(View),
    NonCardiac,
    Contaminant(FrameKind),
}

/// Per-patient facts fixed before any frame is rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientPlan {
    pub patient_id: u32,
    pub pathology: Pathology,
    pub split: Split,
    pub seed: u64,
}

/// Patients in id order (NC first, then HLHS) with their splits. Within each
/// class the sorted ids are sliced 80 / 10 / 10 into Train / Val / Test.
pub fn plan_patients(config: &PhantomConfig) -> Vec<PatientPlan> {
    let mut plans = Vec::with_capacity(config.n_patients());
    let mut next_id = 0u32;
    for (pathology, n) in [(Pathology::Nc, config.n_patients_nc), (Pathology::Hlhs, config.n_patients_hlhs)] {
        let (n_val, n_test) = holdout_counts(n);
        let n_train = n - n_val - n_test;
        for k in 0..n {
            let split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            plans.push(PatientPlan {
                patient_id: next_id,
                pathology,
                split,
                seed: mix_seed(config.master_seed, &[stream::ANATOMY, next_id as u64]),
            });
            next_id += 1;
        }
    }
    plans
}

fn holdout_counts(n: usize) -> (usize, usize) {
    if n < 3 {
        return (0, 0);
    }
    let k = ((n as f64) * 0.1).round().max(1.0) as usize;
    (k, k)
}

/// Lazily renders every frame of the dataset in manifest order.
pub struct PhantomStream<'a> {
    config: &'a PhantomConfig,
    plans: Vec<PatientPlan>,
    patient: usize,
    slots: Vec<(Slot, Quality)>,
    slot: usize,
    next_frame_id: u32,
}

impl<'a> PhantomStream<'a> {
    pub fn new(config: &'a PhantomConfig) -> Result<Self> {
        config.validate()?;
        let plans = plan_patients(config);
        let mut s = Self {
            config,
            plans,
            patient: 0,
            slots: Vec::new(),
            slot: 0,
            next_frame_id: 0,
        };
        s.load_slots();
        Ok(s)
    }

    fn load_slots(&mut self) {
        self.slots.clear();
        self.slot = 0;
        let Some(plan) = self.plans.get(self.patient) else {
            return;
        };
        let mut rng = rng_for(plan.seed, stream::STREAM);
        let (n_contam, n_bg, n_cardiac) = self.config.stream_counts();
        let weights: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let mut slots = Vec::with_capacity(self.config.frames_per_patient);
        for k in 0..n_cardiac {
            let view = if k < 3 {
                View::CARDIAC[k]
            } else {
                let mut u = rng.gen_range(0.0..total);
                let mut pick = 2;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                View::CARDIAC[pick]
            };
            slots.push(Slot::Cardiac(view));
        }
        slots.extend(std::iter::repeat_n(Slot::NonCardiac, n_bg));
        let start = rng.gen_range(0..3);
        slots.extend((0..n_contam).map(|k| Slot::Contaminant(FrameKind::CONTAMINANTS[(start + k) % 3])));
        slots.shuffle(&mut rng);
        let mix = self.config.quality_mix;
        self.slots = slots
            .into_iter()
            .map(|slot| {
                let u: f64 = rng.gen();
                let q = if u < mix[0] {
                    Quality::Low
                } else if u < mix[0] + mix[1] {
                    Quality::Medium
                } else {
                    Quality::High
                };
                (slot, q)
            })
            .collect();
    }

    fn render(&self, plan: &PatientPlan, slot: Slot, quality: Quality, frame_seed: u64) -> Result<Frame> {
        let c = self.config;
        let mut frame = match slot {
            Slot::Cardiac(view) => generate_frame(view, plan.pathology, quality, plan.seed, frame_seed, c)?,
            Slot::NonCardiac => generate_background_frame(plan.pathology, quality, plan.seed, frame_seed, c)?,
            Slot::Contaminant(kind) => {
                let mut f = generate_contaminant(kind, frame_seed, c)?;
                f.pathology = plan.pathology;
                f.quality = quality;
                f
            }
        };
        frame.patient_id = plan.patient_id;
        frame.frame_id = self.next_frame_id;
        Ok(frame)
    }
}

impl Iterator for PhantomStream<'_> {
    type Item = Result<(ManifestRecord, Frame)>;

    fn next(&mut self) -> Option<Self::Item> {
        while self.slot >= self.slots.len() {
            if self.patient >= self.plans.len() {
                return None;
            }
            self.patient += 1;
            self.load_slots();
        }
        let plan = self.plans[self.patient].clone();
        let (slot, quality) = self.slots[self.slot];
        let frame_seed = mix_seed(plan.seed, &[stream::JITTER, self.slot as u64]);
        let result = self.render(&plan, slot, quality, frame_seed).map(|frame| {
            let ext = if frame.channels == 3 { "ppm" } else { "pgm" };
            let record = ManifestRecord {
                patient_id: plan.patient_id,
                frame_id: frame.frame_id,
                file_path: format!("frames/p{:03}/f{:06}.{ext}", plan.patient_id, frame.frame_id),
                kind: frame.kind,
                view: frame.view,
                pathology: frame.pathology,
                quality: frame.quality,
                split: plan.split,
                disposition: None,
                curated_view: None,
                confidence: None,
            };
            (record, frame)
        });
        self.slot += 1;
        self.next_frame_id += 1;
        Some(result)
    }
}

/// Renders the whole dataset under `output_dir` and writes
/// `output_dir/manifest.json` last.
pub fn generate_dataset(config: &PhantomConfig, output_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let mut records = Vec::new();
    for item in PhantomStream::new(config)? {
        let (record, frame) = item?;
        save_frame(&frame, &output_dir.join(&record.file_path))?;
        records.push(record);
    }
    let manifest = DatasetManifest {
        records,
        config_digest: config.digest(),
    };
    manifest.save(&output_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub const MANIFEST_FILE: &str = "manifest.json";
