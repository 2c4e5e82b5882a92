//! Two-stage curation of raw frame streams: B-mode filtering by colour,
//! split-screen and M-mode tests, then standard-plane extraction with a
//! four-class view classifier.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, Pathology, View};
use crate::manifest::DispositionKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub color_spread_threshold: f64,
    pub color_fraction_threshold: f64,
    pub split_band_intensity: f64,
    pub split_band_width: usize,
    pub mmode_autocorr_threshold: f64,
    pub plane_confidence_threshold: f64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            color_spread_threshold: 30.0,
            color_fraction_threshold: 0.05,
            split_band_intensity: 5.0,
            split_band_width: 4,
            mmode_autocorr_threshold: 0.9,
            plane_confidence_threshold: 0.7,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            self.color_spread_threshold,
            self.color_fraction_threshold,
            self.split_band_intensity,
            self.mmode_autocorr_threshold,
            self.plane_confidence_threshold,
        ];
        if reals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("curation thresholds must be finite".into()));
        }
        if !(self.plane_confidence_threshold > 0.0 && self.plane_confidence_threshold < 1.0) {
            return Err(Error::Config(format!(
                "plane_confidence_threshold {} must lie in (0, 1)",
                self.plane_confidence_threshold
            )));
        }
        if self.split_band_width == 0 {
            return Err(Error::Config("split_band_width must be positive".into()));
        }
        Ok(())
    }
}

/// What curation decided for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Disposition {
    KeptPlane { view: View, confidence: f64 },
    RejectedDoppler,
    RejectedSplitView,
    RejectedMMode,
    RejectedBackground,
    RejectedLowConfidence,
}

impl Disposition {
    pub fn kind(&self) -> DispositionKind {
        match self {
            Disposition::KeptPlane { .. } => DispositionKind::KeptPlane,
            Disposition::RejectedDoppler => DispositionKind::RejectedDoppler,
            Disposition::RejectedSplitView => DispositionKind::RejectedSplitView,
            Disposition::RejectedMMode => DispositionKind::RejectedMMode,
            Disposition::RejectedBackground => DispositionKind::RejectedBackground,
            Disposition::RejectedLowConfidence => DispositionKind::RejectedLowConfidence,
        }
    }
}

/// Per-frame dispositions for one curation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub dispositions: Vec<(u32, Disposition)>,
    pub counts: BTreeMap<DispositionKind, usize>,
    /// `confusion[truth][assigned]` over kept frames, class order 4CH,
    /// LVOT, RVOT, Background. Evaluation only.
    pub confusion: [[usize; 4]; 4],
    /// Kept frames whose assigned view matches the generator view, per
    /// pathology: (agreeing, kept).
    pub agreement: BTreeMap<Pathology, (usize, usize)>,
}

impl CurationReport {
    fn record(&mut self, frame: &Frame, d: Disposition) {
        *self.counts.entry(d.kind()).or_default() += 1;
        if let Disposition::KeptPlane { view, .. } = d {
            self.confusion[frame.view.index()][view.index()] += 1;
            let e = self.agreement.entry(frame.pathology).or_default();
            e.1 += 1;
            if view == frame.view {
                e.0 += 1;
            }
        }
        self.dispositions.push((frame.frame_id, d));
    }

    pub fn merge(mut self, other: CurationReport) -> CurationReport {
        self.dispositions.extend(other.dispositions);
        for (k, v) in other.counts {
            *self.counts.entry(k).or_default() += v;
        }
        for (i, row) in other.confusion.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                self.confusion[i][j] += v;
            }
        }
        for (p, (a, n)) in other.agreement {
            let e = self.agreement.entry(p).or_default();
            e.0 += a;
            e.1 += n;
        }
        self
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn count(&self, kind: DispositionKind) -> usize {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    pub fn agreement_rate(&self, pathology: Pathology) -> Option<f64> {
        self.agreement
            .get(&pathology)
            .filter(|(_, n)| *n > 0)
            .map(|(a, n)| *a as f64 / *n as f64)
    }
}

pub fn detect_doppler(frame: &Frame, config: &CurationConfig) -> bool {
    if frame.channels != 3 {
        return false;
    }
    let coloured = frame
        .pixels
        .chunks_exact(3)
        .filter(|px| {
            let hi = px[0].max(px[1]).max(px[2]);
            let lo = px[0].min(px[1]).min(px[2]);
            hi - lo > config.color_spread_threshold
        })
        .count();
    coloured as f64 / (frame.height * frame.width) as f64 > config.color_fraction_threshold
}

fn column_band_mean(gray: &[f64], h: usize, w: usize, cols: std::ops::Range<usize>) -> f64 {
    if cols.is_empty() {
        return 0.0;
    }
    let n = cols.len() * h;
    let mut sum = 0.0;
    for i in 0..h {
        sum += gray[i * w + cols.start..i * w + cols.end].iter().sum::<f64>();
    }
    sum / n as f64
}

pub fn detect_splitview(frame: &Frame, config: &CurationConfig) -> bool {
    let (h, w) = (frame.height, frame.width);
    let bw = config.split_band_width;
    if bw + 2 > w {
        return false;
    }
    let gray = frame.gray();
    let start = (w - bw) / 2;
    let band = column_band_mean(&gray, h, w, start..start + bw);
    if band >= config.split_band_intensity {
        return false;
    }
    let need = 4.0 * band + 10.0;
    column_band_mean(&gray, h, w, 0..start) >= need && column_band_mean(&gray, h, w, start + bw..w) >= need
}

/// Mean lag-1 autocorrelation of the rows of a `rows×w` region. Rows with no
/// variance are skipped; a region with none left scores 0.
pub fn mean_row_autocorrelation(region: &[f64], w: usize) -> f64 {
    let mut total = 0.0;
    let mut rows = 0usize;
    for row in region.chunks_exact(w) {
        let mean = row.iter().sum::<f64>() / w as f64;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum();
        if var <= 0.0 {
            continue;
        }
        let cov: f64 = row.windows(2).map(|p| (p[0] - mean) * (p[1] - mean)).sum();
        total += cov / var;
        rows += 1;
    }
    if rows == 0 {
        0.0
    } else {
        total / rows as f64
    }
}

/// Share of a region's values in the top tenth of its own intensity range.
pub fn top_decile_mass(region: &[f64]) -> f64 {
    let lo = region.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = region.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return 0.0;
    }
    let cut = lo + 0.9 * (hi - lo);
    region.iter().filter(|&&v| v >= cut).count() as f64 / region.len() as f64
}

pub const MMODE_BRIGHT_MASS: f64 = 0.3;

pub fn detect_mmode(frame: &Frame, config: &CurationConfig) -> bool {
    let (h, w) = (frame.height, frame.width);
    if h < 2 || w < 2 {
        return false;
    }
    let gray = frame.gray();
    let lower = &gray[(h / 2) * w..];
    mean_row_autocorrelation(lower, w) >= config.mmode_autocorr_threshold && top_decile_mass(lower) >= MMODE_BRIGHT_MASS
}

/// First detector to fire, in the order Doppler, split-view, M-mode.
pub fn contaminant_disposition(frame: &Frame, config: &CurationConfig) -> Option<Disposition> {
    if detect_doppler(frame, config) {
        Some(Disposition::RejectedDoppler)
    } else if detect_splitview(frame, config) {
        Some(Disposition::RejectedSplitView)
    } else if detect_mmode(frame, config) {
        Some(Disposition::RejectedMMode)
    } else {
        None
    }
}

/// Drops contaminants and returns the survivors as single-channel frames.
pub fn bmode_filter(frames: Vec<Frame>, config: &CurationConfig) -> (Vec<Frame>, CurationReport) {
    let mut report = CurationReport::default();
    let mut kept = Vec::with_capacity(frames.len());
    for frame in frames {
        match contaminant_disposition(&frame, config) {
            Some(d) => report.record(&frame, d),
            None => kept.push(frame.to_grayscale()),
        }
    }
    (kept, report)
}

/// Anything that scores frames over (4CH, LVOT, RVOT, Background).
pub trait ViewClassifier {
    fn view_probabilities(&self, frames: &[Frame]) -> Result<Vec<[f64; 4]>>;
}

/// Plane decision from one probability vector.
pub fn plane_disposition(probs: &[f64; 4], config: &CurationConfig) -> Disposition {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    let view = View::from_index(best).expect("four classes");
    if view == View::Background {
        Disposition::RejectedBackground
    } else if probs[best] < config.plane_confidence_threshold {
        Disposition::RejectedLowConfidence
    } else {
        Disposition::KeptPlane {
            view,
            confidence: probs[best],
        }
    }
}

pub fn extract_planes(
    kept: &[Frame],
    model: &dyn ViewClassifier,
    config: &CurationConfig,
) -> Result<CurationReport> {
    let probs = model.view_probabilities(kept)?;
    if probs.len() != kept.len() {
        return Err(Error::Shape(format!(
            "view classifier returned {} rows for {} frames",
            probs.len(),
            kept.len()
        )));
    }
    let mut report = CurationReport::default();
    for (frame, p) in kept.iter().zip(&probs) {
        report.record(frame, plane_disposition(p, config));
    }
    Ok(report)
}
