//! Frame-level and patient-level diagnostic metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Pathology, Quality};
use crate::network::PredictionRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when there were no positive predictions.
    pub precision_undefined: bool,
    /// Set when there were no positive labels.
    pub recall_undefined: bool,
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn precision_recall_f1(predictions: &[usize], labels: &[usize], positive: usize) -> Prf {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == positive, l == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Prf {
        precision,
        recall,
        f1: f1_score(precision, recall),
        precision_undefined: tp + fp == 0,
        recall_undefined: tp + fn_ == 0,
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from mid-ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("ROC-AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // doubled ranks keep mid-ranks integral
    let mut pos_rank2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        pos_rank2 += mid2 * order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        i = j + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    let u2 = pos_rank2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stratum {
    All,
    MedHigh,
    High,
    RetainedOnly,
}

impl Stratum {
    pub const STANDARD: [Stratum; 4] = [Stratum::All, Stratum::MedHigh, Stratum::High, Stratum::RetainedOnly];

    pub fn label(self) -> &'static str {
        match self {
            Stratum::All => "All",
            Stratum::MedHigh => "Med-High",
            Stratum::High => "High",
            Stratum::RetainedOnly => "Retained",
        }
    }

    pub fn includes(self, p: &PredictionRecord) -> bool {
        match self {
            Stratum::All => true,
            Stratum::MedHigh => p.quality != Quality::Low,
            Stratum::High => p.quality == Quality::High,
            Stratum::RetainedOnly => p.reliable == Some(true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Class order NC, HLHS.
    pub precision: [f64; 2],
    pub recall: [f64; 2],
    pub f1: [f64; 2],
    /// Absent when the stratum holds a single class.
    pub roc_auc: Option<f64>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stratum: Stratum,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_mode: Option<String>,
    pub n_frames: usize,
    /// Frames of the stratum's quality tiers that the reliability filter kept.
    pub n_retained: usize,
    /// Absent for an empty stratum.
    pub metrics: Option<Metrics>,
    /// Patient-level AUC over mean HLHS probability; abstaining patients
    /// are left out.
    pub patient_auc: Option<f64>,
}

pub fn frame_metrics(preds: &[&PredictionRecord]) -> Option<Metrics> {
    if preds.is_empty() {
        return None;
    }
    let predicted: Vec<usize> = preds.iter().map(|p| p.chd_argmax).collect();
    let labels: Vec<usize> = preds.iter().map(|p| p.pathology.index()).collect();
    let mut flags = Vec::new();
    let mut precision = [0.0; 2];
    let mut recall = [0.0; 2];
    let mut f1 = [0.0; 2];
    for class in [Pathology::Nc, Pathology::Hlhs] {
        let r = precision_recall_f1(&predicted, &labels, class.index());
        precision[class.index()] = r.precision;
        recall[class.index()] = r.recall;
        f1[class.index()] = r.f1;
        if r.precision_undefined {
            flags.push(format!("no {class:?} predictions"));
        }
        if r.recall_undefined {
            flags.push(format!("no {class:?} frames"));
        }
    }
    let scores: Vec<f64> = preds.iter().map(|p| p.hlhs_prob()).collect();
    let positives: Vec<bool> = preds.iter().map(|p| p.pathology == Pathology::Hlhs).collect();
    let roc_auc = roc_auc(&scores, &positives).ok();
    if roc_auc.is_none() {
        flags.push("single class, no ROC-AUC".into());
    }
    Some(Metrics {
        precision,
        recall,
        f1,
        roc_auc,
        flags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PatientScore {
    Score(f64),
    Abstain,
}

/// Mean HLHS probability over each patient's retained frames. A frame is
/// retained unless it was marked unreliable.
pub fn aggregate_patient(preds: &[PredictionRecord]) -> BTreeMap<u32, PatientScore> {
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for p in preds {
        let e = acc.entry(p.patient_id).or_default();
        if p.reliable != Some(false) {
            e.0 += p.hlhs_prob();
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(id, (s, n))| {
            let score = if n == 0 {
                PatientScore::Abstain
            } else {
                PatientScore::Score(s / n as f64)
            };
            (id, score)
        })
        .collect()
}

fn patient_auc(preds: &[&PredictionRecord]) -> Option<f64> {
    let owned: Vec<PredictionRecord> = preds.iter().map(|p| (*p).clone()).collect();
    let labels: BTreeMap<u32, Pathology> = preds.iter().map(|p| (p.patient_id, p.pathology)).collect();
    let mut scores = Vec::new();
    let mut positives = Vec::new();
    for (id, s) in aggregate_patient(&owned) {
        if let PatientScore::Score(s) = s {
            scores.push(s);
            positives.push(labels[&id] == Pathology::Hlhs);
        }
    }
    roc_auc(&scores, &positives).ok()
}

/// Reports for each stratum over one prediction set.
pub fn stratified_report(
    preds: &[PredictionRecord],
    strata: &[Stratum],
    strategy: Option<&str>,
    lambda_mode: Option<&str>,
) -> Vec<EvalReport> {
    strata
        .iter()
        .map(|&stratum| {
            let selected: Vec<&PredictionRecord> = preds.iter().filter(|p| stratum.includes(p)).collect();
            let n_retained = if stratum == Stratum::RetainedOnly {
                selected.len()
            } else {
                selected.iter().filter(|p| p.reliable != Some(false)).count()
            };
            EvalReport {
                stratum,
                strategy: strategy.map(str::to_string),
                lambda_mode: lambda_mode.map(str::to_string),
                n_frames: selected.len(),
                n_retained,
                metrics: frame_metrics(&selected),
                patient_auc: patient_auc(&selected),
            }
        })
        .collect()
}

fn pair(v: [f64; 2]) -> String {
    format!("{:.4}:{:.4}", v[0], v[1])
}

/// Aligned text table with the columns Loss, Test Quality, Precision,
/// Recall, F1 (each NC:CHD) and ROC-AUC.
pub fn format_table(reports: &[EvalReport]) -> String {
    let header = ["Loss", "Test Quality", "Precision NC:CHD", "Recall NC:CHD", "F1 NC:CHD", "ROC-AUC", "Frames"];
    let mut rows: Vec<[String; 7]> = Vec::new();
    for r in reports {
        let loss = r.lambda_mode.clone().unwrap_or_else(|| "-".into());
        let (p, rc, f, auc) = match &r.metrics {
            Some(m) => (
                pair(m.precision),
                pair(m.recall),
                pair(m.f1),
                m.roc_auc.map_or("n/a".into(), |a| format!("{a:.4}")),
            ),
            None => ("n/a".into(), "n/a".into(), "n/a".into(), "n/a".into()),
        };
        rows.push([loss, r.stratum.label().into(), p, rc, f, auc, r.n_frames.to_string()]);
    }
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |cells: &[&str], out: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&header, &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let rule: Vec<&str> = rule.iter().map(String::as_str).collect();
    line(&rule, &mut out);
    for row in &rows {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&cells, &mut out);
    }
    out
}
