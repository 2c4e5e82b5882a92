//! End-to-end steps shared by the command line and the test suites.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chart::line_chart;
use crate::config::RunConfig;
use crate::curation::{bmode_filter, extract_planes, CurationReport, Disposition};
use crate::error::{Error, Result};
use crate::evaluation::{format_table, roc_auc, stratified_report, EvalReport, Stratum};
use crate::frame::{Frame, FrameKind, Pathology, View};
use crate::manifest::{load_frame, DatasetManifest, DispositionKind, ManifestRecord, Split};
use crate::network::{build_model, load_checkpoint, predict_all, save_checkpoint, ArchConfig, ModelParams, PredictionRecord};
use crate::phantom::{generate_dataset, mix_seed, MANIFEST_FILE};
use crate::resize::resize_frame;
use crate::robust::{apply_verdicts, assess_frames, PerturbationConfig, ReliabilityVerdict, Retention, Strategy};
use crate::training::{fit, train, write_metrics_log, EpochMetrics, FrameSet, LambdaMode, Monitor, TrainConfig};

pub const CURATED_MANIFEST: &str = "curated_manifest.json";
pub const VIEW_MODEL: &str = "view_model.ckpt";
pub const ABLATION_STEPS: [usize; 4] = [1, 2, 4, 8];
pub const ABLATION_STRATA: [Stratum; 3] = [Stratum::All, Stratum::MedHigh, Stratum::High];

const VIEW_MODEL_STREAM: u64 = 0x7669_6577;

pub fn checkpoint_path(config: &RunConfig, mode: LambdaMode) -> PathBuf {
    config.paths.model_path.join(format!("{}.ckpt", mode.name()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn generate(config: &RunConfig) -> Result<DatasetManifest> {
    config.validate()?;
    generate_dataset(&config.phantom, &config.paths.data_dir)
}

/// Patient and frame counts per class and split.
pub fn dataset_summary(manifest: &DatasetManifest) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<6} {:>8} {:>8} {:>8} {:>10} {:>12}", "class", "train", "val", "test", "frames", "cardiac");
    for p in [Pathology::Nc, Pathology::Hlhs] {
        let recs: Vec<&ManifestRecord> = manifest.records.iter().filter(|r| r.pathology == p).collect();
        let patients = |s: Split| {
            let mut ids: Vec<u32> = recs.iter().filter(|r| r.split == s).map(|r| r.patient_id).collect();
            ids.dedup();
            ids.len()
        };
        let cardiac = recs.iter().filter(|r| r.kind == FrameKind::BMode && r.view.is_cardiac()).count();
        let _ = writeln!(
            out,
            "{:<6} {:>8} {:>8} {:>8} {:>10} {:>12}",
            format!("{p:?}").to_uppercase(),
            patients(Split::Train),
            patients(Split::Val),
            patients(Split::Test),
            recs.len(),
            cardiac
        );
    }
    out
}

/// Precision and recall of one contaminant detector against generator kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorScore {
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub actual: usize,
}

pub fn detector_scores(records: &[ManifestRecord], report: &CurationReport) -> BTreeMap<FrameKind, DetectorScore> {
    let by_id: BTreeMap<u32, DispositionKind> = report.dispositions.iter().map(|(id, d)| (*id, d.kind())).collect();
    let pairs = [
        (FrameKind::Doppler, DispositionKind::RejectedDoppler),
        (FrameKind::SplitView, DispositionKind::RejectedSplitView),
        (FrameKind::MMode, DispositionKind::RejectedMMode),
    ];
    pairs
        .into_iter()
        .map(|(kind, disp)| {
            let mut tp = 0;
            let mut predicted = 0;
            let mut actual = 0;
            for r in records {
                let hit = by_id.get(&r.frame_id) == Some(&disp);
                predicted += usize::from(hit);
                actual += usize::from(r.kind == kind);
                tp += usize::from(hit && r.kind == kind);
            }
            let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
            let score = DetectorScore {
                precision: ratio(tp, predicted),
                recall: ratio(tp, actual),
                true_positives: tp,
                predicted,
                actual,
            };
            (kind, score)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurationSummary {
    pub counts: BTreeMap<DispositionKind, usize>,
    pub detectors: BTreeMap<FrameKind, DetectorScore>,
    /// Rows: generator view; columns: assigned view (4CH, LVOT, RVOT, Background).
    pub confusion: [[usize; 4]; 4],
    pub nc_agreement: Option<f64>,
    pub hlhs_agreement: Option<f64>,
}

pub struct CurationOutcome {
    pub manifest: DatasetManifest,
    pub report: CurationReport,
    pub summary: CurationSummary,
    pub view_model: ModelParams,
}

fn view_model_arch(arch: &ArchConfig) -> ArchConfig {
    ArchConfig { view_classes: 4, ..*arch }
}

/// Trains the four-class plane classifier on NC frames with generator views.
pub fn train_view_model(
    arch: &ArchConfig,
    train_set: &FrameSet,
    val_set: &FrameSet,
    config: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<EpochMetrics>)> {
    let arch = view_model_arch(arch);
    let model = build_model(&arch, mix_seed(seed, &[VIEW_MODEL_STREAM]))?;
    let tc = TrainConfig {
        lambda_mode: LambdaMode::Fixed1,
        seed: mix_seed(seed, &[VIEW_MODEL_STREAM, 1]),
        ..config.clone()
    };
    fit(model, train_set, val_set, &tc, Monitor::ViewAccuracy)
}

pub fn curate(config: &RunConfig) -> Result<CurationOutcome> {
    config.validate()?;
    let data_dir = &config.paths.data_dir;
    let mut manifest = DatasetManifest::load(&data_dir.join(MANIFEST_FILE))?;
    let (h, w) = (config.arch.input_h, config.arch.input_w);

    let mut report = CurationReport::default();
    let mut survivors: Vec<Frame> = Vec::new();
    let mut view_train = FrameSet::default();
    let mut view_val = FrameSet::default();
    let split_of: BTreeMap<u32, Split> = manifest.records.iter().map(|r| (r.frame_id, r.split)).collect();
    for group in manifest.records.chunk_by(|a, b| a.patient_id == b.patient_id) {
        let frames = group.iter().map(|r| load_frame(r, data_dir)).collect::<Result<Vec<_>>>()?;
        let (kept, fragment) = bmode_filter(frames, &config.curation);
        report = report.merge(fragment);
        for f in kept {
            let small = resize_frame(&f, h, w)?;
            if small.pathology == Pathology::Nc {
                match split_of[&small.frame_id] {
                    Split::Train => view_train.push(small.clone(), 0, small.view.index()),
                    Split::Val => view_val.push(small.clone(), 0, small.view.index()),
                    Split::Test => {}
                }
            }
            survivors.push(small);
        }
    }

    let ckpt = config.paths.model_path.join(VIEW_MODEL);
    let view_model = if ckpt.exists() {
        let m = load_checkpoint(&ckpt)?;
        if m.arch != view_model_arch(&config.arch) {
            return Err(Error::Config(format!("{} does not match the configured architecture", ckpt.display())));
        }
        m
    } else {
        if view_train.is_empty() || view_val.is_empty() {
            return Err(Error::InvalidArgument("no NC frames to train the view model".into()));
        }
        let (m, log) = train_view_model(&config.arch, &view_train, &view_val, &config.train, config.seed)?;
        ensure_dir(&config.paths.model_path)?;
        ensure_dir(&config.paths.report_dir)?;
        save_checkpoint(&m, &ckpt)?;
        write_metrics_log(&config.paths.report_dir.join("train_view_model.jsonl"), &log)?;
        m
    };

    let planes = extract_planes(&survivors, &view_model, &config.curation)?;
    report = report.merge(planes);
    let by_id: BTreeMap<u32, Disposition> = report.dispositions.iter().copied().collect();
    for r in &mut manifest.records {
        let d = by_id
            .get(&r.frame_id)
            .ok_or_else(|| Error::Graph(format!("frame {} received no disposition", r.frame_id)))?;
        r.disposition = Some(d.kind());
        if let Disposition::KeptPlane { view, confidence } = d {
            r.curated_view = Some(*view);
            r.confidence = Some(*confidence);
        }
    }
    let summary = CurationSummary {
        counts: report.counts.clone(),
        detectors: detector_scores(&manifest.records, &report),
        confusion: report.confusion,
        nc_agreement: report.agreement_rate(Pathology::Nc),
        hlhs_agreement: report.agreement_rate(Pathology::Hlhs),
    };
    manifest.save(&data_dir.join(CURATED_MANIFEST))?;
    ensure_dir(&config.paths.report_dir)?;
    write_json(&config.paths.report_dir.join("curation_report.json"), &summary)?;
    Ok(CurationOutcome {
        manifest,
        report,
        summary,
        view_model,
    })
}

pub fn load_curated(config: &RunConfig) -> Result<DatasetManifest> {
    DatasetManifest::load(&config.paths.data_dir.join(CURATED_MANIFEST))
}

pub fn train_mode(config: &RunConfig, mode: LambdaMode) -> Result<(ModelParams, Vec<EpochMetrics>)> {
    config.validate()?;
    let manifest = load_curated(config)?;
    let model = build_model(&config.arch, config.seed)?;
    let tc = TrainConfig {
        lambda_mode: mode,
        ..config.train.clone()
    };
    let (model, log) = train(model, &manifest, &config.paths.data_dir, &tc)?;
    ensure_dir(&config.paths.model_path)?;
    ensure_dir(&config.paths.report_dir)?;
    save_checkpoint(&model, &checkpoint_path(config, mode))?;
    write_metrics_log(&config.paths.report_dir.join(format!("train_{}.jsonl", mode.name())), &log)?;
    Ok((model, log))
}

/// Kept Test frames at network resolution with their curated views.
pub struct TestSet {
    pub frames: Vec<Frame>,
    pub curated: Vec<View>,
}

pub fn load_test_set(manifest: &DatasetManifest, base_dir: &Path, arch: &ArchConfig) -> Result<TestSet> {
    let mut frames = Vec::new();
    let mut curated = Vec::new();
    for r in manifest.records.iter().filter(|r| r.split == Split::Test && r.is_kept()) {
        frames.push(resize_frame(&load_frame(r, base_dir)?, arch.input_h, arch.input_w)?);
        curated.push(r.curated_view.expect("kept frames carry a view"));
    }
    if frames.is_empty() {
        return Err(Error::InvalidArgument("curated manifest has no kept Test frames".into()));
    }
    Ok(TestSet { frames, curated })
}

pub fn test_predictions(model: &ModelParams, test: &TestSet) -> Result<Vec<PredictionRecord>> {
    let mut preds = predict_all(model, &test.frames)?;
    for (p, v) in preds.iter_mut().zip(&test.curated) {
        p.curated_view = Some(*v);
    }
    Ok(preds)
}

pub fn verdicts(
    model: &ModelParams,
    test: &TestSet,
    perturbation: &PerturbationConfig,
    strategy: Strategy,
    steps: usize,
) -> Result<Vec<ReliabilityVerdict>> {
    let pc = PerturbationConfig {
        strategy,
        n_steps: steps,
        ..perturbation.clone()
    };
    let labels: Vec<Option<View>> = test.curated.iter().map(|v| Some(*v)).collect();
    assess_frames(model, &test.frames, &labels, &pc)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub strategy: Strategy,
    pub n_steps: usize,
    pub reports: Vec<EvalReport>,
    pub retention: Retention,
}

/// Table rows: every trained mode on all frames, then the filtered mode on
/// Med-High frames and on the frames its reliability filter retains.
pub fn evaluate(config: &RunConfig, strategy: Strategy, filtered_mode: LambdaMode) -> Result<EvaluationOutput> {
    config.validate()?;
    let primary = checkpoint_path(config, filtered_mode);
    if !primary.exists() {
        return Err(Error::io(&primary, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint missing")));
    }
    let manifest = load_curated(config)?;
    let test = load_test_set(&manifest, &config.paths.data_dir, &config.arch)?;
    let mut reports = Vec::new();
    let mut filtered = None;
    for mode in LambdaMode::ALL {
        let path = checkpoint_path(config, mode);
        if !path.exists() {
            continue;
        }
        let model = load_checkpoint(&path)?;
        let preds = test_predictions(&model, &test)?;
        reports.extend(stratified_report(&preds, &[Stratum::All], None, Some(mode.name())));
        if mode == filtered_mode {
            filtered = Some((model, preds));
        }
    }
    let (model, preds) = filtered.expect("primary checkpoint exists");
    let v = verdicts(&model, &test, &config.perturbation, strategy, config.perturbation.n_steps)?;
    let outcome = apply_verdicts(&preds, v)?;
    reports.extend(stratified_report(
        &outcome.annotated,
        &[Stratum::MedHigh, Stratum::RetainedOnly],
        Some(strategy.name()),
        Some(filtered_mode.name()),
    ));
    let out = EvaluationOutput {
        strategy,
        n_steps: config.perturbation.n_steps,
        reports,
        retention: outcome.retention,
    };
    let dir = &config.paths.report_dir;
    ensure_dir(dir)?;
    let stem = format!("eval_{}", strategy.name());
    write_json(&dir.join(format!("{stem}.json")), &out)?;
    write_text(&dir.join(format!("{stem}.txt")), &format_table(&out.reports))?;
    let lines: String = outcome.verdicts.iter().map(|v| v.to_json_line() + "\n").collect();
    write_text(&dir.join(format!("verdicts_{}.jsonl", strategy.name())), &lines)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub steps: usize,
    pub stratum: Stratum,
    /// ROC-AUC over the retained frames of the stratum.
    pub auc: Option<f64>,
    pub retained_fraction: f64,
}

pub fn retained_auc(preds: &[PredictionRecord], stratum: Stratum) -> (Option<f64>, f64) {
    let sel: Vec<&PredictionRecord> = preds.iter().filter(|p| stratum.includes(p)).collect();
    let kept: Vec<&&PredictionRecord> = sel.iter().filter(|p| p.reliable == Some(true)).collect();
    let scores: Vec<f64> = kept.iter().map(|p| p.hlhs_prob()).collect();
    let labels: Vec<bool> = kept.iter().map(|p| p.pathology == Pathology::Hlhs).collect();
    let fraction = if sel.is_empty() { 0.0 } else { kept.len() as f64 / sel.len() as f64 };
    (roc_auc(&scores, &labels).ok(), fraction)
}

/// Every strategy at every step count and stratum. Perturbing strategies
/// run the longest schedule once and read shorter ones off its prefix.
pub fn ablation_rows(model: &ModelParams, test: &TestSet, perturbation: &PerturbationConfig) -> Result<Vec<AblationRow>> {
    let preds = test_predictions(model, test)?;
    let longest = *ABLATION_STEPS.iter().max().expect("nonempty");
    let mut rows = Vec::new();
    for strategy in Strategy::ALL {
        let full = verdicts(model, test, perturbation, strategy, longest)?;
        for steps in ABLATION_STEPS {
            let v: Vec<ReliabilityVerdict> = full.iter().map(|v| v.truncated(steps)).collect();
            let annotated = apply_verdicts(&preds, v)?.annotated;
            for stratum in ABLATION_STRATA {
                let (auc, retained_fraction) = retained_auc(&annotated, stratum);
                rows.push(AblationRow {
                    strategy,
                    steps,
                    stratum,
                    auc,
                    retained_fraction,
                });
            }
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("strategy,steps,stratum,auc,retained_fraction\n");
    for r in rows {
        let auc = r.auc.map(|a| format!("{a:.6}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{auc},{:.6}",
            r.strategy.name(),
            r.steps,
            r.stratum.label(),
            r.retained_fraction
        );
    }
    out
}

/// AUC against stratum, one line per strategy at `steps`, plus the
/// unfiltered baseline.
pub fn ablation_chart(rows: &[AblationRow], baseline: &[Option<f64>], steps: usize) -> String {
    let labels: Vec<&str> = ABLATION_STRATA.iter().map(|s| s.label()).collect();
    let mut series = vec![("all frames".to_string(), baseline.to_vec())];
    for strategy in Strategy::ALL {
        let values = ABLATION_STRATA
            .iter()
            .map(|&st| {
                rows.iter()
                    .find(|r| r.strategy == strategy && r.steps == steps && r.stratum == st)
                    .and_then(|r| r.auc)
            })
            .collect();
        series.push((strategy.name().to_string(), values));
    }
    line_chart(&format!("Retained-frame ROC-AUC, {steps} steps"), "ROC-AUC", &labels, &series)
}

pub fn ablate(config: &RunConfig, mode: LambdaMode) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let path = checkpoint_path(config, mode);
    let model = load_checkpoint(&path)?;
    let manifest = load_curated(config)?;
    let test = load_test_set(&manifest, &config.paths.data_dir, &config.arch)?;
    let rows = ablation_rows(&model, &test, &config.perturbation)?;
    let preds = test_predictions(&model, &test)?;
    let baseline: Vec<Option<f64>> = ABLATION_STRATA
        .iter()
        .map(|&st| {
            let sel: Vec<&PredictionRecord> = preds.iter().filter(|p| st.includes(p)).collect();
            let scores: Vec<f64> = sel.iter().map(|p| p.hlhs_prob()).collect();
            let labels: Vec<bool> = sel.iter().map(|p| p.pathology == Pathology::Hlhs).collect();
            roc_auc(&scores, &labels).ok()
        })
        .collect();
    let dir = &config.paths.report_dir;
    ensure_dir(dir)?;
    write_text(&dir.join("ablation.csv"), &ablation_csv(&rows))?;
    write_text(
        &dir.join("ablation.svg"),
        &ablation_chart(&rows, &baseline, config.perturbation.n_steps),
    )?;
    Ok(rows)
}
