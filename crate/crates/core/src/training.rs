//! Multitask objective and the minibatch trainer.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_momentum_step, MomentumState, Tape, Tensor, Var, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::evaluation::roc_auc;
use crate::frame::{Frame, Pathology};
use crate::manifest::{load_frame, DatasetManifest, Split};
use crate::network::{argmax, scale_input, Heads, ModelParams};
use crate::phantom::mix_seed;
use crate::resize::resize_frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaMode {
    Off,
    Fixed1,
    Weighted,
}

impl LambdaMode {
    pub const ALL: [LambdaMode; 3] = [LambdaMode::Off, LambdaMode::Fixed1, LambdaMode::Weighted];

    pub fn name(self) -> &'static str {
        match self {
            LambdaMode::Off => "off",
            LambdaMode::Fixed1 => "fixed1",
            LambdaMode::Weighted => "weighted",
        }
    }
}

impl std::str::FromStr for LambdaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(LambdaMode::Off),
            "fixed1" => Ok(LambdaMode::Fixed1),
            "weighted" => Ok(LambdaMode::Weighted),
            other => Err(Error::Config(format!("unknown lambda mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Learning rate is multiplied by `lr_decay` every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub lambda_mode: LambdaMode,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Global gradient L2 norm above which the step is rescaled; 0 disables.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            lr: 0.05,
            momentum: 0.9,
            lr_decay: 0.5,
            lr_decay_every: 10,
            lambda_mode: LambdaMode::Weighted,
            seed: 0,
            patience: 10,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.lr_decay_every == 0 {
            return Err(Error::Config("batch_size, epochs and lr_decay_every must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::Config(format!("grad_clip {} must be nonnegative", self.grad_clip)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("momentum must lie in [0, 1) and lr_decay in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

fn one_hot_index(label: &[f64]) -> Result<usize> {
    let ones = label.iter().filter(|&&v| v == 1.0).count();
    let zeros = label.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != label.len() {
        return Err(Error::InvalidArgument(format!("label {label:?} is not one-hot")));
    }
    Ok(label.iter().position(|&v| v == 1.0).expect("one entry is 1"))
}

fn cross_entropy(probs: &[f64], label: &[f64], classes: usize) -> Result<f64> {
    if probs.len() != classes || label.len() != classes {
        return Err(Error::Shape(format!(
            "expected {classes} classes, got {} probabilities and {} labels",
            probs.len(),
            label.len()
        )));
    }
    let t = one_hot_index(label)?;
    Ok(-probs[t].max(PROB_FLOOR).ln())
}

pub fn chd_loss(probs: &[f64], label: &[f64]) -> Result<f64> {
    cross_entropy(probs, label, 2)
}

pub fn view_loss(probs: &[f64], label: &[f64]) -> Result<f64> {
    cross_entropy(probs, label, 3)
}

/// Below this spread the batch is treated as having no ranking.
pub const MINMAX_DEGENERATE: f64 = 1e-12;

pub fn minmax_scale(losses: &[f64]) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument("minmax_scale of an empty batch".into()));
    }
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo >= MINMAX_DEGENERATE) {
        return Ok(vec![0.0; losses.len()]);
    }
    Ok(losses.iter().map(|l| (l - lo) / (hi - lo)).collect())
}

pub fn instance_lambda(scaled_loss: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&scaled_loss) {
        return Err(Error::InvalidArgument(format!("scaled loss {scaled_loss} outside [0, 1]")));
    }
    Ok(1.0 - 0.5 * scaled_loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLossBreakdown {
    pub chd_loss: Vec<f64>,
    /// Absent in `Off` mode, where the view head is never scored.
    pub view_loss: Option<Vec<f64>>,
    pub scaled_loss: Option<Vec<f64>>,
    pub lambda: Option<Vec<f64>>,
    pub total: f64,
}

/// Combines per-sample losses according to the mode.
pub fn combine_losses(chd: &[f64], view: Option<&[f64]>, mode: LambdaMode) -> Result<BatchLossBreakdown> {
    let chd_sum: f64 = chd.iter().sum();
    match mode {
        LambdaMode::Off => Ok(BatchLossBreakdown {
            chd_loss: chd.to_vec(),
            view_loss: None,
            scaled_loss: None,
            lambda: None,
            total: chd_sum,
        }),
        LambdaMode::Fixed1 | LambdaMode::Weighted => {
            let view = view.ok_or_else(|| Error::InvalidArgument("view losses required".into()))?;
            if view.len() != chd.len() {
                return Err(Error::Shape(format!("{} CHD vs {} view losses", chd.len(), view.len())));
            }
            let (scaled, lambda) = if mode == LambdaMode::Weighted {
                let scaled = minmax_scale(chd)?;
                let lambda = scaled.iter().map(|&s| instance_lambda(s)).collect::<Result<Vec<_>>>()?;
                (Some(scaled), lambda)
            } else {
                (None, vec![1.0; chd.len()])
            };
            let total = chd_sum + lambda.iter().zip(view).map(|(l, v)| l * v).sum::<f64>();
            Ok(BatchLossBreakdown {
                chd_loss: chd.to_vec(),
                view_loss: Some(view.to_vec()),
                scaled_loss: scaled,
                lambda: Some(lambda),
                total,
            })
        }
    }
}

/// Records the batch objective. The returned node is the summed loss; the
/// weights λ enter as constants.
pub fn multitask_loss(
    tape: &mut Tape,
    heads: &Heads,
    labels_chd: &[usize],
    labels_view: &[usize],
    mode: LambdaMode,
) -> Result<(Var, BatchLossBreakdown)> {
    let n = tape.value(heads.chd_logits).shape()[0];
    if labels_chd.len() != n || (mode != LambdaMode::Off && labels_view.len() != n) {
        return Err(Error::Shape(format!(
            "batch of {n} with {} CHD and {} view labels",
            labels_chd.len(),
            labels_view.len()
        )));
    }
    let chd = tape.cross_entropy(heads.chd_logits, labels_chd)?;
    let chd_values = tape.value(chd).data().to_vec();
    let chd_total = tape.weighted_sum(chd, &vec![1.0; n])?;
    if mode == LambdaMode::Off {
        return Ok((chd_total, combine_losses(&chd_values, None, mode)?));
    }
    let view = tape.cross_entropy(heads.view_logits, labels_view)?;
    let view_values = tape.value(view).data().to_vec();
    let breakdown = combine_losses(&chd_values, Some(&view_values), mode)?;
    let lambda = breakdown.lambda.as_ref().expect("set for view modes");
    let view_total = tape.weighted_sum(view, lambda)?;
    Ok((tape.add(chd_total, view_total)?, breakdown))
}

/// Frames at network resolution with their training targets.
#[derive(Debug, Clone, Default)]
pub struct FrameSet {
    pub frames: Vec<Frame>,
    pub chd: Vec<usize>,
    pub view: Vec<usize>,
}

impl FrameSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn push(&mut self, frame: Frame, chd: usize, view: usize) {
        self.frames.push(frame);
        self.chd.push(chd);
        self.view.push(view);
    }

    /// Kept frames of one split, labelled with the curation-assigned view.
    pub fn curated(manifest: &DatasetManifest, base_dir: &Path, split: Split, h: usize, w: usize) -> Result<FrameSet> {
        let mut set = FrameSet::default();
        for r in manifest.records.iter().filter(|r| r.split == split && r.is_kept()) {
            let view = r
                .curated_view
                .ok_or_else(|| Error::InvalidArgument(format!("kept frame {} has no curated view", r.frame_id)))?;
            let frame = resize_frame(&load_frame(r, base_dir)?, h, w)?;
            set.push(frame, r.pathology.index(), view.index());
        }
        Ok(set)
    }
}

/// Validation quantity used to pick the retained checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monitor {
    ChdAuc,
    ViewAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
    pub val_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_view_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_max: Option<f64>,
    pub lr: f64,
}

pub fn metrics_jsonl(log: &[EpochMetrics]) -> String {
    log.iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialise") + "\n")
        .collect()
}

pub fn write_metrics_log(path: &Path, log: &[EpochMetrics]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(metrics_jsonl(log).as_bytes()).map_err(|e| Error::io(path, e))
}

/// Epoch order that gives every class, and every patient within a class,
/// the same share of slots. Length equals the number of frames.
fn balanced_order(set: &FrameSet, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
    for (i, f) in set.frames.iter().enumerate() {
        by_class.entry(set.chd[i]).or_default().entry(f.patient_id).or_default().push(i);
    }
    struct Queue {
        frames: Vec<usize>,
        pending: Vec<usize>,
    }
    let mut classes: Vec<(Vec<Queue>, usize)> = by_class
        .into_values()
        .map(|patients| {
            let mut queues: Vec<Queue> = patients
                .into_values()
                .map(|frames| Queue {
                    frames,
                    pending: Vec::new(),
                })
                .collect();
            queues.shuffle(rng);
            (queues, 0)
        })
        .collect();
    let mut order = Vec::with_capacity(set.len());
    for slot in 0..set.len() {
        let n_classes = classes.len();
        let (queues, next) = &mut classes[slot % n_classes];
        let n_patients = queues.len();
        let q = &mut queues[*next % n_patients];
        *next += 1;
        if q.pending.is_empty() {
            q.pending = q.frames.clone();
            q.pending.shuffle(rng);
        }
        order.push(q.pending.pop().expect("refilled"));
    }
    order
}

/// Rescales the gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for t in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

struct Validation {
    auc: Option<f64>,
    loss: f64,
    view_accuracy: f64,
}

/// Validation loss is the training objective of `mode` over the whole set
/// taken as one batch.
fn validate(model: &ModelParams, val: &FrameSet, mode: LambdaMode) -> Result<Validation> {
    let refs: Vec<&Frame> = val.frames.iter().collect();
    let (chd, view) = model.probabilities(&refs)?;
    let scores: Vec<f64> = chd.iter().map(|p| p[Pathology::Hlhs.index()]).collect();
    let positives: Vec<bool> = val.chd.iter().map(|&c| c == Pathology::Hlhs.index()).collect();
    let nll = |probs: &[Vec<f64>], targets: &[usize]| -> Vec<f64> {
        probs.iter().zip(targets).map(|(p, &t)| -p[t].max(PROB_FLOOR).ln()).collect()
    };
    let chd_losses = nll(&chd, &val.chd);
    let view_losses = nll(&view, &val.view);
    let loss = combine_losses(&chd_losses, Some(&view_losses), mode)?.total / val.len() as f64;
    let correct = view.iter().zip(&val.view).filter(|(p, &t)| argmax(p) == t).count();
    Ok(Validation {
        auc: roc_auc(&scores, &positives).ok(),
        loss,
        view_accuracy: correct as f64 / val.len() as f64,
    })
}

/// Minibatch SGD with momentum. Returns the parameters of the best
/// validation epoch and the per-epoch log.
pub fn fit(
    mut model: ModelParams,
    train: &FrameSet,
    val: &FrameSet,
    config: &TrainConfig,
    monitor: Monitor,
) -> Result<(ModelParams, Vec<EpochMetrics>)> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be nonempty".into()));
    }
    let mut state = MomentumState::new();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, f64, ModelParams)> = None;
    let mut stale = 0;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, &[epoch as u64]));
        let order = balanced_order(train, &mut rng);
        let mut loss_sum = 0.0;
        let mut lambdas: Vec<f64> = Vec::new();
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let frames: Vec<&Frame> = idx.iter().map(|&i| &train.frames[i]).collect();
            let chd: Vec<usize> = idx.iter().map(|&i| train.chd[i]).collect();
            let view: Vec<usize> = idx.iter().map(|&i| train.view[i]).collect();
            let mut tape = Tape::new();
            let input = tape.constant(scale_input(model.raw_batch(&frames)?));
            let heads = model.record(&mut tape, input, true)?;
            let (total, breakdown) = multitask_loss(&mut tape, &heads, &chd, &view, config.lambda_mode)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch}, batch {b}: loss {}",
                    breakdown.total
                )));
            }
            let mean = tape.scale(total, 1.0 / idx.len() as f64);
            let grads = tape.backward(mean)?;
            let mut g: Vec<Tensor> = heads
                .params
                .iter()
                .map(|&p| {
                    // heads outside the objective get no gradient
                    grads.get(p).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(p).shape()))
                })
                .collect();
            if g.iter().any(|t| !t.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient at epoch {epoch}, batch {b}")));
            }
            clip_gradients(&mut g, config.grad_clip);
            let g: Vec<&Tensor> = g.iter().collect();
            sgd_momentum_step(&mut model.tensors_mut(), &g, &mut state, lr, config.momentum)?;
            loss_sum += breakdown.total;
            if let Some(l) = breakdown.lambda {
                lambdas.extend(l);
            }
        }
        let v = validate(&model, val, config.lambda_mode)?;
        let score = match monitor {
            Monitor::ChdAuc => v.auc.unwrap_or(0.5),
            Monitor::ViewAccuracy => v.view_accuracy,
        };
        let improved = match &best {
            None => true,
            Some((s, l, _)) => score > *s || (score == *s && v.loss < *l),
        };
        if improved {
            best = Some((score, v.loss, model.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        let (lambda_mean, lambda_min, lambda_max) = if lambdas.is_empty() {
            (None, None, None)
        } else {
            (
                Some(lambdas.iter().sum::<f64>() / lambdas.len() as f64),
                Some(lambdas.iter().copied().fold(f64::INFINITY, f64::min)),
                Some(lambdas.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            )
        };
        log.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_auc: v.auc,
            val_loss: v.loss,
            val_view_accuracy: (monitor == Monitor::ViewAccuracy).then_some(v.view_accuracy),
            lambda_mean,
            lambda_min,
            lambda_max,
            lr,
        });
        if stale >= config.patience {
            break;
        }
    }
    let (_, _, model) = best.expect("at least one epoch ran");
    Ok((model, log))
}

/// Trains the diagnosis network on a curated manifest's Train split and
/// selects the checkpoint by validation ROC-AUC.
pub fn train(
    model: ModelParams,
    manifest: &DatasetManifest,
    base_dir: &Path,
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochMetrics>)> {
    let (h, w) = (model.arch.input_h, model.arch.input_w);
    let train_set = FrameSet::curated(manifest, base_dir, Split::Train, h, w)?;
    let val_set = FrameSet::curated(manifest, base_dir, Split::Val, h, w)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("curated manifest has an empty Train or Val split".into()));
    }
    fit(model, &train_set, &val_set, config, Monitor::ChdAuc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert!((chd_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-9);
        assert!(chd_loss(&[1.0 - 1e-12, 1e-12], &[1.0, 0.0]).unwrap().abs() < 1e-9);
        assert!((chd_loss(&[0.2, 0.8], &[0.0, 1.0]).unwrap() + 0.8f64.ln()).abs() < 1e-9);
        assert!(chd_loss(&[0.2, 0.8], &[1.0, 1.0]).is_err());
        let third = 1.0 / 3.0;
        assert!((view_loss(&[third; 3], &[0.0, 1.0, 0.0]).unwrap() - 3f64.ln()).abs() < 1e-9);
        assert!((view_loss(&[0.7, 0.2, 0.1], &[1.0, 0.0, 0.0]).unwrap() + 0.7f64.ln()).abs() < 1e-9);
        assert!(view_loss(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap().abs() < 1e-9);
    }

    #[test]
    fn minmax_and_lambda_examples() {
        let s = minmax_scale(&[0.2, 0.6, 1.0]).unwrap();
        for (a, b) in s.iter().zip([0.0, 0.5, 1.0]) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(minmax_scale(&[0.4, 0.4, 0.4]).unwrap(), vec![0.0; 3]);
        assert_eq!(minmax_scale(&[0.9]).unwrap(), vec![0.0]);
        assert!(minmax_scale(&[]).is_err());
        assert_eq!(instance_lambda(0.0).unwrap(), 1.0);
        assert_eq!(instance_lambda(1.0).unwrap(), 0.5);
        assert_eq!(instance_lambda(0.5).unwrap(), 0.75);
        assert!(instance_lambda(1.5).is_err());
    }

    #[test]
    fn combine_examples() {
        assert!((combine_losses(&[0.7], None, LambdaMode::Off).unwrap().total - 0.7).abs() < 1e-9);
        let w = combine_losses(&[0.2, 1.0], Some(&[0.4, 0.4]), LambdaMode::Weighted).unwrap();
        assert_eq!(w.lambda, Some(vec![1.0, 0.5]));
        assert!((w.total - 1.8).abs() < 1e-9);
        let f = combine_losses(&[0.2, 1.0], Some(&[0.4, 0.4]), LambdaMode::Fixed1).unwrap();
        assert!((f.total - 2.0).abs() < 1e-9);
        assert!(combine_losses(&[0.2, 1.0], Some(&[0.4]), LambdaMode::Fixed1).is_err());
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.05);
        assert_eq!(c.lr_at(9), 0.05);
        assert_eq!(c.lr_at(10), 0.025);
        assert_eq!(c.lr_at(25), 0.0125);
    }
}
