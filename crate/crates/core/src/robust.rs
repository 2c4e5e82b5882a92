//! Reliability filtering: a frame's CHD prediction is trusted when it
//! survives sign-gradient perturbations that keep the view prediction fixed.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::frame::{Frame, Quality, View, MAX_PIXEL};
use crate::network::{argmax, ModelParams, PredictionRecord, CHD_CLASSES, INFERENCE_CHUNK};
use crate::phantom::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    CardiacPreserving,
    Random,
    Adversarial,
    ViewVerification,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::CardiacPreserving,
        Strategy::Random,
        Strategy::Adversarial,
        Strategy::ViewVerification,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::CardiacPreserving => "preserve",
            Strategy::Random => "random",
            Strategy::Adversarial => "adversarial",
            Strategy::ViewVerification => "viewverify",
        }
    }

    pub fn perturbs(self) -> bool {
        self != Strategy::ViewVerification
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub n_steps: usize,
    pub strategy: Strategy,
    /// Drives the `Random` strategy only.
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            epsilon: 8.0,
            n_steps: 4,
            strategy: Strategy::CardiacPreserving,
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha {} must be positive", self.alpha)));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon {} must be nonnegative", self.epsilon)));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Gradient of the summed view loss at targets `v_star` with respect to the
/// raw pixels of a `[N,1,H,W]` batch, plus the CHD logits at that input.
pub fn view_loss_gradient(model: &ModelParams, raw: &Tensor, v_star: &[usize]) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.param(raw.clone());
    let scaled = tape.scale(x, 1.0 / MAX_PIXEL);
    let heads = model.record(&mut tape, scaled, false)?;
    let loss = tape.cross_entropy(heads.view_logits, v_star)?;
    let total = tape.sum(loss);
    let grads = tape.backward(total)?;
    let g = grads
        .get(x)
        .cloned()
        .ok_or_else(|| Error::Graph("input received no gradient".into()))?;
    if !g.is_finite() {
        return Err(Error::Numeric("non-finite input gradient".into()));
    }
    Ok((g, tape.value(heads.chd_logits).clone()))
}

/// `direction·α·sgn(g)` with `sgn(0) = 0`.
pub fn sign_step(grad: &Tensor, alpha: f64, direction: f64) -> Tensor {
    let data = grad
        .data()
        .iter()
        .map(|&g| {
            if g > 0.0 {
                direction * alpha
            } else if g < 0.0 {
                -direction * alpha
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(grad.shape(), data).expect("same shape")
}

/// One descent step on the view loss: `δ = −α·sgn(∇ L_view)`.
pub fn perturbation_step(raw: &Tensor, model: &ModelParams, v_star: &[usize], alpha: f64) -> Result<Tensor> {
    let (g, _) = view_loss_gradient(model, raw, v_star)?;
    Ok(sign_step(&g, alpha, -1.0))
}

/// Adds `delta`, then clamps into the ε-ball around `original` and into
/// the pixel range.
pub fn apply_step(current: &mut [f64], delta: &[f64], original: &[f64], epsilon: f64) {
    for ((x, d), &p0) in current.iter_mut().zip(delta).zip(original) {
        let (lo, hi) = ball_bounds(p0, epsilon);
        let moved = (*x + d).clamp(lo, hi);
        *x = moved.clamp(0.0, MAX_PIXEL);
    }
}

/// `p0 ∓ epsilon`, nudged inward so the rounded bounds still satisfy
/// `|bound - p0| <= epsilon` exactly.
fn ball_bounds(p0: f64, epsilon: f64) -> (f64, f64) {
    let mut lo = p0 - epsilon;
    while p0 - lo > epsilon {
        lo = lo.next_up();
    }
    let mut hi = p0 + epsilon;
    while hi - p0 > epsilon {
        hi = hi.next_down();
    }
    (lo, hi)
}

/// Per-step record kept when tracing.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    /// Pixels before the step, `[N,1,H,W]`.
    pub input: Tensor,
    pub delta: Tensor,
}

/// Outcome of perturbing a batch for some number of steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbOutcome {
    pub original_chd: Vec<usize>,
    pub v_star: Vec<usize>,
    /// `step_chd[n][s]`: CHD argmax of frame `n` after step `s + 1`.
    pub step_chd: Vec<Vec<usize>>,
    pub perturbed: Tensor,
    pub trace: Vec<StepTrace>,
}

fn chd_argmax_rows(logits: &Tensor) -> Vec<usize> {
    logits.data().chunks_exact(CHD_CLASSES).map(argmax).collect()
}

fn random_delta(shape: &[usize], frame_ids: &[u32], step: usize, alpha: f64, seed: u64) -> Tensor {
    let plane = shape[1..].iter().product::<usize>();
    let mut data = Vec::with_capacity(plane * frame_ids.len());
    for &id in frame_ids {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[u64::from(id), step as u64]));
        data.extend((0..plane).map(|_| alpha * f64::from(rng.gen_range(-1i8..=1))));
    }
    Tensor::new(shape, data).expect("shape matches data")
}

/// Runs `steps` perturbation steps of a perturbing strategy on a batch of
/// frames at network resolution. `frame_ids` seed the random strategy.
pub fn perturb_batch(
    model: &ModelParams,
    frames: &[&Frame],
    config: &PerturbationConfig,
    steps: usize,
    keep_trace: bool,
) -> Result<PerturbOutcome> {
    config.validate()?;
    if !config.strategy.perturbs() {
        return Err(Error::InvalidArgument("view verification does not perturb".into()));
    }
    let original = model.raw_batch(frames)?;
    let ids: Vec<u32> = frames.iter().map(|f| f.frame_id).collect();
    let (chd0, view0) = model.forward(&crate::network::scale_input(original.clone()))?;
    let original_chd = chd_argmax_rows(&chd0);
    let v_star: Vec<usize> = view0.data().chunks_exact(model.arch.view_classes).map(argmax).collect();
    let mut x = original.clone();
    let mut step_chd = vec![Vec::with_capacity(steps); frames.len()];
    let mut trace = Vec::new();
    for s in 0..steps {
        let (delta, chd_here) = match config.strategy {
            Strategy::CardiacPreserving | Strategy::Adversarial => {
                let (g, chd) = view_loss_gradient(model, &x, &v_star)?;
                let dir = if config.strategy == Strategy::Adversarial { 1.0 } else { -1.0 };
                (sign_step(&g, config.alpha, dir), Some(chd))
            }
            Strategy::Random => (random_delta(x.shape(), &ids, s, config.alpha, config.seed), None),
            Strategy::ViewVerification => unreachable!("checked above"),
        };
        // the gradient pass already evaluated the previous step's result
        if let (Some(chd), true) = (chd_here, s > 0) {
            for (n, a) in chd_argmax_rows(&chd).into_iter().enumerate() {
                step_chd[n].push(a);
            }
        }
        if keep_trace {
            trace.push(StepTrace {
                input: x.clone(),
                delta: delta.clone(),
            });
        }
        apply_step(x.data_mut(), delta.data(), original.data(), config.epsilon);
        let last = s + 1 == steps;
        if last || config.strategy == Strategy::Random {
            let (chd, _) = model.forward(&crate::network::scale_input(x.clone()))?;
            for (n, a) in chd_argmax_rows(&chd).into_iter().enumerate() {
                step_chd[n].push(a);
            }
        }
    }
    Ok(PerturbOutcome {
        original_chd,
        v_star,
        step_chd,
        perturbed: x,
        trace,
    })
}

/// Single-frame form of the cardiac-preserving perturbation.
pub fn cardiac_preserving_perturb(frame: &Frame, model: &ModelParams, config: &PerturbationConfig) -> Result<PerturbOutcome> {
    if config.strategy != Strategy::CardiacPreserving {
        return Err(Error::InvalidArgument(format!(
            "cardiac_preserving_perturb called with strategy {}",
            config.strategy
        )));
    }
    perturb_batch(model, &[frame], config, config.n_steps, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityVerdict {
    pub frame_id: u32,
    pub strategy: Strategy,
    pub n_steps: usize,
    pub reliable: bool,
    pub original_argmax: usize,
    pub final_argmax: usize,
    /// CHD argmax after each step; empty for view verification.
    pub step_argmax: Vec<usize>,
}

impl ReliabilityVerdict {
    /// Verdict for the first `n` steps of a longer run.
    pub fn truncated(&self, n: usize) -> ReliabilityVerdict {
        if !self.strategy.perturbs() {
            return ReliabilityVerdict {
                n_steps: n,
                ..self.clone()
            };
        }
        let steps = self.step_argmax[..n.min(self.step_argmax.len())].to_vec();
        ReliabilityVerdict {
            n_steps: n,
            reliable: steps.iter().all(|&a| a == self.original_argmax),
            final_argmax: *steps.last().unwrap_or(&self.original_argmax),
            step_argmax: steps,
            ..self.clone()
        }
    }

    pub fn steps_survived(&self) -> usize {
        self.step_argmax
            .iter()
            .take_while(|&&a| a == self.original_argmax)
            .count()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "frame_id": self.frame_id,
            "strategy": self.strategy.name(),
            "n_steps": self.n_steps,
            "reliable": self.reliable,
            "original_argmax": self.original_argmax,
            "final_argmax": self.final_argmax,
        })
        .to_string()
    }
}

/// Verdicts for frames at network resolution. `curated_views` is only read
/// by view verification.
pub fn assess_frames(
    model: &ModelParams,
    frames: &[Frame],
    curated_views: &[Option<View>],
    config: &PerturbationConfig,
) -> Result<Vec<ReliabilityVerdict>> {
    config.validate()?;
    if curated_views.len() != frames.len() {
        return Err(Error::Shape(format!(
            "{} frames but {} curated labels",
            frames.len(),
            curated_views.len()
        )));
    }
    let mut out = Vec::with_capacity(frames.len());
    if config.strategy == Strategy::ViewVerification {
        let refs: Vec<&Frame> = frames.iter().collect();
        let (chd, view) = model.probabilities(&refs)?;
        for ((f, label), (c, v)) in frames.iter().zip(curated_views).zip(chd.iter().zip(&view)) {
            let label = label.ok_or_else(|| Error::InvalidArgument(format!("frame {} has no curated view", f.frame_id)))?;
            let a = argmax(c);
            out.push(ReliabilityVerdict {
                frame_id: f.frame_id,
                strategy: config.strategy,
                n_steps: config.n_steps,
                reliable: argmax(v) == label.index(),
                original_argmax: a,
                final_argmax: a,
                step_argmax: Vec::new(),
            });
        }
        return Ok(out);
    }
    for chunk in frames.chunks(INFERENCE_CHUNK) {
        let refs: Vec<&Frame> = chunk.iter().collect();
        let o = perturb_batch(model, &refs, config, config.n_steps, false)?;
        for (n, f) in chunk.iter().enumerate() {
            let steps = o.step_chd[n].clone();
            out.push(ReliabilityVerdict {
                frame_id: f.frame_id,
                strategy: config.strategy,
                n_steps: config.n_steps,
                reliable: steps.iter().all(|&a| a == o.original_chd[n]),
                original_argmax: o.original_chd[n],
                final_argmax: *steps.last().expect("n_steps >= 1"),
                step_argmax: steps,
            });
        }
    }
    Ok(out)
}

pub fn assess_reliability(
    frame: &Frame,
    model: &ModelParams,
    config: &PerturbationConfig,
    curated_view: Option<View>,
) -> Result<ReliabilityVerdict> {
    let mut v = assess_frames(model, std::slice::from_ref(frame), &[curated_view], config)?;
    Ok(v.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retention {
    pub overall: f64,
    /// Absent for tiers with no frames.
    pub per_tier: BTreeMap<Quality, Option<f64>>,
}

pub fn retention(preds: &[PredictionRecord]) -> Retention {
    let share = |sel: Vec<&PredictionRecord>| {
        (!sel.is_empty()).then(|| sel.iter().filter(|p| p.reliable == Some(true)).count() as f64 / sel.len() as f64)
    };
    let per_tier = Quality::ALL
        .into_iter()
        .map(|q| (q, share(preds.iter().filter(|p| p.quality == q).collect())))
        .collect();
    Retention {
        overall: share(preds.iter().collect()).unwrap_or(0.0),
        per_tier,
    }
}

/// Marks each prediction with its verdict.
pub fn annotate(preds: &mut [PredictionRecord], verdicts: &[ReliabilityVerdict]) -> Result<()> {
    if preds.len() != verdicts.len() {
        return Err(Error::Shape(format!("{} predictions vs {} verdicts", preds.len(), verdicts.len())));
    }
    for (p, v) in preds.iter_mut().zip(verdicts) {
        if p.frame_id != v.frame_id {
            return Err(Error::InvalidArgument(format!("verdict for frame {} given to {}", v.frame_id, p.frame_id)));
        }
        p.reliable = Some(v.reliable);
        p.perturbation_steps_survived = v.strategy.perturbs().then(|| v.steps_survived());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Every prediction with `reliable` filled in.
    pub annotated: Vec<PredictionRecord>,
    pub retained: Vec<PredictionRecord>,
    pub retention: Retention,
    pub verdicts: Vec<ReliabilityVerdict>,
}

/// Keeps the predictions judged reliable. `frames` line up with
/// `predictions` and are at network resolution.
pub fn filter_predictions(
    predictions: &[PredictionRecord],
    model: &ModelParams,
    frames: &[Frame],
    config: &PerturbationConfig,
) -> Result<FilterOutcome> {
    let curated: Vec<Option<View>> = predictions.iter().map(|p| p.curated_view).collect();
    let verdicts = assess_frames(model, frames, &curated, config)?;
    apply_verdicts(predictions, verdicts)
}

pub fn apply_verdicts(predictions: &[PredictionRecord], verdicts: Vec<ReliabilityVerdict>) -> Result<FilterOutcome> {
    let mut annotated = predictions.to_vec();
    annotate(&mut annotated, &verdicts)?;
    let retained = annotated.iter().filter(|p| p.reliable == Some(true)).cloned().collect();
    Ok(FilterOutcome {
        retention: retention(&annotated),
        annotated,
        retained,
        verdicts,
    })
}
