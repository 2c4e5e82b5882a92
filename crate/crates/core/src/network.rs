//! Two-headed convolutional classifier: a VGG-like trunk shared by a CHD
//! head (NC, HLHS) and a view head (4CH, LVOT, RVOT and, for the curation
//! model, Background).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Tape, Tensor, Var};
use crate::curation::ViewClassifier;
use crate::error::{Error, Result};
use crate::frame::{Frame, Pathology, Quality, View, MAX_PIXEL};
use crate::resize::resize_frame;

pub const CHD_CLASSES: usize = 2;

/// Frames per forward pass during inference.
pub const INFERENCE_CHUNK: usize = 32;

/// Fixed affine standardisation applied to the [0,1]-scaled input before
/// the first convolution: `(x - INPUT_CENTRE) / INPUT_SPREAD`.
pub const INPUT_CENTRE: f64 = 0.33;
pub const INPUT_SPREAD: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub n_blocks: usize,
    pub base_channels: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub view_classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            n_blocks: 3,
            base_channels: 8,
            input_h: 112,
            input_w: 96,
            view_classes: 3,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.n_blocks > 8 || self.base_channels == 0 {
            return Err(Error::Config(format!(
                "need 1..=8 blocks and positive base channels, got {} and {}",
                self.n_blocks, self.base_channels
            )));
        }
        let div = 1usize << self.n_blocks;
        if self.input_h == 0 || self.input_w == 0 || self.input_h % div != 0 || self.input_w % div != 0 {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by 2^{}",
                self.input_h, self.input_w, self.n_blocks
            )));
        }
        if !(3..=4).contains(&self.view_classes) {
            return Err(Error::Config(format!("view_classes must be 3 or 4, got {}", self.view_classes)));
        }
        Ok(())
    }

    /// Spatial size of the trunk output.
    pub fn trunk_dims(&self) -> (usize, usize) {
        (self.input_h >> self.n_blocks, self.input_w >> self.n_blocks)
    }

    pub fn trunk_channels(&self) -> usize {
        self.base_channels << (self.n_blocks - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[out, in, k, k]`
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn he_uniform(out_c: usize, in_c: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let data = (0..out_c * in_c * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
        ConvLayer {
            kernel: Tensor::new(&[out_c, in_c, k, k], data).expect("shape matches data"),
            bias: Tensor::zeros(&[out_c]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub trunk: Vec<ConvBlock>,
    pub chd_head: ConvLayer,
    pub view_head: ConvLayer,
}

pub fn build_model(arch: &ArchConfig, init_seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut trunk = Vec::with_capacity(arch.n_blocks);
    let mut in_c = 1;
    for b in 0..arch.n_blocks {
        let out_c = arch.base_channels << b;
        let conv1 = ConvLayer::he_uniform(out_c, in_c, 3, &mut rng);
        let conv2 = ConvLayer::he_uniform(out_c, out_c, 3, &mut rng);
        trunk.push(ConvBlock { conv1, conv2 });
        in_c = out_c;
    }
    let chd_head = ConvLayer::he_uniform(CHD_CLASSES, in_c, 1, &mut rng);
    let view_head = ConvLayer::he_uniform(arch.view_classes, in_c, 1, &mut rng);
    Ok(ModelParams {
        arch: *arch,
        trunk,
        chd_head,
        view_head,
    })
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct Heads {
    pub chd_logits: Var,
    pub view_logits: Var,
    /// Parameter leaves in [`ModelParams::tensors`] order.
    pub params: Vec<Var>,
}

impl ModelParams {
    /// Every parameter tensor in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(4 * self.trunk.len() + 4);
        for b in &self.trunk {
            out.extend([&b.conv1.kernel, &b.conv1.bias, &b.conv2.kernel, &b.conv2.bias]);
        }
        out.extend([
            &self.chd_head.kernel,
            &self.chd_head.bias,
            &self.view_head.kernel,
            &self.view_head.bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(4 * self.trunk.len() + 4);
        for b in &mut self.trunk {
            out.push(&mut b.conv1.kernel);
            out.push(&mut b.conv1.bias);
            out.push(&mut b.conv2.kernel);
            out.push(&mut b.conv2.bias);
        }
        out.push(&mut self.chd_head.kernel);
        out.push(&mut self.chd_head.bias);
        out.push(&mut self.view_head.kernel);
        out.push(&mut self.view_head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let a = &self.arch;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != a.input_h || shape[3] != a.input_w {
            return Err(Error::Shape(format!(
                "model expects [N,1,{},{}], got {shape:?}",
                a.input_h, a.input_w
            )));
        }
        Ok(())
    }

    /// Records the network on `tape`. `input` must hold `[N,1,H,W]` pixels
    /// already scaled to [0,1]. With `trainable` the parameters are leaves
    /// that receive gradients.
    pub fn record(&self, tape: &mut Tape, input: Var, trainable: bool) -> Result<Heads> {
        self.check_input(tape.value(input).shape())?;
        let params: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let shift = tape.constant(Tensor::full(tape.value(input).shape(), -INPUT_CENTRE));
        let centred = tape.add(input, shift)?;
        let mut x = tape.scale(centred, 1.0 / INPUT_SPREAD);
        for b in 0..self.trunk.len() {
            let p = &params[4 * b..4 * b + 4];
            x = tape.conv2d(x, p[0], p[1], 1, 1)?;
            x = tape.relu(x);
            x = tape.conv2d(x, p[2], p[3], 1, 1)?;
            x = tape.relu(x);
            x = tape.max_pool2d(x, 2, 2)?;
        }
        let h = &params[4 * self.trunk.len()..];
        let chd = tape.conv2d(x, h[0], h[1], 1, 0)?;
        let chd_logits = tape.global_avg_pool(chd)?;
        let view = tape.conv2d(x, h[2], h[3], 1, 0)?;
        let view_logits = tape.global_avg_pool(view)?;
        Ok(Heads {
            chd_logits,
            view_logits,
            params,
        })
    }

    /// Logits for a `[N,1,H,W]` batch scaled to [0,1].
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let input = tape.constant(batch.clone());
        let heads = self.record(&mut tape, input, false)?;
        let chd = tape.value(heads.chd_logits).clone();
        let view = tape.value(heads.view_logits).clone();
        if !chd.is_finite() || !view.is_finite() {
            return Err(Error::Numeric("network produced non-finite logits".into()));
        }
        Ok((chd, view))
    }

    /// Stacks frames into a `[N,1,H,W]` tensor of raw pixels.
    pub fn raw_batch(&self, frames: &[&Frame]) -> Result<Tensor> {
        let (h, w) = (self.arch.input_h, self.arch.input_w);
        let mut data = Vec::with_capacity(frames.len() * h * w);
        for f in frames {
            if f.channels != 1 || f.height != h || f.width != w {
                return Err(Error::Shape(format!(
                    "frame {} is {}x{}x{}, model expects {h}x{w}x1",
                    f.frame_id, f.height, f.width, f.channels
                )));
            }
            data.extend_from_slice(&f.pixels);
        }
        Tensor::new(&[frames.len(), 1, h, w], data)
    }

    /// Softmax outputs for frames at the model's input size, in chunks.
    pub fn probabilities(&self, frames: &[&Frame]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut chd = Vec::with_capacity(frames.len());
        let mut view = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(INFERENCE_CHUNK) {
            let batch = scale_input(self.raw_batch(chunk)?);
            let (c, v) = self.forward(&batch)?;
            let (pc, pv) = (softmax_rows(&c)?, softmax_rows(&v)?);
            chd.extend(pc.chunks_exact(CHD_CLASSES).map(|r| r.to_vec()));
            view.extend(pv.chunks_exact(self.arch.view_classes).map(|r| r.to_vec()));
        }
        Ok((chd, view))
    }
}

/// Divides raw [0,300] pixels by 300.
pub fn scale_input(raw: Tensor) -> Tensor {
    let shape = raw.shape().to_vec();
    let data = raw.into_data().into_iter().map(|p| p / MAX_PIXEL).collect();
    Tensor::new(&shape, data).expect("shape unchanged")
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub frame_id: u32,
    pub patient_id: u32,
    pub pathology: Pathology,
    pub quality: Quality,
    /// Curation-assigned view, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curated_view: Option<View>,
    pub chd_probs: [f64; 2],
    pub view_probs: Vec<f64>,
    pub chd_argmax: usize,
    pub view_argmax: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reliable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation_steps_survived: Option<usize>,
}

impl PredictionRecord {
    pub fn from_probs(frame: &Frame, chd: &[f64], view: &[f64]) -> Self {
        PredictionRecord {
            frame_id: frame.frame_id,
            patient_id: frame.patient_id,
            pathology: frame.pathology,
            quality: frame.quality,
            curated_view: None,
            chd_probs: [chd[0], chd[1]],
            view_probs: view.to_vec(),
            chd_argmax: argmax(chd),
            view_argmax: argmax(view),
            reliable: None,
            perturbation_steps_survived: None,
        }
    }

    pub fn hlhs_prob(&self) -> f64 {
        self.chd_probs[Pathology::Hlhs.index()]
    }
}

pub fn predict(params: &ModelParams, frame: &Frame) -> Result<PredictionRecord> {
    let (chd, view) = params.probabilities(&[frame])?;
    Ok(PredictionRecord::from_probs(frame, &chd[0], &view[0]))
}

pub fn predict_all(params: &ModelParams, frames: &[Frame]) -> Result<Vec<PredictionRecord>> {
    let refs: Vec<&Frame> = frames.iter().collect();
    let (chd, view) = params.probabilities(&refs)?;
    Ok(frames
        .iter()
        .zip(chd.iter().zip(&view))
        .map(|(f, (c, v))| PredictionRecord::from_probs(f, c, v))
        .collect())
}

impl ViewClassifier for ModelParams {
    fn view_probabilities(&self, frames: &[Frame]) -> Result<Vec<[f64; 4]>> {
        if self.arch.view_classes != 4 {
            return Err(Error::Shape(format!(
                "plane extraction needs a 4-class view head, model has {}",
                self.arch.view_classes
            )));
        }
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(INFERENCE_CHUNK) {
            let small = chunk
                .iter()
                .map(|f| resize_frame(f, self.arch.input_h, self.arch.input_w))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Frame> = small.iter().collect();
            let (_, view) = self.probabilities(&refs)?;
            out.extend(view.iter().map(|v| [v[0], v[1], v[2], v[3]]));
        }
        Ok(out)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FCHDCKPT";

/// Header: magic, u32 LE length, arch JSON. Body: u64 LE count, then the
/// parameters as f64 LE in declaration order.
pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let header = serde_json::to_vec(&params.arch).expect("arch serialises");
    let mut out = Vec::with_capacity(8 + 4 + header.len() + 8 + 8 * params.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.param_count() as u64).to_le_bytes());
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8], origin: &Path) -> Result<ModelParams> {
    let bad = |reason: &str| Error::format(origin, reason.to_string());
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a model checkpoint"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = 12 + hlen;
    if bytes.len() < body + 8 {
        return Err(bad("truncated header"));
    }
    let arch: ArchConfig = serde_json::from_slice(&bytes[12..body]).map_err(|e| bad(&e.to_string()))?;
    arch.validate().map_err(|e| bad(&e.to_string()))?;
    let mut params = build_model(&arch, 0)?;
    let count = u64::from_le_bytes(bytes[body..body + 8].try_into().expect("8 bytes")) as usize;
    if count != params.param_count() || bytes.len() != body + 8 + 8 * count {
        return Err(bad("parameter count does not match the architecture"));
    }
    let mut values = bytes[body + 8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = values.next().expect("count checked");
        }
    }
    if !params.is_finite() {
        return Err(bad("checkpoint holds non-finite parameters"));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::FrameKind;

    fn small() -> ArchConfig {
        ArchConfig {
            n_blocks: 2,
            base_channels: 4,
            input_h: 16,
            input_w: 12,
            view_classes: 3,
        }
    }

    fn frame(pixels: Vec<f64>, a: &ArchConfig) -> Frame {
        Frame {
            height: a.input_h,
            width: a.input_w,
            channels: 1,
            pixels,
            kind: FrameKind::BMode,
            view: View::FourCh,
            pathology: Pathology::Nc,
            quality: Quality::High,
            patient_id: 1,
            frame_id: 2,
        }
    }

    fn noise(a: &ArchConfig, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..a.input_h * a.input_w).map(|_| rng.gen_range(0.0..300.0)).collect()
    }

    #[test]
    fn default_trunk_dims() {
        assert_eq!(ArchConfig::default().trunk_dims(), (14, 12));
        assert_eq!(ArchConfig::default().trunk_channels(), 32);
    }

    #[test]
    fn build_is_deterministic_and_validates() {
        let a = small();
        assert_eq!(build_model(&a, 5).unwrap(), build_model(&a, 5).unwrap());
        assert_ne!(build_model(&a, 5).unwrap(), build_model(&a, 6).unwrap());
        let bad = ArchConfig { input_w: 14, ..a };
        assert!(build_model(&bad, 0).is_err());
        let four = build_model(&ArchConfig { view_classes: 4, ..a }, 0).unwrap();
        assert_eq!(four.view_head.kernel.shape(), &[4, 8, 1, 1]);
    }

    #[test]
    fn batch_independence() {
        let a = small();
        let m = build_model(&a, 1).unwrap();
        let frames: Vec<Frame> = (0..8).map(|s| frame(noise(&a, s), &a)).collect();
        let refs: Vec<&Frame> = frames.iter().collect();
        let (all_c, all_v) = m.forward(&scale_input(m.raw_batch(&refs).unwrap())).unwrap();
        let (one_c, one_v) = m.forward(&scale_input(m.raw_batch(&refs[3..4]).unwrap())).unwrap();
        for k in 0..2 {
            assert!((all_c.row(3)[k] - one_c.row(0)[k]).abs() < 1e-6);
        }
        for k in 0..3 {
            assert!((all_v.row(3)[k] - one_v.row(0)[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_input_gives_identical_rows() {
        let a = small();
        let m = build_model(&a, 2).unwrap();
        let batch = Tensor::zeros(&[3, 1, a.input_h, a.input_w]);
        let (c, v) = m.forward(&batch).unwrap();
        assert_eq!(c.row(0), c.row(2));
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn zeroing_view_head_leaves_chd_logits() {
        let a = small();
        let mut m = build_model(&a, 3).unwrap();
        let batch = scale_input(Tensor::new(&[1, 1, a.input_h, a.input_w], noise(&a, 9)).unwrap());
        let before = m.forward(&batch).unwrap().0;
        m.view_head.kernel.data_mut().iter_mut().for_each(|v| *v = 0.0);
        m.view_head.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(m.forward(&batch).unwrap().0, before);
    }

    #[test]
    fn predict_softmax_and_ties() {
        let a = small();
        let mut m = build_model(&a, 4).unwrap();
        m.chd_head.kernel.data_mut().iter_mut().for_each(|v| *v = 0.0);
        m.chd_head.bias = Tensor::new(&[2], vec![2.0, 0.0]).unwrap();
        let f = frame(noise(&a, 1), &a);
        let p = predict(&m, &f).unwrap();
        assert!((p.chd_probs[0] - 0.880797077977882).abs() < 1e-12);
        assert_eq!(p.chd_argmax, 0);
        assert!((p.view_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(p.reliable, None);

        m.chd_head.bias = Tensor::new(&[2], vec![0.5, 0.5]).unwrap();
        assert_eq!(predict(&m, &f).unwrap().chd_argmax, 0);

        let wrong = Frame {
            width: 10,
            pixels: vec![0.0; 160],
            ..f
        };
        assert!(predict(&m, &wrong).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = build_model(&small(), 8).unwrap();
        let bytes = checkpoint_bytes(&m);
        let back = checkpoint_from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(checkpoint_bytes(&back), bytes);
        assert_eq!(back, m);
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
        assert!(checkpoint_from_bytes(b"garbage-bytes", Path::new("mem")).is_err());
    }
}
