use super::kernels::{self, ConvGeometry, PoolGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probability floor applied inside cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
        plane: usize,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
        clipped: Vec<bool>,
    },
    WeightedSum {
        input: Var,
        weights: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::MaxPool { input: a, .. }
            | Op::GlobalAvgPool { input: a, .. }
            | Op::CrossEntropy { logits: a, .. }
            | Op::WeightedSum { input: a, .. } => vec![*a],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![*input, *kernel, *bias],
            Op::Dense {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive applications. Every node's inputs are
/// recorded before it, so node order is a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass: one optional gradient per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked (parameters, or an input when the
    /// caller needs d loss / d input).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(src.shape(), data).expect("shape preserved");
        self.push(out, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor::new(src.shape(), data).expect("shape preserved");
        self.push(out, Op::Relu(a))
    }

    /// Cross-correlation with zero padding. Input `[N,C,H,W]`, kernel
    /// `[F,C,kH,kW]`, bias `[F]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let geometry = ConvGeometry::new(self.value(input).shape(), self.value(kernel).shape(), stride, padding)?;
        if self.value(bias).shape() != [geometry.filters] {
            return Err(Error::Shape(format!(
                "conv2d bias must be [{}], got {:?}",
                geometry.filters,
                self.value(bias).shape()
            )));
        }
        let data = kernels::conv2d_forward(
            &geometry,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let out = Tensor::new(&[geometry.batch, geometry.filters, geometry.out_h, geometry.out_w], data)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
        ))
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let g = PoolGeometry::new(&shape, window, stride)?;
        let (data, argmax) = kernels::max_pool_forward(&g, self.value(input).data());
        let out = Tensor::new(&[shape[0], shape[1], g.out_h, g.out_w], data)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    /// Mean over the spatial dims: `[N,C,H,W]` to `[N,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool expects 4-D input, got {shape:?}")));
        }
        let plane = shape[2] * shape[3];
        let data = self
            .value(input)
            .data()
            .chunks_exact(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(&[shape[0], shape[1]], data)?;
        Ok(self.push(out, Op::GlobalAvgPool { input, plane }))
    }

    /// Affine map `input·weight + bias` with input `[N,D]`, weight `[D,K]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::Shape(format!("dense: input {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        let (n, d, k) = (xs[0], xs[1], ws[1]);
        let mut data: Vec<f64> = (0..n).flat_map(|_| self.value(bias).data().iter().copied()).collect();
        kernels::gemm(n, d, k, self.value(input).data(), false, self.value(weight).data(), false, 1.0, &mut data);
        let out = Tensor::new(&[n, k], data)?;
        Ok(self.push(
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Row-wise softmax of `[N,K]` logits, computed after max-subtraction.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let src = self.value(logits);
        if src.ndim() != 2 {
            return Err(Error::Shape(format!("softmax expects [N,K], got {:?}", src.shape())));
        }
        let data = softmax_rows(src)?;
        let out = Tensor::new(src.shape(), data)?;
        Ok(self.push(out, Op::Softmax(logits)))
    }

    /// Per-sample cross-entropy `-log max(softmax(z)_y, 1e-12)` of `[N,K]`
    /// logits against class indices; output shape `[N]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let src = self.value(logits);
        if src.ndim() != 2 || src.shape()[0] != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {:?} vs {} targets",
                src.shape(),
                targets.len()
            )));
        }
        let k = src.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidArgument(format!("target class {bad} out of range for {k} classes")));
        }
        let probs = softmax_rows(src)?;
        let mut losses = Vec::with_capacity(targets.len());
        let mut clipped = Vec::with_capacity(targets.len());
        for (i, &t) in targets.iter().enumerate() {
            let row = src.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
            let nll = lse - row[t];
            let floor = -PROB_FLOOR.ln();
            if nll > floor {
                losses.push(floor);
                clipped.push(true);
            } else {
                losses.push(nll);
                clipped.push(false);
            }
        }
        let out = Tensor::new(&[targets.len()], losses)?;
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                clipped,
            },
        ))
    }

    /// `Σ_i w_i · x_i` with constant weights; no gradient reaches the weights.
    pub fn weighted_sum(&mut self, input: Var, weights: &[f64]) -> Result<Var> {
        let src = self.value(input);
        if src.len() != weights.len() {
            return Err(Error::Shape(format!(
                "weighted_sum: {} values vs {} weights",
                src.len(),
                weights.len()
            )));
        }
        let s = src.data().iter().zip(weights).map(|(x, w)| x * w).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Reverse accumulation from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("node {} is not on this tape", loss.0)));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            for input in node.op.inputs() {
                if input.0 >= id {
                    return Err(Error::Graph(format!("cycle: node {id} consumes node {}", input.0)));
                }
            }
            self.propagate(node, &upstream, &mut grads)?;
            grads[id] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.needs(var) {
            return;
        }
        match grads[var.0].as_mut() {
            Some(g) => g.add_assign(&delta),
            None => grads[var.0] = Some(delta),
        }
    }

    fn like(&self, var: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.value(var).shape(), data).expect("gradient matches node shape")
    }

    fn propagate(&self, node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let g = up.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let d = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.needs(*b) {
                    let d = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::Scale(a, factor) => {
                let d = g.iter().map(|x| x * factor).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.value(*a).len()];
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Relu(a) => {
                let d = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &dy)| if x > 0.0 { dy } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let want_params = self.needs(*kernel) || self.needs(*bias);
                let cg = kernels::conv2d_backward(
                    geometry,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    self.needs(*input),
                    want_params,
                );
                if let Some(gi) = cg.input {
                    self.accumulate(grads, *input, self.like(*input, gi));
                }
                if want_params {
                    self.accumulate(grads, *kernel, self.like(*kernel, cg.kernel));
                    self.accumulate(grads, *bias, self.like(*bias, cg.bias));
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![0.0; self.value(*input).len()];
                for (&idx, &dy) in argmax.iter().zip(g) {
                    d[idx] += dy;
                }
                self.accumulate(grads, *input, self.like(*input, d));
            }
            Op::GlobalAvgPool { input, plane } => {
                let inv = 1.0 / *plane as f64;
                let d = g.iter().flat_map(|&dy| std::iter::repeat_n(dy * inv, *plane)).collect();
                self.accumulate(grads, *input, self.like(*input, d));
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let xs = self.value(*input).shape();
                let (n, d, k) = (xs[0], xs[1], self.value(*weight).shape()[1]);
                if self.needs(*input) {
                    let mut dx = vec![0.0; n * d];
                    kernels::gemm(n, k, d, g, false, self.value(*weight).data(), true, 0.0, &mut dx);
                    self.accumulate(grads, *input, self.like(*input, dx));
                }
                if self.needs(*weight) {
                    let mut dw = vec![0.0; d * k];
                    kernels::gemm(d, n, k, self.value(*input).data(), true, g, false, 0.0, &mut dw);
                    self.accumulate(grads, *weight, self.like(*weight, dw));
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; k];
                    for row in g.chunks_exact(k) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, self.like(*bias, db));
                }
            }
            Op::Softmax(a) => {
                let p = node.value.data();
                let k = node.value.shape()[1];
                let mut d = vec![0.0; p.len()];
                for ((drow, prow), grow) in d.chunks_exact_mut(k).zip(p.chunks_exact(k)).zip(g.chunks_exact(k)) {
                    let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                    for ((dv, pv), gv) in drow.iter_mut().zip(prow).zip(grow) {
                        *dv = pv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                clipped,
            } => {
                let k = self.value(*logits).shape()[1];
                let mut d = vec![0.0; probs.len()];
                for (i, &t) in targets.iter().enumerate() {
                    if clipped[i] {
                        continue;
                    }
                    for c in 0..k {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        d[i * k + c] = g[i] * (probs[i * k + c] - onehot);
                    }
                }
                self.accumulate(grads, *logits, self.like(*logits, d));
            }
            Op::WeightedSum { input, weights } => {
                let d = weights.iter().map(|w| w * g[0]).collect();
                self.accumulate(grads, *input, self.like(*input, d));
            }
        }
        Ok(())
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &Tensor) -> Result<Vec<f64>> {
    if logits.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let k = logits.shape()[logits.ndim() - 1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for z in row {
            let e = (z - max).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    Ok(out)
}
