//! Raw numeric kernels behind the tape primitives. No graph bookkeeping here.

use crate::error::{Error, Result};

/// `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n`, all row-major.
/// `a_t`/`b_t` mean the slice holds the transpose of the named operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every slice to the extent implied by the
    // dimensions and strides passed to the kernel.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape bookkeeping for one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn output_extent(len: usize, kernel: usize, stride: usize, padding: usize, axis: &str) -> Result<usize> {
    let padded = len + 2 * padding;
    if kernel > padded {
        return Err(Error::Shape(format!(
            "kernel {axis} extent {kernel} exceeds padded input {padded}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(Error::Shape(format!(
            "non-integral output {axis}: ({padded} - {kernel}) not divisible by stride {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects 4-D input and kernel, got {input:?} and {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if input[1] != kernel[1] {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {} vs kernel {}",
                input[1], kernel[1]
            )));
        }
        let out_h = output_extent(input[2], kernel[2], stride, padding, "height")?;
        let out_w = output_extent(input[3], kernel[3], stride, padding, "width")?;
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            in_h: input[2],
            in_w: input[3],
            filters: kernel[0],
            kernel_h: kernel[2],
            kernel_w: kernel[3],
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_sample(&self) -> usize {
        self.filters * self.out_plane()
    }
}

/// Unfold one sample `[C,H,W]` into a `[C·kH·kW, H'·W']` patch matrix.
fn im2col(g: &ConvGeometry, input: &[f64], cols: &mut [f64]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let chan = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &chan[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch matrix back onto a `[C,H,W]` gradient buffer.
fn col2im(g: &ConvGeometry, cols: &[f64], out: &mut [f64]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let chan = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.out_plane();
    let mut out = vec![0.0; g.batch * g.out_sample()];
    let mut cols = vec![0.0; g.patch_len() * plane];
    for n in 0..g.batch {
        let x = &input[n * g.in_sample()..(n + 1) * g.in_sample()];
        let y = &mut out[n * g.out_sample()..(n + 1) * g.out_sample()];
        for (f, b) in bias.iter().enumerate() {
            y[f * plane..(f + 1) * plane].fill(*b);
        }
        im2col(g, x, &mut cols);
        gemm(g.filters, g.patch_len(), plane, kernel, false, &cols, false, 1.0, y);
    }
    out
}

/// Gradients of a convolution. `grad_input` is only filled when requested.
pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_params: bool,
) -> ConvGrads {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut grad_kernel = vec![0.0; g.filters * patch];
    let mut grad_bias = vec![0.0; g.filters];
    let mut grad_input = want_input.then(|| vec![0.0; g.batch * g.in_sample()]);
    let mut cols = vec![0.0; patch * plane];
    for n in 0..g.batch {
        let dy = &grad_out[n * g.out_sample()..(n + 1) * g.out_sample()];
        if want_params {
            let x = &input[n * g.in_sample()..(n + 1) * g.in_sample()];
            im2col(g, x, &mut cols);
            gemm(g.filters, plane, patch, dy, false, &cols, true, 1.0, &mut grad_kernel);
            for (f, gb) in grad_bias.iter_mut().enumerate() {
                *gb += dy[f * plane..(f + 1) * plane].iter().sum::<f64>();
            }
        }
        if let Some(gi) = grad_input.as_mut() {
            gemm(patch, g.filters, plane, kernel, true, dy, false, 0.0, &mut cols);
            col2im(g, &cols, &mut gi[n * g.in_sample()..(n + 1) * g.in_sample()]);
        }
    }
    ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    }
}

/// Shape bookkeeping for a max-pool over `[N,C,H,W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(input: &[usize], window: usize, stride: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::Shape(format!("max_pool2d expects 4-D input, got {input:?}")));
        }
        if window == 0 || stride == 0 {
            return Err(Error::InvalidArgument("pool window and stride must be positive".into()));
        }
        let out_h = output_extent(input[2], window, stride, 0, "height")?;
        let out_w = output_extent(input[3], window, stride, 0, "width")?;
        Ok(Self {
            planes: input[0] * input[1],
            in_h: input[2],
            in_w: input[3],
            window,
            stride,
            out_h,
            out_w,
        })
    }
}

/// Per-window maximum plus the flat input index that won each window.
/// Ties resolve to the first position in row-major order.
pub(crate) fn max_pool_forward(g: &PoolGeometry, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let out_len = g.planes * g.out_h * g.out_w;
    let mut out = Vec::with_capacity(out_len);
    let mut argmax = Vec::with_capacity(out_len);
    for p in 0..g.planes {
        let base = p * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..g.window {
                    let row = base + (oy * g.stride + ky) * g.in_w + ox * g.stride;
                    for kx in 0..g.window {
                        let v = input[row + kx];
                        if v > best || best_idx == usize::MAX {
                            best = v;
                            best_idx = row + kx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}
