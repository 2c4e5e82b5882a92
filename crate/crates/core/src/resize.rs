//! Area-averaging resampling of single-channel frames.

use crate::error::{Error, Result};
use crate::frame::Frame;

/// For each output index, the source indices it covers and their weights.
fn footprints(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * ratio;
            let hi = lo + ratio;
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, overlap / ratio));
                }
                i += 1;
            }
            taps
        })
        .collect()
}

/// Resamples an `h×w` plane to `out_h×out_w`; each output pixel is the mean
/// of the input area it covers.
pub fn resample(plane: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if (h, w) == (out_h, out_w) {
        return plane.to_vec();
    }
    let cols = footprints(w, out_w);
    let rows = footprints(h, out_h);
    let mut horiz = vec![0.0; h * out_w];
    for i in 0..h {
        let src = &plane[i * w..(i + 1) * w];
        for (j, taps) in cols.iter().enumerate() {
            horiz[i * out_w + j] = taps.iter().map(|&(k, c)| c * src[k]).sum();
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for (i, taps) in rows.iter().enumerate() {
        for &(k, c) in taps {
            let src = &horiz[k * out_w..(k + 1) * out_w];
            for (o, s) in out[i * out_w..(i + 1) * out_w].iter_mut().zip(src) {
                *o += c * s;
            }
        }
    }
    out
}

/// Grey-scale copy of `frame` at the given size. Labels are kept.
pub fn resize_frame(frame: &Frame, out_h: usize, out_w: usize) -> Result<Frame> {
    if out_h == 0 || out_w == 0 || out_h > frame.height || out_w > frame.width {
        return Err(Error::InvalidArgument(format!(
            "cannot resize {}x{} to {}x{}",
            frame.height, frame.width, out_h, out_w
        )));
    }
    let pixels = resample(&frame.gray(), frame.height, frame.width, out_h, out_w)
        .into_iter()
        .map(|p| p.clamp(0.0, crate::frame::MAX_PIXEL))
        .collect();
    Ok(Frame {
        height: out_h,
        width: out_w,
        channels: 1,
        pixels,
        ..frame.clone()
    })
}
