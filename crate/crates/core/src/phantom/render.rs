//! Geometry, coverage rasterisation and image degradation for phantom frames.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::frame::{Pathology, View, MAX_PIXEL};

/// Supersampling factor per axis for boundary pixels.
const SUBSAMPLES: usize = 8;

/// Rotated ellipse or straight capsule, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        angle: f64,
    },
    Capsule {
        y0: f64,
        x0: f64,
        y1: f64,
        x1: f64,
        half_width: f64,
    },
}

impl Shape {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Capsule {
                y0,
                x0,
                y1,
                x1,
                half_width,
            } => {
                let (vy, vx) = (y1 - y0, x1 - x0);
                let len2 = vy * vy + vx * vx;
                let t = if len2 > 0.0 {
                    (((y - y0) * vy + (x - x0) * vx) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (py, px) = (y0 + t * vy, x0 + t * vx);
                (y - py).powi(2) + (x - px).powi(2) <= half_width * half_width
            }
        }
    }

    /// Inclusive pixel bounding box `(y_min, y_max, x_min, x_max)` as floats.
    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, .. } => {
                let r = ry.max(rx);
                (cy - r, cy + r, cx - r, cx + r)
            }
            Shape::Capsule {
                y0,
                x0,
                y1,
                x1,
                half_width,
            } => (
                y0.min(y1) - half_width,
                y0.max(y1) + half_width,
                x0.min(x1) - half_width,
                x0.max(x1) + half_width,
            ),
        }
    }

    /// Fractional pixel coverage over an `h×w` grid, supersampled where a
    /// pixel straddles the boundary.
    pub fn coverage(&self, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        let (y0, y1, x0, x1) = self.bounds();
        let clamp = |v: f64, n: usize| v.floor().clamp(0.0, n as f64 - 1.0) as usize;
        let (ya, yb, xa, xb) = (clamp(y0 - 1.0, h), clamp(y1 + 1.0, h), clamp(x0 - 1.0, w), clamp(x1 + 1.0, w));
        let step = 1.0 / SUBSAMPLES as f64;
        for i in ya..=yb {
            for j in xa..=xb {
                let (fy, fx) = (i as f64, j as f64);
                let corners = [
                    self.contains(fy, fx),
                    self.contains(fy, fx + 1.0),
                    self.contains(fy + 1.0, fx),
                    self.contains(fy + 1.0, fx + 1.0),
                    self.contains(fy + 0.5, fx + 0.5),
                ];
                let v = if corners.iter().all(|&c| c) {
                    1.0
                } else if corners.iter().all(|&c| !c) {
                    0.0
                } else {
                    let mut hits = 0usize;
                    for a in 0..SUBSAMPLES {
                        for b in 0..SUBSAMPLES {
                            let sy = fy + (a as f64 + 0.5) * step;
                            let sx = fx + (b as f64 + 0.5) * step;
                            hits += self.contains(sy, sx) as usize;
                        }
                    }
                    hits as f64 / (SUBSAMPLES * SUBSAMPLES) as f64
                };
                out[i * w + j] = v;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structure {
    LeftVentricle,
    RightVentricle,
    LeftAtrium,
    RightAtrium,
    LeftOutflow,
    RightOutflow,
}

impl Structure {
    pub fn is_chamber(self) -> bool {
        !matches!(self, Structure::LeftOutflow | Structure::RightOutflow)
    }
}

/// Per-frame placement of the heart: centre, scale and in-plane rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub cy: f64,
    pub cx: f64,
    pub scale: f64,
    pub angle: f64,
}

impl Placement {
    pub fn centred(h: usize, w: usize) -> Self {
        Self {
            cy: h as f64 / 2.0,
            cx: w as f64 / 2.0,
            scale: h.min(w) as f64,
            angle: 0.0,
        }
    }

    /// Maps an offset in heart units to pixel coordinates.
    fn at(&self, dy: f64, dx: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (dy * self.scale, dx * self.scale);
        (self.cy + dy * c + dx * s, self.cx - dy * s + dx * c)
    }

    fn ellipse(&self, dy: f64, dx: f64, ry: f64, rx: f64) -> Shape {
        let (cy, cx) = self.at(dy, dx);
        Shape::Ellipse {
            cy,
            cx,
            ry: ry * self.scale,
            rx: rx * self.scale,
            angle: -self.angle,
        }
    }

    fn capsule(&self, from: (f64, f64), to: (f64, f64), half_width: f64) -> Shape {
        let (y0, x0) = self.at(from.0, from.1);
        let (y1, x1) = self.at(to.0, to.1);
        Shape::Capsule {
            y0,
            x0,
            y1,
            x1,
            half_width: half_width * self.scale,
        }
    }
}

const VENTRICLE_AXES: (f64, f64) = (0.095, 0.085);
const ATRIUM_AXES: (f64, f64) = (0.075, 0.075);
const OUTFLOW_HALF_WIDTH: f64 = 0.03;

/// View-specific cardiac structures. HLHS scales the left ventricle (and,
/// in the LVOT view, its outflow width) by `lv_scale`.
pub fn heart_layout(view: View, pathology: Pathology, lv_scale: f64, place: &Placement) -> Vec<(Structure, Shape)> {
    let lv = if pathology == Pathology::Hlhs { lv_scale } else { 1.0 };
    let (vy, vx) = VENTRICLE_AXES;
    match view {
        View::FourCh => vec![
            (Structure::RightVentricle, place.ellipse(-0.11, -0.12, vy, vx)),
            (Structure::LeftVentricle, place.ellipse(-0.11, 0.12, vy * lv, vx * lv)),
            (Structure::RightAtrium, place.ellipse(0.11, -0.12, ATRIUM_AXES.0, ATRIUM_AXES.1)),
            (Structure::LeftAtrium, place.ellipse(0.11, 0.12, ATRIUM_AXES.0, ATRIUM_AXES.1)),
        ],
        View::Lvot => vec![
            (Structure::RightVentricle, place.ellipse(0.07, -0.12, vy, vx)),
            (Structure::LeftVentricle, place.ellipse(0.07, 0.12, vy * lv, vx * lv)),
            (
                Structure::LeftOutflow,
                place.capsule((0.07, 0.12), (-0.24, -0.03), OUTFLOW_HALF_WIDTH * lv),
            ),
        ],
        View::Rvot => vec![
            (Structure::RightVentricle, place.ellipse(0.07, -0.12, vy, vx)),
            (Structure::LeftVentricle, place.ellipse(0.07, 0.12, vy * lv, vx * lv)),
            (
                Structure::RightOutflow,
                place.capsule((0.07, -0.12), (-0.24, 0.03), OUTFLOW_HALF_WIDTH),
            ),
        ],
        View::Background => Vec::new(),
    }
}

/// Patient-specific background texture: two oriented gratings and an offset.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceTexture {
    gratings: [(f64, f64, f64, f64); 2],
    offset: f64,
}

impl NuisanceTexture {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut grating = |weight: f64| {
            let freq = rng.gen_range(0.03..0.12);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (freq * theta.sin(), freq * theta.cos(), phase, weight)
        };
        let gratings = [grating(0.6), grating(0.4)];
        Self {
            gratings,
            offset: rng.gen_range(-1.0..1.0),
        }
    }

    /// Texture value in `[-1, 1]` at pixel `(y, x)`.
    pub fn at(&self, y: f64, x: f64) -> f64 {
        self.gratings
            .iter()
            .map(|&(fy, fx, phase, weight)| weight * (std::f64::consts::TAU * (fy * y + fx * x) + phase).cos())
            .sum()
    }
}

pub const BACKGROUND_LEVEL: f64 = 55.0;
pub const NUISANCE_AMPLITUDE: f64 = 25.0;
pub const NUISANCE_OFFSET: f64 = 10.0;
pub const STRUCTURE_LEVEL: f64 = 170.0;

/// Background field: base level plus the patient texture.
pub fn background_field(h: usize, w: usize, texture: &NuisanceTexture, strength: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let t = texture.at(i as f64, j as f64);
            out.push(BACKGROUND_LEVEL + strength * (NUISANCE_AMPLITUDE * t + NUISANCE_OFFSET * texture.offset));
        }
    }
    out
}

/// Union coverage of a set of shapes (clipped at 1).
pub fn union_coverage<'a>(shapes: impl IntoIterator<Item = &'a Shape>, h: usize, w: usize) -> Vec<f64> {
    let mut total = vec![0.0; h * w];
    for s in shapes {
        for (t, c) in total.iter_mut().zip(s.coverage(h, w)) {
            *t = f64::max(*t, c);
        }
    }
    total
}

/// Alpha-blend a structure level over a base field using coverage.
pub fn composite(base: &mut [f64], coverage: &[f64], level: f64) {
    for (b, &c) in base.iter_mut().zip(coverage) {
        *b = *b * (1.0 - c) + level * c;
    }
}

/// Separable box blur with edge clamping.
pub fn box_blur(img: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return img.to_vec();
    }
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for d in -r..=r {
                let jj = (j as isize + d).clamp(0, w as isize - 1) as usize;
                acc += img[i * w + jj];
            }
            tmp[i * w + j] = acc * norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for d in -r..=r {
                let ii = (i as isize + d).clamp(0, h as isize - 1) as usize;
                acc += tmp[ii * w + j];
            }
            out[i * w + j] = acc * norm;
        }
    }
    out
}

/// Blur, add Gaussian speckle noise, clamp to `[0, 300]` and round to the
/// integer grid stored on disk.
pub fn degrade(img: &[f64], h: usize, w: usize, sigma: f64, blur_radius: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let blurred = box_blur(img, h, w, blur_radius);
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    blurred
        .into_iter()
        .map(|v| {
            let n = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            finish(v + n)
        })
        .collect()
}

/// Clamp to the pixel range and round to an integer level.
pub fn finish(v: f64) -> f64 {
    v.clamp(0.0, MAX_PIXEL).round()
}
