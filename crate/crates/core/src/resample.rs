//! Separable Lanczos / bicubic / nearest scalers for 4:2:0 frames.
//!
//! Coordinates are centre-aligned (`src = (dst + 0.5) * in/out - 0.5`) and
//! borders replicate the edge sample. When shrinking, the kernel is stretched
//! by the scale ratio so it also acts as the anti-alias filter.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::frame_io::{chroma_dim, Frame420};
use crate::nn::{Shape, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum ResampleError {
    #[error("output {0}x{1} is too small (both sides must be at least 2)")]
    OutputTooSmall(usize, usize),
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("invalid size {0}x{1}")]
    InvalidSize(usize, usize),
}

pub type Result<T> = std::result::Result<T, ResampleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterSpec {
    /// Windowed sinc with window parameter `a` (2..=8).
    Lanczos(u32),
    /// Catmull-Rom cubic (B = 0, C = 0.5).
    Bicubic,
    Nearest,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec::Lanczos(3)
    }
}

impl FilterSpec {
    pub const LANCZOS5: FilterSpec = FilterSpec::Lanczos(5);

    pub fn validate(self) -> Result<Self> {
        match self {
            FilterSpec::Lanczos(a) if !(2..=8).contains(&a) => Err(ResampleError::InvalidFilter(
                format!("lanczos window {a} outside 2..=8"),
            )),
            other => Ok(other),
        }
    }

    fn support(self) -> f64 {
        match self {
            FilterSpec::Lanczos(a) => f64::from(a),
            FilterSpec::Bicubic => 2.0,
            FilterSpec::Nearest => 0.5,
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            FilterSpec::Lanczos(a) => lanczos_kernel(x, f64::from(a)),
            FilterSpec::Bicubic => catmull_rom(x),
            FilterSpec::Nearest => unreachable!("nearest is index based"),
        }
    }
}

impl fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterSpec::Lanczos(a) => write!(f, "lanczos:{a}"),
            FilterSpec::Bicubic => f.write_str("bicubic"),
            FilterSpec::Nearest => f.write_str("nearest"),
        }
    }
}

impl FromStr for FilterSpec {
    type Err = ResampleError;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let spec = match (kind.to_ascii_lowercase().as_str(), arg) {
            ("lanczos", None) => FilterSpec::default(),
            ("lanczos", Some(a)) => FilterSpec::Lanczos(
                a.parse()
                    .map_err(|_| ResampleError::InvalidFilter(s.to_string()))?,
            ),
            ("bicubic", None) => FilterSpec::Bicubic,
            ("nearest", None) => FilterSpec::Nearest,
            _ => return Err(ResampleError::InvalidFilter(s.to_string())),
        };
        spec.validate()
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// `sinc(x) * sinc(x / a)` inside the window, zero outside.
pub fn lanczos_kernel(x: f64, a: f64) -> f64 {
    if x.abs() < a {
        sinc(x) * sinc(x / a)
    } else {
        0.0
    }
}

fn catmull_rom(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        1.5 * x * x * x - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// Normalised taps of one output sample: weights for `start..start + weights.len()`
/// before edge clamping.
#[derive(Debug, Clone, PartialEq)]
pub struct Taps {
    pub start: isize,
    pub weights: Vec<f64>,
}

/// Per-output-sample taps for resizing one axis from `in_len` to `out_len`.
pub fn axis_taps(in_len: usize, out_len: usize, filter: FilterSpec) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|dst| {
            if filter == FilterSpec::Nearest {
                let idx = ((dst as f64 + 0.5) * scale).floor() as isize;
                return Taps {
                    start: idx.min(in_len as isize - 1),
                    weights: vec![1.0],
                };
            }
            let src = (dst as f64 + 0.5) * scale - 0.5;
            let stretch = scale.max(1.0);
            let radius = filter.support() * stretch;
            let lo = (src - radius).floor() as isize;
            let hi = (src + radius).ceil() as isize;
            let mut weights: Vec<f64> = (lo..=hi)
                .map(|i| filter.eval((i as f64 - src) / stretch))
                .collect();
            let sum: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= sum);
            Taps { start: lo, weights }
        })
        .collect()
}

/// A single-channel image of real samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "plane size");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_u8(width: usize, height: usize, samples: &[u8]) -> Self {
        Self::new(width, height, samples.iter().map(|&v| f32::from(v)).collect())
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Rounds half away from zero and clamps to 8 bits.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn apply_taps(taps: &Taps, len: usize, sample: impl Fn(usize) -> f32) -> f32 {
    let last = len as isize - 1;
    let mut acc = 0.0f64;
    for (k, &w) in taps.weights.iter().enumerate() {
        let i = (taps.start + k as isize).clamp(0, last) as usize;
        acc += w * f64::from(sample(i));
    }
    acc as f32
}

/// Separable resize, horizontal pass first.
pub fn resample_plane(plane: &Plane, out_w: usize, out_h: usize, filter: FilterSpec) -> Result<Plane> {
    if out_w == 0 || out_h == 0 || plane.width == 0 || plane.height == 0 {
        return Err(ResampleError::InvalidSize(out_w, out_h));
    }
    let filter = filter.validate()?;
    let htaps = axis_taps(plane.width, out_w, filter);
    let vtaps = axis_taps(plane.height, out_h, filter);

    let mut mid = vec![0.0f32; out_w * plane.height];
    for y in 0..plane.height {
        let row = &plane.data[y * plane.width..(y + 1) * plane.width];
        for (x, taps) in htaps.iter().enumerate() {
            mid[y * out_w + x] = apply_taps(taps, plane.width, |i| row[i]);
        }
    }
    let mut out = vec![0.0f32; out_w * out_h];
    for (y, taps) in vtaps.iter().enumerate() {
        for x in 0..out_w {
            out[y * out_w + x] = apply_taps(taps, plane.height, |i| mid[i * out_w + x]);
        }
    }
    Ok(Plane::new(out_w, out_h, out))
}

fn resample_u8(
    samples: &[u8],
    w: usize,
    h: usize,
    out_w: usize,
    out_h: usize,
    filter: FilterSpec,
) -> Result<Vec<u8>> {
    Ok(resample_plane(&Plane::from_u8(w, h, samples), out_w, out_h, filter)?.to_u8())
}

/// Resizes all three planes to an explicit luma geometry.
pub fn resize_420(frame: &Frame420, out_w: usize, out_h: usize, filter: FilterSpec) -> Result<Frame420> {
    if out_w < 2 || out_h < 2 {
        return Err(ResampleError::OutputTooSmall(out_w, out_h));
    }
    let (w, h) = (frame.width(), frame.height());
    let (cw, ch) = (frame.chroma_width(), frame.chroma_height());
    let (ocw, och) = (chroma_dim(out_w), chroma_dim(out_h));
    let y = resample_u8(frame.y(), w, h, out_w, out_h, filter)?;
    let cb = resample_u8(frame.cb(), cw, ch, ocw, och, filter)?;
    let cr = resample_u8(frame.cr(), cw, ch, ocw, och, filter)?;
    Ok(Frame420::new(out_w, out_h, y, cb, cr).expect("plane sizes follow the 4:2:0 layout"))
}

/// Luma size after shrinking by an integer factor (rounded to nearest).
pub fn downscaled_size(w: usize, h: usize, factor: usize) -> (usize, usize) {
    let r = |v: usize| (v as f64 / factor as f64).round() as usize;
    (r(w), r(h))
}

fn check_factor(factor: usize) -> Result<()> {
    if (2..=4).contains(&factor) {
        Ok(())
    } else {
        Err(ResampleError::InvalidFilter(format!(
            "scale factor {factor} outside 2..=4"
        )))
    }
}

pub fn downscale_420(frame: &Frame420, factor: usize, filter: FilterSpec) -> Result<Frame420> {
    check_factor(factor)?;
    let (w, h) = downscaled_size(frame.width(), frame.height(), factor);
    resize_420(frame, w, h, filter)
}

pub fn upscale_420(frame: &Frame420, factor: usize, filter: FilterSpec) -> Result<Frame420> {
    check_factor(factor)?;
    resize_420(frame, frame.width() * factor, frame.height() * factor, filter)
}

/// Lifts a frame to a `(1, 3, H, W)` tensor in `[0, 1]`, chroma by nearest-neighbour doubling.
pub fn chroma_to_444(frame: &Frame420) -> Tensor {
    let (w, h, cw) = (frame.width(), frame.height(), frame.chroma_width());
    let ch = frame.chroma_height();
    let (y, cb, cr) = (frame.y(), frame.cb(), frame.cr());
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, yy, xx| {
        let v = match c {
            0 => y[yy * w + xx],
            _ => {
                let idx = (yy / 2).min(ch - 1) * cw + (xx / 2).min(cw - 1);
                if c == 1 {
                    cb[idx]
                } else {
                    cr[idx]
                }
            }
        };
        f32::from(v) / 255.0
    })
}

/// Inverse of [`chroma_to_444`]: denormalises, averages chroma over 2×2 cells and quantises.
pub fn tensor444_to_frame(t: &Tensor) -> Frame420 {
    let s = t.shape();
    assert_eq!((s.n, s.c), (1, 3), "expected a single 3-channel image");
    let (w, h) = (s.w, s.h);
    let (cw, ch) = (chroma_dim(w), chroma_dim(h));
    let y: Vec<u8> = t.plane(0, 0).iter().map(|&v| quantize(v * 255.0)).collect();
    let sub = |c: usize| -> Vec<u8> {
        let p = t.plane(0, c);
        let mut out = Vec::with_capacity(cw * ch);
        for cy in 0..ch {
            for cx in 0..cw {
                let (mut sum, mut n) = (0.0f32, 0.0f32);
                for yy in 2 * cy..(2 * cy + 2).min(h) {
                    for xx in 2 * cx..(2 * cx + 2).min(w) {
                        sum += p[yy * w + xx];
                        n += 1.0;
                    }
                }
                out.push(quantize(sum / n * 255.0));
            }
        }
        out
    };
    Frame420::new(w, h, y, sub(1), sub(2)).expect("plane sizes follow the 4:2:0 layout")
}
