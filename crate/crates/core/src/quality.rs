//! Full-reference luma metrics and forward loss evaluators.
//!
//! Metrics run in `f64` on the 8-bit Y plane (`L = 255`); losses take
//! `[0, 1]`-normalised tensors and use `L = 1` wherever SSIM appears.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Serialize, Serializer};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::frame_io::Frame420;
use crate::nn::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum QualityError {
    #[error("geometry mismatch: {0}x{1} vs {2}x{3}")]
    GeometryMismatch(usize, usize, usize, usize),
    #[error("frame {width}x{height} is smaller than the {min}x{min} window")]
    FrameTooSmall { width: usize, height: usize, min: usize },
    #[error("clip lengths differ: {0} vs {1} frames")]
    FrameCountMismatch(usize, usize),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

pub type Result<T> = std::result::Result<T, QualityError>;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// A single-channel image in `f64`, the working type of every metric here.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "image size");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn luma(frame: &Frame420) -> Self {
        Self::new(
            frame.width(),
            frame.height(),
            frame.y().iter().map(|&v| f64::from(v)).collect(),
        )
    }

    /// 2×2 box average, odd trailing row/column dropped.
    pub fn halve(&self) -> Self {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let at = |dx: usize, dy: usize| self.data[(2 * y + dy) * self.width + 2 * x + dx];
                data.push((at(0, 0) + at(1, 0) + at(0, 1) + at(1, 1)) / 4.0);
            }
        }
        Self::new(w, h, data)
    }
}

fn same_geometry(a: &Image, b: &Image) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(QualityError::GeometryMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

fn frame_geometry(a: &Frame420, b: &Frame420) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(QualityError::GeometryMismatch(
            a.width(),
            a.height(),
            b.width(),
            b.height(),
        ));
    }
    Ok(())
}

/// PSNR over 8-bit samples; `+inf` when identical.
pub fn psnr_plane(a: &[u8], b: &[u8]) -> f64 {
    let sse: u64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = i64::from(x) - i64::from(y);
            (d * d) as u64
        })
        .sum();
    if sse == 0 {
        return f64::INFINITY;
    }
    let mse = sse as f64 / a.len() as f64;
    10.0 * (255.0f64 * 255.0 / mse).log10()
}

pub fn psnr_y(reference: &Frame420, distorted: &Frame420) -> Result<f64> {
    frame_geometry(reference, distorted)?;
    Ok(psnr_plane(reference.y(), distorted.y()))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    g.into_iter().map(|v| v / sum).collect()
}

/// Separable "valid" filtering: output is `(w - k + 1) x (h - k + 1)`.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &img[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean luminance term and mean contrast-structure term over all valid window positions.
struct SsimTerms {
    ssim: f64,
    cs: f64,
}

fn ssim_terms(a: &Image, b: &Image, data_range: f64) -> Result<SsimTerms> {
    same_geometry(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(QualityError::FrameTooSmall {
            width: a.width,
            height: a.height,
            min: SSIM_WINDOW,
        });
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let k = gaussian_window();
    let (w, h) = (a.width, a.height);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(&a.data, w, h, &k);
    let mu_b = filter_valid(&b.data, w, h, &k);
    let aa = filter_valid(&prod(&|x, _| x * x), w, h, &k);
    let bb = filter_valid(&prod(&|_, y| y * y), w, h, &k);
    let ab = filter_valid(&prod(&|x, y| x * y), w, h, &k);
    let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        ssim_sum += l * cs;
        cs_sum += cs;
    }
    let n = mu_a.len() as f64;
    Ok(SsimTerms {
        ssim: ssim_sum / n,
        cs: cs_sum / n,
    })
}

/// Single-scale SSIM (11×11 Gaussian, σ = 1.5) for samples spanning `data_range`.
pub fn ssim_image(a: &Image, b: &Image, data_range: f64) -> Result<f64> {
    Ok(ssim_terms(a, b, data_range)?.ssim)
}

pub fn ssim_y(reference: &Frame420, distorted: &Frame420) -> Result<f64> {
    frame_geometry(reference, distorted)?;
    ssim_image(&Image::luma(reference), &Image::luma(distorted), 255.0)
}

/// MS-SSIM value with the number of scales actually used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsSsim {
    pub value: f64,
    pub scales: usize,
}

/// Largest usable scale count (at most `max`) for a `w`×`h` image.
pub fn ms_ssim_scales(w: usize, h: usize, max: usize) -> usize {
    let short = w.min(h);
    (1..=max)
        .take_while(|&m| short >> (m - 1) >= SSIM_WINDOW)
        .last()
        .unwrap_or(0)
}

/// MS-SSIM with `weights` (one exponent per scale, finest first).
pub fn ms_ssim_weighted(a: &Image, b: &Image, data_range: f64, weights: &[f64]) -> Result<f64> {
    let mut a = a.clone();
    let mut b = b.clone();
    let mut value = 1.0;
    for (j, &beta) in weights.iter().enumerate() {
        let t = ssim_terms(&a, &b, data_range)?;
        let term = if j + 1 == weights.len() { t.ssim } else { t.cs };
        value *= term.max(0.0).powf(beta);
        if j + 1 < weights.len() {
            a = a.halve();
            b = b.halve();
        }
    }
    Ok(value)
}

/// Five-scale MS-SSIM; smaller images use as many scales as fit, with the
/// leading exponents renormalised to sum to one.
pub fn ms_ssim_image(a: &Image, b: &Image, data_range: f64) -> Result<MsSsim> {
    same_geometry(a, b)?;
    let scales = ms_ssim_scales(a.width, a.height, MS_SSIM_WEIGHTS.len());
    if scales == 0 {
        return Err(QualityError::FrameTooSmall {
            width: a.width,
            height: a.height,
            min: SSIM_WINDOW,
        });
    }
    let used = &MS_SSIM_WEIGHTS[..scales];
    let total: f64 = used.iter().sum();
    let weights: Vec<f64> = used.iter().map(|w| w / total).collect();
    Ok(MsSsim {
        value: ms_ssim_weighted(a, b, data_range, &weights)?,
        scales,
    })
}

pub fn ms_ssim_y(reference: &Frame420, distorted: &Frame420) -> Result<MsSsim> {
    frame_geometry(reference, distorted)?;
    ms_ssim_image(&Image::luma(reference), &Image::luma(distorted), 255.0)
}

fn check_shapes(p: &Tensor, t: &Tensor) -> Result<()> {
    let (a, b) = (p.shape(), t.shape());
    if a != b {
        return Err(QualityError::GeometryMismatch(a.w, a.h, b.w, b.h));
    }
    Ok(())
}

fn mean_of(p: &Tensor, t: &Tensor, f: impl Fn(f64) -> f64) -> Result<f64> {
    check_shapes(p, t)?;
    let sum: f64 = p
        .data()
        .iter()
        .zip(t.data())
        .map(|(&a, &b)| f(f64::from(a) - f64::from(b)))
        .sum();
    Ok(sum / p.data().len() as f64)
}

pub const CHARBONNIER_EPS: f64 = 1e-3;

/// Mean of `sqrt(d² + eps²)`.
pub fn charbonnier(pred: &Tensor, target: &Tensor, eps: f64) -> Result<f64> {
    mean_of(pred, target, |d| (d * d + eps * eps).sqrt())
}

pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    mean_of(pred, target, f64::abs)
}

pub fn l2_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    mean_of(pred, target, |d| d * d)
}

fn fft2d(planner: &mut FftPlanner<f64>, data: &mut [Complex<f64>], w: usize, h: usize) {
    let row: Arc<dyn rustfft::Fft<f64>> = planner.plan_fft_forward(w);
    for chunk in data.chunks_exact_mut(w) {
        row.process(chunk);
    }
    let col = planner.plan_fft_forward(h);
    let mut buf = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            buf[y] = data[y * w + x];
        }
        col.process(&mut buf);
        for y in 0..h {
            data[y * w + x] = buf[y];
        }
    }
}

/// Mean of `|Δre|` and `|Δim|` over every bin of each channel's unnormalised 2-D DFT.
pub fn fft_l1(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_shapes(pred, target)?;
    let s = pred.shape();
    let mut planner = FftPlanner::new();
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            // The DFT is linear, so transforming the difference gives the bin differences.
            let mut bins: Vec<Complex<f64>> = pred
                .plane(n, c)
                .iter()
                .zip(target.plane(n, c))
                .map(|(&a, &b)| Complex::new(f64::from(a) - f64::from(b), 0.0))
                .collect();
            fft2d(&mut planner, &mut bins, s.w, s.h);
            total += bins.iter().map(|z| z.re.abs() + z.im.abs()).sum::<f64>();
        }
    }
    Ok(total / (2 * s.numel()) as f64)
}

pub const LAPLACIAN_LEVELS: usize = 5;
const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Separable 5-tap binomial blur with edge replication.
fn blur(img: &Image) -> Image {
    let (w, h) = (img.width, img.height);
    let tap = |i: usize, k: usize, len: usize| (i + k).saturating_sub(2).min(len - 1);
    let mut rows = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (0..5).map(|k| BINOMIAL[k] * img.data[y * w + tap(x, k, w)]).sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..5).map(|k| BINOMIAL[k] * rows[tap(y, k, h) * w + x]).sum();
        }
    }
    Image::new(w, h, out)
}

fn decimate(img: &Image) -> Image {
    let (w, h) = (img.width.div_ceil(2), img.height.div_ceil(2));
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(img.data[2 * y * img.width + 2 * x]);
        }
    }
    Image::new(w, h, data)
}

/// Band-pass levels `G_j - blur(G_j)`, with the residual low-pass as the last level.
pub fn laplacian_pyramid(img: &Image, levels: usize) -> Vec<Image> {
    let mut out = Vec::with_capacity(levels);
    let mut g = img.clone();
    for _ in 1..levels {
        let low = blur(&g);
        let band: Vec<f64> = g.data.iter().zip(&low.data).map(|(a, b)| a - b).collect();
        out.push(Image::new(g.width, g.height, band));
        g = decimate(&low);
    }
    if levels > 0 {
        out.push(g);
    }
    out
}

/// `Σ_j 4^j · mean|L_j(pred) - L_j(target)|` over a `levels`-deep pyramid.
pub fn laplacian_loss_levels(pred: &Tensor, target: &Tensor, levels: usize) -> Result<f64> {
    check_shapes(pred, target)?;
    let s = pred.shape();
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            // The pyramid is linear, so the pyramid of the difference is the difference of pyramids.
            let diff: Vec<f64> = pred
                .plane(n, c)
                .iter()
                .zip(target.plane(n, c))
                .map(|(&a, &b)| f64::from(a) - f64::from(b))
                .collect();
            for (j, level) in laplacian_pyramid(&Image::new(s.w, s.h, diff), levels)
                .iter()
                .enumerate()
            {
                let mean = level.data.iter().map(|v| v.abs()).sum::<f64>() / level.data.len() as f64;
                total += 4f64.powi(j as i32) * mean;
            }
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

pub fn laplacian_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    laplacian_loss_levels(pred, target, LAPLACIAN_LEVELS)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_l1: f64,
    pub w_ssim: f64,
    pub w_l2: f64,
    pub w_msssim: f64,
    /// Ground-truth weight in the distillation loss.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_l1: 0.3,
            w_ssim: 0.2,
            w_l2: 0.1,
            w_msssim: 0.4,
            alpha: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let sum = self.w_l1 + self.w_ssim + self.w_l2 + self.w_msssim;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(QualityError::InvalidWeights(format!("weights sum to {sum}, not 1")));
        }
        if self.alpha <= 0.0 {
            return Err(QualityError::InvalidWeights(format!("alpha {} must be positive", self.alpha)));
        }
        Ok(())
    }

    pub fn combine(&self, c: &PerceptualComponents) -> f64 {
        self.w_l1 * c.l1 + self.w_ssim * c.ssim_loss + self.w_l2 * c.l2 + self.w_msssim * c.ms_ssim_loss
    }
}

/// The four terms of the weighted perceptual objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerceptualComponents {
    pub l1: f64,
    /// `1 - SSIM`
    pub ssim_loss: f64,
    pub l2: f64,
    /// `1 - MS-SSIM`
    pub ms_ssim_loss: f64,
}

fn planes(t: &Tensor) -> impl Iterator<Item = Image> + '_ {
    let s = t.shape();
    (0..s.n).flat_map(move |n| {
        (0..s.c).map(move |c| {
            Image::new(s.w, s.h, t.plane(n, c).iter().map(|&v| f64::from(v)).collect())
        })
    })
}

pub fn perceptual_components(pred: &Tensor, target: &Tensor) -> Result<PerceptualComponents> {
    check_shapes(pred, target)?;
    let pairs: Vec<(Image, Image)> = planes(pred).zip(planes(target)).collect();
    let count = pairs.len() as f64;
    let (mut ssim, mut ms) = (0.0, 0.0);
    for (a, b) in &pairs {
        ssim += ssim_image(a, b, 1.0)?;
        ms += ms_ssim_image(a, b, 1.0)?.value;
    }
    Ok(PerceptualComponents {
        l1: l1_loss(pred, target)?,
        ssim_loss: 1.0 - ssim / count,
        l2: l2_loss(pred, target)?,
        ms_ssim_loss: 1.0 - ms / count,
    })
}

/// `0.3·L1 + 0.2·(1-SSIM) + 0.1·L2 + 0.4·(1-MS-SSIM)` with the default weights.
pub fn combined_perceptual_loss(pred: &Tensor, target: &Tensor, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    Ok(weights.combine(&perceptual_components(pred, target)?))
}

/// `alpha · lap_gt + Σ lap_teachers`.
pub fn kd_combine(lap_gt: f64, lap_teachers: &[f64], alpha: f64) -> f64 {
    alpha * lap_gt + lap_teachers.iter().sum::<f64>()
}

pub fn kd_total_loss(student: &Tensor, teachers: &[Tensor], ground_truth: &Tensor, alpha: f64) -> Result<f64> {
    let lap_gt = laplacian_loss(student, ground_truth)?;
    let lap_t = teachers
        .iter()
        .map(|t| laplacian_loss(student, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(kd_combine(lap_gt, &lap_t, alpha))
}

/// Metrics of one frame pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub ms_ssim_y: Option<MsSsim>,
}

/// Per-frame series plus clip means; infinite PSNR frames are left out of the PSNR mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricScore {
    pub frames: Vec<FrameScore>,
    /// `+inf` when every frame is identical.
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub ms_ssim_y: Option<f64>,
    pub inf_psnr_frames: usize,
}

pub fn score_frame(reference: &Frame420, distorted: &Frame420, with_ms_ssim: bool) -> Result<FrameScore> {
    Ok(FrameScore {
        psnr_y: psnr_y(reference, distorted)?,
        ssim_y: ssim_y(reference, distorted)?,
        ms_ssim_y: if with_ms_ssim {
            Some(ms_ssim_y(reference, distorted)?)
        } else {
            None
        },
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Aggregates per-frame scores left to right.
pub fn aggregate(frames: Vec<FrameScore>) -> MetricScore {
    let inf_psnr_frames = frames.iter().filter(|f| f.psnr_y.is_infinite()).count();
    let psnr_y = mean(frames.iter().map(|f| f.psnr_y).filter(|v| v.is_finite()))
        .unwrap_or(f64::INFINITY);
    let ssim_y = mean(frames.iter().map(|f| f.ssim_y)).unwrap_or(f64::NAN);
    let ms_ssim_y = if frames.iter().all(|f| f.ms_ssim_y.is_some()) {
        mean(frames.iter().filter_map(|f| f.ms_ssim_y.map(|m| m.value)))
    } else {
        None
    };
    MetricScore {
        frames,
        psnr_y,
        ssim_y,
        ms_ssim_y,
        inf_psnr_frames,
    }
}

/// Frame-parallel clip scoring.
pub fn score_clip(reference: &[Frame420], distorted: &[Frame420], with_ms_ssim: bool) -> Result<MetricScore> {
    if reference.len() != distorted.len() {
        return Err(QualityError::FrameCountMismatch(reference.len(), distorted.len()));
    }
    let frames = reference
        .par_iter()
        .zip(distorted)
        .map(|(r, d)| score_frame(r, d, with_ms_ssim))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(frames))
}

/// A number written with six decimals; infinities become `"inf"` / `"-inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fixed6(pub f64);

impl Serialize for Fixed6 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let v = self.0;
        if v.is_nan() {
            return s.serialize_str("nan");
        }
        if v.is_infinite() {
            return s.serialize_str(if v > 0.0 { "inf" } else { "-inf" });
        }
        RawValue::from_string(format!("{v:.6}"))
            .map_err(serde::ser::Error::custom)?
            .serialize(s)
    }
}

#[derive(Serialize)]
struct ClipJson {
    psnr_y: Fixed6,
    ssim_y: Fixed6,
    ms_ssim_y: Option<Fixed6>,
    inf_psnr_frames: usize,
}

#[derive(Serialize)]
struct FrameJson {
    index: usize,
    psnr_y: Fixed6,
    ssim_y: Fixed6,
    ms_ssim_y: Option<Fixed6>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ms_ssim_scales: Option<usize>,
}

#[derive(Serialize)]
struct ReportJson {
    clip: ClipJson,
    #[serde(skip_serializing_if = "Option::is_none")]
    frames: Option<Vec<FrameJson>>,
}

/// `{clip: {...}, frames: [...]}`; `frames` only when `per_frame` is set.
pub fn metrics_json(score: &MetricScore, per_frame: bool) -> String {
    let report = ReportJson {
        clip: ClipJson {
            psnr_y: Fixed6(score.psnr_y),
            ssim_y: Fixed6(score.ssim_y),
            ms_ssim_y: score.ms_ssim_y.map(Fixed6),
            inf_psnr_frames: score.inf_psnr_frames,
        },
        frames: per_frame.then(|| {
            score
                .frames
                .iter()
                .enumerate()
                .map(|(index, f)| FrameJson {
                    index,
                    psnr_y: Fixed6(f.psnr_y),
                    ssim_y: Fixed6(f.ssim_y),
                    ms_ssim_y: f.ms_ssim_y.map(|m| Fixed6(m.value)),
                    ms_ssim_scales: f.ms_ssim_y.map(|m| m.scales),
                })
                .collect()
        }),
    };
    serde_json::to_string_pretty(&report).expect("report serialises")
}
