//! Layer kernels. All are pure functions of their inputs.

use rayon::prelude::*;

use super::{NnError, Result, Shape, Tensor};

/// A 2-D convolution layer (cross-correlation, zero padding).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `(out_ch, in_ch, kernel, kernel)`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvSpec {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        let spec = Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            weight,
            bias,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Zero-weight layer; "same" padding for stride 1.
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding: (kernel - 1) / 2,
            weight: vec![0.0; out_ch * in_ch * kernel * kernel],
            bias: vec![0.0; out_ch],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(NnError::InvalidLayer(detail));
        if self.in_ch == 0 || self.out_ch == 0 {
            return bad("conv channels must be positive".into());
        }
        if !matches!(self.kernel, 1 | 3) {
            return bad(format!("unsupported kernel {}", self.kernel));
        }
        if !matches!(self.stride, 1 | 2) || self.padding > 1 {
            return bad(format!(
                "unsupported stride {} / padding {}",
                self.stride, self.padding
            ));
        }
        let expected = self.out_ch * self.in_ch * self.kernel * self.kernel;
        if self.weight.len() != expected || self.bias.len() != self.out_ch {
            return bad(format!(
                "weight/bias sizes {}/{} do not match ({}, {}, {k}, {k})",
                self.weight.len(),
                self.bias.len(),
                self.out_ch,
                self.in_ch,
                k = self.kernel
            ));
        }
        Ok(())
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel * self.kernel
    }

    #[inline]
    pub fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f32 {
        self.weight[((o * self.in_ch + i) * self.kernel + ky) * self.kernel + kx]
    }

    pub fn param_count(&self) -> u64 {
        (self.weight.len() + self.bias.len()) as u64
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let span = |len: usize| {
            let padded = len + 2 * self.padding;
            (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
        };
        Some((span(h)?, span(w)?))
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_ch {
            return Err(NnError::shape(format!(
                "conv expects {} input channels, got {}",
                self.in_ch, input.c
            )));
        }
        let (h, w) = self.output_hw(input.h, input.w).ok_or_else(|| {
            NnError::shape(format!(
                "input {}x{} smaller than kernel {}",
                input.h, input.w, self.kernel
            ))
        })?;
        Ok(Shape::new(input.n, self.out_ch, h, w))
    }

    pub fn macs(&self, out: Shape) -> u64 {
        (self.out_ch * self.in_ch * self.kernel_area()) as u64 * (out.h * out.w) as u64
    }
}

/// Output columns `ox` for which `ox*stride + kx - pad` lands inside `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub fn conv2d(input: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let out_shape = spec.output_shape(input.shape())?;
    let in_shape = input.shape();
    let (ih, iw) = (in_shape.h, in_shape.w);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let mut out = Tensor::zeros(out_shape);
    let plane_len = oh * ow;
    if plane_len == 0 {
        return Ok(out);
    }

    out.data_mut()
        .par_chunks_mut(plane_len)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (n, oc) = (idx / spec.out_ch, idx % spec.out_ch);
            plane.fill(spec.bias[oc]);
            for ic in 0..spec.in_ch {
                let src = input.plane(n, ic);
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(ih, oh, ky, p, s);
                    for kx in 0..k {
                        let wv = spec.w(oc, ic, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(iw, ow, kx, p, s);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let row = &src[iy * iw..(iy + 1) * iw];
                            let dst = &mut plane[oy * ow + ox_lo..oy * ow + ox_hi];
                            if s == 1 {
                                let ix0 = ox_lo + kx - p;
                                for (d, &v) in dst.iter_mut().zip(&row[ix0..ix0 + (ox_hi - ox_lo)]) {
                                    *d += wv * v;
                                }
                            } else {
                                for (j, d) in dst.iter_mut().enumerate() {
                                    *d += wv * row[(ox_lo + j) * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Space-to-depth. Output channel `c*r*r + dy*r + dx` holds sub-position `(dy, dx)` of channel `c`.
pub fn pixel_unshuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let s = input.shape();
    if r < 2 || !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
        return Err(NnError::NotDivisible(format!(
            "pixel_unshuffle({r}) needs h, w divisible by {r}, got {}x{}",
            s.h, s.w
        )));
    }
    let out_shape = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            for dy in 0..r {
                for dx in 0..r {
                    let oc = c * r * r + dy * r + dx;
                    for y in 0..out_shape.h {
                        for x in 0..out_shape.w {
                            let dst = out.index(n, oc, y, x);
                            out.data_mut()[dst] = input.at(n, c, y * r + dy, x * r + dx);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Depth-to-space; exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let s = input.shape();
    if r < 2 || !s.c.is_multiple_of(r * r) {
        return Err(NnError::NotDivisible(format!(
            "pixel_shuffle({r}) needs channels divisible by {}, got {}",
            r * r,
            s.c
        )));
    }
    let out_shape = Shape::new(s.n, s.c / (r * r), s.h * r, s.w * r);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..out_shape.c {
            for dy in 0..r {
                for dx in 0..r {
                    let src = input.plane(n, c * r * r + dy * r + dx).to_vec();
                    let dst = out.plane_mut(n, c);
                    for y in 0..s.h {
                        for x in 0..s.w {
                            dst[(y * r + dy) * out_shape.w + x * r + dx] = src[y * s.w + x];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn concat(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| NnError::shape("concat of zero tensors".into()))?
        .shape();
    let mut channels = 0;
    for t in inputs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(NnError::shape(format!("concat of {first} with {s}")));
        }
        channels += s.c;
    }
    let out_shape = first.with_channels(channels);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for t in inputs {
            let per_batch = t.shape().c * first.plane();
            data.extend_from_slice(&t.data()[n * per_batch..(n + 1) * per_batch]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

fn zip_with(a: &Tensor, b: &Tensor, op: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(NnError::shape(format!(
            "{op} of {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "mul", |x, y| x * y)
}

pub fn slice_channels(input: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let s = input.shape();
    if start >= end || end > s.c {
        return Err(NnError::shape(format!(
            "channel slice {start}..{end} of {} channels",
            s.c
        )));
    }
    let out_shape = s.with_channels(end - start);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        for c in start..end {
            data.extend_from_slice(input.plane(n, c));
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Mean over `k×k` windows; trailing partial windows average what they cover.
pub fn avg_pool(input: &Tensor, k: usize) -> Result<Tensor> {
    let s = input.shape();
    if k == 0 {
        return Err(NnError::InvalidLayer("avg_pool window 0".into()));
    }
    let out_shape = Shape::new(s.n, s.c, s.h.div_ceil(k), s.w.div_ceil(k));
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for oy in 0..out_shape.h {
                let ys = oy * k..((oy + 1) * k).min(s.h);
                for ox in 0..out_shape.w {
                    let xs = ox * k..((ox + 1) * k).min(s.w);
                    let mut sum = 0.0f32;
                    for y in ys.clone() {
                        sum += src[y * s.w + xs.start..y * s.w + xs.end].iter().sum::<f32>();
                    }
                    dst[oy * out_shape.w + ox] = sum / (ys.len() * xs.len()) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour upsampling by `k`, cropped to `(h, w)`.
pub fn upsample_nearest(input: &Tensor, k: usize, h: usize, w: usize) -> Result<Tensor> {
    let s = input.shape();
    if k == 0 || s.h * k < h || s.w * k < w {
        return Err(NnError::shape(format!(
            "upsample_nearest({k}) of {}x{} cannot cover {h}x{w}",
            s.h, s.w
        )));
    }
    let out_shape = Shape::new(s.n, s.c, h, w);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = src[(y / k) * s.w + x / k];
                }
            }
        }
    }
    Ok(out)
}

/// Pads every plane by `pad` on each side with a per-channel constant.
pub fn pad_with_values(input: &Tensor, pad: usize, values: &[f32]) -> Result<Tensor> {
    let s = input.shape();
    if values.len() != s.c {
        return Err(NnError::shape(format!(
            "{} pad values for {} channels",
            values.len(),
            s.c
        )));
    }
    let out_shape = Shape::new(s.n, s.c, s.h + 2 * pad, s.w + 2 * pad);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for (c, &value) in values.iter().enumerate() {
            let src = input.plane(n, c).to_vec();
            let dst = out.plane_mut(n, c);
            dst.fill(value);
            for y in 0..s.h {
                let row = (y + pad) * out_shape.w + pad;
                dst[row..row + s.w].copy_from_slice(&src[y * s.w..(y + 1) * s.w]);
            }
        }
    }
    Ok(out)
}

/// Per-channel 3×3 stencil times a per-channel scale, zero padded.
pub fn depthwise3x3(input: &Tensor, stencil: &[[f32; 3]; 3], scale: &[f32]) -> Result<Tensor> {
    let s = input.shape();
    if scale.len() != s.c {
        return Err(NnError::shape(format!(
            "{} scales for {} channels",
            scale.len(),
            s.c
        )));
    }
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for (c, &sc) in scale.iter().enumerate() {
            let src = input.plane(n, c).to_vec();
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                for x in 0..s.w {
                    let mut acc = 0.0f32;
                    for (ky, krow) in stencil.iter().enumerate() {
                        let Some(iy) = (y + ky).checked_sub(1).filter(|&v| v < s.h) else {
                            continue;
                        };
                        for (kx, &kv) in krow.iter().enumerate() {
                            if let Some(ix) = (x + kx).checked_sub(1).filter(|&v| v < s.w) {
                                acc += kv * src[iy * s.w + ix];
                            }
                        }
                    }
                    dst[y * s.w + x] = sc * acc;
                }
            }
        }
    }
    Ok(out)
}
