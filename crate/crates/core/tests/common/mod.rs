//! Independent reference implementations and fixtures shared by the test targets.
#![allow(dead_code)]

use evsr::frame_io::Frame420;
use evsr::nn::{ConvSpec, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Frame420 {
    let (cw, ch) = (w.div_ceil(2), h.div_ceil(2));
    Frame420::new(
        w,
        h,
        (0..w * h).map(|_| rng.gen()).collect(),
        (0..cw * ch).map(|_| rng.gen()).collect(),
        (0..cw * ch).map(|_| rng.gen()).collect(),
    )
    .unwrap()
}

/// Moving gradient with mild noise; frames differ so order matters to recurrent models.
pub fn synthetic_clip(frames: usize, w: usize, h: usize, seed: u64) -> Vec<Frame420> {
    let mut rng = rng(seed);
    (0..frames)
        .map(|t| {
            let (cw, ch) = (w.div_ceil(2), h.div_ceil(2));
            let y = (0..w * h)
                .map(|i| ((i % w) * 3 + (i / w) * 2 + t * 11 + rng.gen_range(0..20)) as u8)
                .collect();
            let cb = (0..cw * ch).map(|_| rng.gen_range(90..160)).collect();
            let cr = (0..cw * ch).map(|_| rng.gen_range(90..160)).collect();
            Frame420::new(w, h, y, cb, cr).unwrap()
        })
        .collect()
}

pub fn with_luma(f: &Frame420, y: Vec<u8>) -> Frame420 {
    Frame420::new(f.width(), f.height(), y, f.cb().to_vec(), f.cr().to_vec()).unwrap()
}

/// Diagonal linear ramp over the full 8-bit range.
pub fn ramp_frame(w: usize, h: usize) -> Frame420 {
    let y = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            (16.0 + 200.0 * (x + y) / (w + h) as f64).round() as u8
        })
        .collect();
    let (cw, ch) = (w.div_ceil(2), h.div_ceil(2));
    Frame420::new(w, h, y, vec![128; cw * ch], vec![128; cw * ch]).unwrap()
}

/// Six nested loops, zero padding, no shortcuts.
pub fn naive_conv2d(x: &Tensor, spec: &ConvSpec) -> Tensor {
    let s = x.shape();
    let (k, st, p) = (spec.kernel, spec.stride, spec.padding);
    let oh = (s.h + 2 * p - k) / st + 1;
    let ow = (s.w + 2 * p - k) / st + 1;
    let mut out = Tensor::zeros(Shape::new(s.n, spec.out_ch, oh, ow));
    for n in 0..s.n {
        for o in 0..spec.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = f64::from(spec.bias[o]);
                    for i in 0..spec.in_ch {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * st + ky) as isize - p as isize;
                                let ix = (ox * st + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let wv = spec.weight[((o * spec.in_ch + i) * k + ky) * k + kx];
                                acc += f64::from(wv) * f64::from(x.at(n, i, iy as usize, ix as usize));
                            }
                        }
                    }
                    let idx = out.index(n, o, oy, ox);
                    out.data_mut()[idx] = acc as f32;
                }
            }
        }
    }
    out
}

pub fn random_conv(rng: &mut ChaCha8Rng, max_ch: usize) -> ConvSpec {
    let in_ch = rng.gen_range(1..=max_ch);
    let out_ch = rng.gen_range(1..=max_ch);
    let kernel = if rng.gen_bool(0.7) { 3 } else { 1 };
    let stride = if rng.gen_bool(0.3) { 2 } else { 1 };
    let padding = if kernel == 3 { rng.gen_range(0..=1) } else { 0 };
    let n = out_ch * in_ch * kernel * kernel;
    ConvSpec::new(
        in_ch,
        out_ch,
        kernel,
        stride,
        padding,
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        (0..out_ch).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, amp: f32) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-amp..amp))
}

/// Textbook SSIM: full 2-D Gaussian window evaluated at every valid position.
pub fn ssim_oracle(a: &[u8], b: &[u8], w: usize, h: usize) -> f64 {
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wv = win[i][j] / total;
                    ma += wv * f64::from(a[(y0 + i) * w + x0 + j]);
                    mb += wv * f64::from(b[(y0 + i) * w + x0 + j]);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wv = win[i][j] / total;
                    let da = f64::from(a[(y0 + i) * w + x0 + j]) - ma;
                    let db = f64::from(b[(y0 + i) * w + x0 + j]) - mb;
                    va += wv * da * da;
                    vb += wv * db * db;
                    cov += wv * da * db;
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

/// Random 32×32 pair with correlated noise of random strength.
pub fn ssim_pair(rng: &mut ChaCha8Rng) -> (Frame420, Frame420) {
    let a = random_frame(rng, 32, 32);
    let noise: i16 = rng.gen_range(5..80);
    let y = a
        .y()
        .iter()
        .map(|&v| (i16::from(v) + rng.gen_range(-noise..=noise)).clamp(0, 255) as u8)
        .collect();
    let b = with_luma(&a, y);
    (a, b)
}

/// Direct O(N²) DFT of every channel, then the mean (re, im) L1.
pub fn fft_l1_oracle(p: &Tensor, t: &Tensor) -> f64 {
    let s = p.shape();
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            for u in 0..s.h {
                for v in 0..s.w {
                    let (mut re, mut im) = (0.0, 0.0);
                    for y in 0..s.h {
                        for x in 0..s.w {
                            let d = f64::from(p.at(n, c, y, x)) - f64::from(t.at(n, c, y, x));
                            let ang = -2.0
                                * std::f64::consts::PI
                                * ((u * y) as f64 / s.h as f64 + (v * x) as f64 / s.w as f64);
                            re += d * ang.cos();
                            im += d * ang.sin();
                        }
                    }
                    total += re.abs() + im.abs();
                }
            }
        }
    }
    total / (2 * s.numel()) as f64
}

/// Nearest-neighbour resize written from the mapping formula alone.
pub fn nearest_oracle(src: &[f32], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f32> {
    let mut out = Vec::new();
    for dy in 0..oh {
        for dx in 0..ow {
            let sy = (((dy as f64 + 0.5) * h as f64 / oh as f64).floor() as usize).min(h - 1);
            let sx = (((dx as f64 + 0.5) * w as f64 / ow as f64).floor() as usize).min(w - 1);
            out.push(src[sy * w + sx]);
        }
    }
    out
}
