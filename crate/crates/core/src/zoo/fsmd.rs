//! Recurrent step: the graph sees the frame, the motion-warped texture state
//! and the motion-refinement state; warping and the bicubic base live here.

use std::collections::HashMap;

use super::arch::{
    FSMD_H0, FSMD_H0_NEXT, FSMD_H1_NEXT, FSMD_MOTION_DELTA, FSMD_RESIDUAL, FSMD_WARPED_H1, LR_INPUT,
};
use super::{Result, ZooError};
use crate::nn::{ops, ModelGraph, Shape, Tensor};
use crate::resample::{resample_plane, FilterSpec, Plane};

/// Motion field `M` (channel 0 = dx, 1 = dy, working-resolution pixels per
/// frame) and the two hidden states carried between frames.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub motion: Tensor,
    pub h0: Tensor,
    pub h1: Tensor,
}

impl RecurrentState {
    /// Working geometry `(width, height)`.
    pub fn geometry(&self) -> (usize, usize) {
        let s = self.motion.shape();
        (s.w, s.h)
    }

    pub fn is_zero(&self) -> bool {
        [&self.motion, &self.h0, &self.h1]
            .iter()
            .all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}

/// Zero state for an LR clip of `width`×`height` (working resolution is half that).
pub fn fsmd_init_state(width: usize, height: usize, channels: usize) -> Result<RecurrentState> {
    if !width.is_multiple_of(2) || !height.is_multiple_of(2) || width == 0 || height == 0 {
        return Err(ZooError::GeometryNotDivisible {
            width,
            height,
            divisor: 2,
        });
    }
    let (w, h) = (width / 2, height / 2);
    Ok(RecurrentState {
        motion: Tensor::zeros(Shape::new(1, 2, h, w)),
        h0: Tensor::zeros(Shape::new(1, channels, h, w)),
        h1: Tensor::zeros(Shape::new(1, channels, h, w)),
    })
}

/// Bilinear backward warp: `out(x, y) = src(x + dx, y + dy)`, border clamped.
pub fn warp(src: &Tensor, motion: &Tensor) -> Tensor {
    let s = src.shape();
    let m = motion.shape();
    assert_eq!((m.c, m.h, m.w), (2, s.h, s.w), "motion field geometry");
    let (w, h) = (s.w, s.h);
    let (dx, dy) = (motion.plane(0, 0), motion.plane(0, 1));
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = src.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let sx = (x as f32 + dx[i]).clamp(0.0, (w - 1) as f32);
                    let sy = (y as f32 + dy[i]).clamp(0.0, (h - 1) as f32);
                    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
                    if fx == 0.0 && fy == 0.0 {
                        dst[i] = plane[y0 * w + x0];
                        continue;
                    }
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    dst[i] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    out
}

/// Per-channel bicubic upscaling of a `(1, C, H, W)` tensor.
pub fn bicubic_base(frame: &Tensor, scale: usize) -> Tensor {
    let s = frame.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, s.h * scale, s.w * scale));
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = Plane::new(s.w, s.h, frame.plane(n, c).to_vec());
            let up = resample_plane(&plane, s.w * scale, s.h * scale, FilterSpec::Bicubic)
                .expect("non-empty plane");
            out.plane_mut(n, c).copy_from_slice(&up.data);
        }
    }
    out
}

/// One recurrent step on a `(1, 3, H, W)` frame in `[0, 1]`.
pub fn fsmd_step(
    graph: &ModelGraph,
    scale: usize,
    frame: &Tensor,
    state: &RecurrentState,
) -> Result<(Tensor, RecurrentState)> {
    let fs = frame.shape();
    let (sw, sh) = state.geometry();
    if fs.w != 2 * sw || fs.h != 2 * sh {
        return Err(ZooError::GeometryChangedMidClip {
            expected: (2 * sw, 2 * sh),
            got: (fs.w, fs.h),
        });
    }
    let inputs = HashMap::from([
        (LR_INPUT.to_string(), frame.clone()),
        (FSMD_WARPED_H1.to_string(), warp(&state.h1, &state.motion)),
        (FSMD_H0.to_string(), state.h0.clone()),
    ]);
    let mut outs = graph.run(&inputs)?;
    let mut take = |k: &str| outs.remove(k).expect("declared output");
    let residual = take(FSMD_RESIDUAL);
    let next = RecurrentState {
        motion: ops::add(&state.motion, &take(FSMD_MOTION_DELTA))?,
        h0: take(FSMD_H0_NEXT),
        h1: take(FSMD_H1_NEXT),
    };
    let hr = ops::add(&bicubic_base(frame, scale), &residual)?;
    Ok((hr, next))
}
