//! The challenge architectures and a clip-level upscaling driver.

mod arch;
mod fsmd;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

pub use arch::{
    build_bvi_rtvsr, build_etdsv2, build_fsmd, build_safm_lite, build_superbicubicpp, BviConfig,
    EtdsConfig, FsmdConfig, SafmConfig, SuperBicubicConfig, FSMD_H0, FSMD_H0_NEXT, FSMD_H1_NEXT,
    FSMD_MOTION_DELTA, FSMD_RESIDUAL, FSMD_WARPED_H1, LR_INPUT, OUTPUT,
};
pub use fsmd::{bicubic_base, fsmd_init_state, fsmd_step, warp, RecurrentState};

use crate::frame_io::{chroma_dim, Frame420};
use crate::nn::{Form, ModelGraph, NnError, Shape, WeightSet};
use crate::resample::{chroma_to_444, quantize, resample_plane, tensor444_to_frame, FilterSpec, Plane};
use crate::MACS_BUDGET;

#[derive(Debug, Error)]
pub enum ZooError {
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("weights do not match the model: missing {missing:?}, unexpected {extra:?}")]
    WeightMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("frame {width}x{height} is not divisible by {divisor}")]
    GeometryNotDivisible {
        width: usize,
        height: usize,
        divisor: usize,
    },
    #[error("frame geometry changed mid-clip: expected {expected:?}, got {got:?}")]
    GeometryChangedMidClip {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error(transparent)]
    Nn(NnError),
}

impl From<NnError> for ZooError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::WeightMismatch { missing, extra } => ZooError::WeightMismatch { missing, extra },
            other => ZooError::Nn(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, ZooError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelId {
    SuperBicubicPpX3,
    SuperBicubicPpX4,
    BviRtvsrX3,
    BviRtvsrX4,
    FsmdX3,
    FsmdX4,
    Etdsv2,
    SafmLiteX4,
}

impl ModelId {
    pub const ALL: [ModelId; 8] = [
        ModelId::SuperBicubicPpX3,
        ModelId::SuperBicubicPpX4,
        ModelId::BviRtvsrX3,
        ModelId::BviRtvsrX4,
        ModelId::FsmdX3,
        ModelId::FsmdX4,
        ModelId::Etdsv2,
        ModelId::SafmLiteX4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelId::SuperBicubicPpX3 => "superbicubicpp_x3",
            ModelId::SuperBicubicPpX4 => "superbicubicpp_x4",
            ModelId::BviRtvsrX3 => "bvi_rtvsr_x3",
            ModelId::BviRtvsrX4 => "bvi_rtvsr_x4",
            ModelId::FsmdX3 => "fsmd_x3",
            ModelId::FsmdX4 => "fsmd_x4",
            ModelId::Etdsv2 => "etdsv2",
            ModelId::SafmLiteX4 => "safm_lite_x4",
        }
    }

    pub fn scale(self) -> usize {
        match self {
            ModelId::SuperBicubicPpX3 | ModelId::BviRtvsrX3 | ModelId::FsmdX3 | ModelId::Etdsv2 => 3,
            _ => 4,
        }
    }

    /// LR input geometry of the model's track: 360p for ×3, 540p for ×4.
    pub fn track_resolution(self) -> (usize, usize) {
        if self.scale() == 3 {
            (640, 360)
        } else {
            (960, 540)
        }
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, ModelId::FsmdX3 | ModelId::FsmdX4)
    }

    /// LR width and height must be multiples of this.
    pub fn divisor(self) -> usize {
        match self {
            ModelId::SuperBicubicPpX3 | ModelId::BviRtvsrX3 | ModelId::BviRtvsrX4 => 2,
            ModelId::FsmdX3 | ModelId::FsmdX4 => 2,
            _ => 1,
        }
    }

    /// Hidden width of the recurrent state, if any.
    pub fn state_channels(self) -> Option<usize> {
        self.is_recurrent()
            .then(|| FsmdConfig::for_scale(self.scale()).channels)
    }

    /// Inference graph with default (calibrated) hyper-parameters.
    pub fn build(self, form: Form) -> ModelGraph {
        let s = self.scale();
        match self {
            ModelId::SuperBicubicPpX3 | ModelId::SuperBicubicPpX4 => {
                build_superbicubicpp(&SuperBicubicConfig::for_scale(s), form)
            }
            ModelId::BviRtvsrX3 | ModelId::BviRtvsrX4 => build_bvi_rtvsr(&BviConfig::for_scale(s)),
            ModelId::FsmdX3 | ModelId::FsmdX4 => build_fsmd(&FsmdConfig::for_scale(s)),
            ModelId::Etdsv2 => build_etdsv2(&EtdsConfig::default()),
            ModelId::SafmLiteX4 => build_safm_lite(&SafmConfig::default()),
        }
    }

    /// Graph input shapes for a `width`×`height` LR frame.
    pub fn input_shapes(self, width: usize, height: usize) -> HashMap<String, Shape> {
        let mut shapes = HashMap::from([(LR_INPUT.to_string(), Shape::new(1, 3, height, width))]);
        if let Some(c) = self.state_channels() {
            let state = Shape::new(1, c, height / 2, width / 2);
            shapes.insert(FSMD_WARPED_H1.to_string(), state);
            shapes.insert(FSMD_H0.to_string(), state);
        }
        shapes
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelId {
    type Err = ZooError;

    fn from_str(s: &str) -> Result<Self> {
        ModelId::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ZooError::UnknownModel(s.to_string()))
    }
}

/// Size and cost of a model at one input resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Complexity {
    pub params: u64,
    pub macs_per_frame: u64,
    /// MACs per HR output pixel.
    pub macs_per_pixel: f64,
    pub within_budget: bool,
}

pub fn analyze(id: ModelId, width: usize, height: usize) -> Result<Complexity> {
    let graph = id.build(Form::Fused);
    let macs = graph.count_macs(&id.input_shapes(width, height))?;
    let s = id.scale();
    Ok(Complexity {
        params: graph.count_params(),
        macs_per_frame: macs,
        macs_per_pixel: macs as f64 / (width * s * height * s) as f64,
        within_budget: macs <= MACS_BUDGET,
    })
}

/// Seed used when no weight file is supplied.
pub const DEFAULT_INIT_SEED: u64 = 0x5EED;

/// A model in inference form, ready to drive clips.
#[derive(Debug, Clone)]
pub struct Upscaler {
    id: ModelId,
    graph: ModelGraph,
}

impl Upscaler {
    /// Loads `weights` into the fused graph, or random-initialises it when absent.
    pub fn new(id: ModelId, weights: Option<&WeightSet>) -> Result<Self> {
        let mut graph = id.build(Form::Fused);
        match weights {
            Some(w) => graph.load_weights(w)?,
            None => graph.init_random(DEFAULT_INIT_SEED),
        }
        Ok(Self { id, graph })
    }

    /// Wraps an already-populated fused graph.
    pub fn from_graph(id: ModelId, graph: ModelGraph) -> Self {
        Self { id, graph }
    }

    pub fn id(&self) -> ModelId {
        self.id
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut ModelGraph {
        &mut self.graph
    }

    fn check_geometry(&self, frame: &Frame420) -> Result<()> {
        let d = self.id.divisor();
        let (w, h) = (frame.width(), frame.height());
        if w % d != 0 || h % d != 0 {
            return Err(ZooError::GeometryNotDivisible {
                width: w,
                height: h,
                divisor: d,
            });
        }
        Ok(())
    }

    fn upscale_stateless(&self, frame: &Frame420) -> Result<Frame420> {
        self.check_geometry(frame)?;
        let out = self.graph.run_single(chroma_to_444(frame))?;
        match self.id {
            ModelId::BviRtvsrX3 | ModelId::BviRtvsrX4 => Ok(compose_y_residual(frame, out.plane(0, 0), self.id.scale())),
            _ => Ok(tensor444_to_frame(&out)),
        }
    }

    /// Upscales a whole clip: frame-parallel for stateless models, sequential for the recurrent one.
    pub fn upscale_clip(&self, frames: &[Frame420]) -> Result<Vec<Frame420>> {
        if !self.id.is_recurrent() {
            return frames.par_iter().map(|f| self.upscale_stateless(f)).collect();
        }
        let Some(first) = frames.first() else {
            return Ok(Vec::new());
        };
        self.check_geometry(first)?;
        let channels = self.id.state_channels().expect("recurrent model");
        let mut state = fsmd_init_state(first.width(), first.height(), channels)?;
        let mut out = Vec::with_capacity(frames.len());
        for frame in frames {
            let (hr, next) = fsmd_step(&self.graph, self.id.scale(), &chroma_to_444(frame), &state)?;
            out.push(tensor444_to_frame(&hr));
            state = next;
        }
        Ok(out)
    }
}

/// HR frame from a CNN luma residual over bicubic luma, with bicubic chroma.
fn compose_y_residual(lr: &Frame420, residual: &[f32], scale: usize) -> Frame420 {
    let (w, h) = (lr.width() * scale, lr.height() * scale);
    let base = resample_plane(
        &Plane::from_u8(lr.width(), lr.height(), lr.y()),
        w,
        h,
        FilterSpec::Bicubic,
    )
    .expect("non-empty plane");
    let y: Vec<u8> = base
        .data
        .iter()
        .zip(residual)
        .map(|(&b, &r)| quantize(b + r * 255.0))
        .collect();
    let (cw, ch) = (chroma_dim(w), chroma_dim(h));
    let chroma = |p: &[u8]| {
        resample_plane(
            &Plane::from_u8(lr.chroma_width(), lr.chroma_height(), p),
            cw,
            ch,
            FilterSpec::Bicubic,
        )
        .expect("non-empty plane")
        .to_u8()
    };
    Frame420::new(w, h, y, chroma(lr.cb()), chroma(lr.cr())).expect("plane sizes follow the 4:2:0 layout")
}

/// Convenience wrapper over [`Upscaler`].
pub fn upscale_clip(id: ModelId, weights: Option<&WeightSet>, frames: &[Frame420]) -> Result<Vec<Frame420>> {
    Upscaler::new(id, weights)?.upscale_clip(frames)
}
