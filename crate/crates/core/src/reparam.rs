//! Structural reparameterization of multi-branch conv blocks.
//!
//! A [`RepBlock`] sums several branches that all map `in_ch -> out_ch` at
//! stride 1. Every branch is linear in its input, so the block collapses into a
//! single 3×3 convolution ([`fuse_block`]) that produces the same output.
//!
//! The sequential `1×1 -> 3×3` branch pads its intermediate activation with the
//! 1×1 bias instead of zeros. That keeps the collapse exact on border pixels,
//! where the fused conv sees zero padding.

use thiserror::Error;

use crate::nn::ops::{self, ConvSpec};
use crate::nn::{visit_conv, visit_conv_mut, Form, WeightVisitor, WeightVisitorMut, ModelGraph, NnError, Op, Shape, Tensor};

#[derive(Debug, Error)]
pub enum ReparamError {
    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),
    #[error("invalid block: {0}")]
    InvalidBlock(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, ReparamError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    SobelX,
    SobelY,
    Laplacian,
}

impl Stencil {
    pub const ALL: [Stencil; 3] = [Stencil::SobelX, Stencil::SobelY, Stencil::Laplacian];

    pub fn kernel(self) -> [[f32; 3]; 3] {
        match self {
            Stencil::SobelX => [[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]],
            Stencil::SobelY => [[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]],
            Stencil::Laplacian => [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stencil::SobelX => "sobel_x",
            Stencil::SobelY => "sobel_y",
            Stencil::Laplacian => "laplacian",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Branch {
    Plain3x3(ConvSpec),
    Plain1x1(ConvSpec),
    /// `expand` is 1×1 `in -> mid`; `conv` is 3×3 `mid -> out` run without zero padding
    /// on the bias-padded intermediate.
    Seq1x1x3x3 { expand: ConvSpec, conv: ConvSpec },
    /// Depthwise fixed stencil times a learnable per-channel scale; no bias.
    ScaledFixed { stencil: Stencil, scale: Vec<f32> },
    Identity,
}

impl Branch {
    pub fn plain_3x3(in_ch: usize, out_ch: usize) -> Self {
        Branch::Plain3x3(ConvSpec::zeros(in_ch, out_ch, 3, 1))
    }

    pub fn plain_1x1(in_ch: usize, out_ch: usize) -> Self {
        Branch::Plain1x1(ConvSpec::zeros(in_ch, out_ch, 1, 1))
    }

    pub fn seq(in_ch: usize, mid: usize, out_ch: usize) -> Self {
        let mut conv = ConvSpec::zeros(mid, out_ch, 3, 1);
        conv.padding = 0;
        Branch::Seq1x1x3x3 {
            expand: ConvSpec::zeros(in_ch, mid, 1, 1),
            conv,
        }
    }

    pub fn scaled(stencil: Stencil, channels: usize) -> Self {
        Branch::ScaledFixed {
            stencil,
            scale: vec![0.0; channels],
        }
    }

    fn check(&self, in_ch: usize, out_ch: usize) -> Result<()> {
        let mismatch = |what: &str| {
            Err(ReparamError::ChannelMismatch(format!(
                "{what} branch does not map {in_ch} -> {out_ch}"
            )))
        };
        match self {
            Branch::Plain3x3(c) => {
                c.validate()?;
                if (c.in_ch, c.out_ch, c.kernel, c.stride, c.padding) != (in_ch, out_ch, 3, 1, 1) {
                    return mismatch("plain 3x3");
                }
            }
            Branch::Plain1x1(c) => {
                c.validate()?;
                if (c.in_ch, c.out_ch, c.kernel, c.stride, c.padding) != (in_ch, out_ch, 1, 1, 0) {
                    return mismatch("plain 1x1");
                }
            }
            Branch::Seq1x1x3x3 { expand, conv } => {
                expand.validate()?;
                conv.validate()?;
                if expand.out_ch != conv.in_ch {
                    return Err(ReparamError::ChannelMismatch(format!(
                        "1x1 stage emits {} channels, 3x3 stage takes {}",
                        expand.out_ch, conv.in_ch
                    )));
                }
                if expand.in_ch != in_ch || conv.out_ch != out_ch {
                    return mismatch("sequential");
                }
                if expand.kernel != 1 || conv.kernel != 3 || conv.padding != 0 {
                    return Err(ReparamError::InvalidBlock(
                        "sequential branch must be 1x1 then unpadded 3x3".into(),
                    ));
                }
                if expand.stride != 1 || conv.stride != 1 {
                    return Err(ReparamError::InvalidBlock("branches run at stride 1".into()));
                }
            }
            Branch::ScaledFixed { scale, .. } => {
                if in_ch != out_ch || scale.len() != out_ch {
                    return mismatch("scaled stencil");
                }
            }
            Branch::Identity => {
                if in_ch != out_ch {
                    return mismatch("identity");
                }
            }
        }
        Ok(())
    }

    fn forward(&self, x: &Tensor) -> crate::nn::Result<Tensor> {
        match self {
            Branch::Plain3x3(c) | Branch::Plain1x1(c) => ops::conv2d(x, c),
            Branch::Seq1x1x3x3 { expand, conv } => {
                let mid = ops::conv2d(x, expand)?;
                let padded = ops::pad_with_values(&mid, 1, &expand.bias)?;
                ops::conv2d(&padded, conv)
            }
            Branch::ScaledFixed { stencil, scale } => {
                ops::depthwise3x3(x, &stencil.kernel(), scale)
            }
            Branch::Identity => Ok(x.clone()),
        }
    }

    fn param_count(&self) -> u64 {
        match self {
            Branch::Plain3x3(c) | Branch::Plain1x1(c) => c.param_count(),
            Branch::Seq1x1x3x3 { expand, conv } => expand.param_count() + conv.param_count(),
            Branch::ScaledFixed { scale, .. } => scale.len() as u64,
            Branch::Identity => 0,
        }
    }

    fn macs(&self, out: Shape) -> u64 {
        match self {
            Branch::Plain3x3(c) | Branch::Plain1x1(c) => c.macs(out),
            Branch::Seq1x1x3x3 { expand, conv } => expand.macs(out) + conv.macs(out),
            Branch::ScaledFixed { scale, .. } => (scale.len() * 9 * out.h * out.w) as u64,
            Branch::Identity => 0,
        }
    }
}

/// Training-form multi-branch block. Output is the sum of all branch outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RepBlock {
    pub in_ch: usize,
    pub out_ch: usize,
    pub branches: Vec<Branch>,
}

impl RepBlock {
    pub fn new(in_ch: usize, out_ch: usize, branches: Vec<Branch>) -> Result<Self> {
        let block = Self {
            in_ch,
            out_ch,
            branches,
        };
        block.validate()?;
        Ok(block)
    }

    /// The full edge-oriented block: plain 3×3, 1×1 expansion to `mid` then 3×3,
    /// Sobel-x, Sobel-y, Laplacian and identity. Zero-initialised.
    pub fn ecb(channels: usize, mid: usize) -> Self {
        let mut branches = vec![
            Branch::plain_3x3(channels, channels),
            Branch::seq(channels, mid, channels),
        ];
        branches.extend(Stencil::ALL.map(|s| Branch::scaled(s, channels)));
        branches.push(Branch::Identity);
        Self {
            in_ch: channels,
            out_ch: channels,
            branches,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(ReparamError::InvalidBlock("block has no branches".into()));
        }
        self.branches
            .iter()
            .try_for_each(|b| b.check(self.in_ch, self.out_ch))
    }

    pub fn output_shape(&self, input: Shape) -> crate::nn::Result<Shape> {
        if input.c != self.in_ch {
            return Err(NnError::ShapeMismatch {
                node: String::new(),
                detail: format!("rep block expects {} channels, got {}", self.in_ch, input.c),
            });
        }
        Ok(input.with_channels(self.out_ch))
    }

    pub fn forward(&self, x: &Tensor) -> crate::nn::Result<Tensor> {
        self.output_shape(x.shape())?;
        let mut acc: Option<Tensor> = None;
        for branch in &self.branches {
            let y = branch.forward(x)?;
            acc = Some(match acc {
                None => y,
                Some(a) => ops::add(&a, &y)?,
            });
        }
        acc.ok_or_else(|| NnError::InvalidLayer("rep block has no branches".into()))
    }

    pub fn param_count(&self) -> u64 {
        self.branches.iter().map(Branch::param_count).sum()
    }

    pub fn macs(&self, out: Shape) -> u64 {
        self.branches.iter().map(|b| b.macs(out)).sum()
    }

    pub fn for_each_weight(&self, id: &str, f: &mut WeightVisitor) {
        for (i, branch) in self.branches.iter().enumerate() {
            match branch {
                Branch::Plain3x3(c) | Branch::Plain1x1(c) => visit_conv(&format!("{id}.{i}"), c, f),
                Branch::Seq1x1x3x3 { expand, conv } => {
                    visit_conv(&format!("{id}.{i}.expand"), expand, f);
                    visit_conv(&format!("{id}.{i}.conv"), conv, f);
                }
                Branch::ScaledFixed { scale, .. } => {
                    f(&format!("{id}.{i}.scale"), &[scale.len()], scale)
                }
                Branch::Identity => {}
            }
        }
    }

    pub fn for_each_weight_mut(&mut self, id: &str, f: &mut WeightVisitorMut) {
        for (i, branch) in self.branches.iter_mut().enumerate() {
            match branch {
                Branch::Plain3x3(c) | Branch::Plain1x1(c) => {
                    visit_conv_mut(&format!("{id}.{i}"), c, f)
                }
                Branch::Seq1x1x3x3 { expand, conv } => {
                    visit_conv_mut(&format!("{id}.{i}.expand"), expand, f);
                    visit_conv_mut(&format!("{id}.{i}.conv"), conv, f);
                }
                Branch::ScaledFixed { scale, .. } => {
                    let len = scale.len();
                    f(&format!("{id}.{i}.scale"), &[len], scale)
                }
                Branch::Identity => {}
            }
        }
    }
}

fn require_kernel(spec: &ConvSpec, kernel: usize, what: &str) -> Result<()> {
    spec.validate()?;
    if spec.kernel != kernel || spec.stride != 1 {
        return Err(ReparamError::InvalidBlock(format!(
            "{what} must be a stride-1 {kernel}x{kernel} conv"
        )));
    }
    Ok(())
}

/// Places a 1×1 kernel at the centre tap of a zero 3×3 kernel.
pub fn expand_1x1_to_3x3(spec: &ConvSpec) -> Result<ConvSpec> {
    require_kernel(spec, 1, "1x1 expansion input")?;
    let mut out = ConvSpec::zeros(spec.in_ch, spec.out_ch, 3, 1);
    for o in 0..spec.out_ch {
        for i in 0..spec.in_ch {
            out.weight[((o * spec.in_ch + i) * 3 + 1) * 3 + 1] = spec.w(o, i, 0, 0);
        }
    }
    out.bias.clone_from(&spec.bias);
    Ok(out)
}

/// Collapses `conv3x3(bias_pad(conv1x1(x)))` into one 3×3 conv.
pub fn fuse_seq_1x1_3x3(expand: &ConvSpec, conv: &ConvSpec) -> Result<ConvSpec> {
    require_kernel(expand, 1, "first stage")?;
    require_kernel(conv, 3, "second stage")?;
    if expand.out_ch != conv.in_ch {
        return Err(ReparamError::ChannelMismatch(format!(
            "1x1 stage emits {} channels, 3x3 stage takes {}",
            expand.out_ch, conv.in_ch
        )));
    }
    let (mid, inp, out_ch) = (expand.out_ch, expand.in_ch, conv.out_ch);
    let mut fused = ConvSpec::zeros(inp, out_ch, 3, 1);
    for o in 0..out_ch {
        let mut bias = f64::from(conv.bias[o]);
        for m in 0..mid {
            let b1 = f64::from(expand.bias[m]);
            for t in 0..9 {
                let k2 = conv.weight[(o * mid + m) * 9 + t];
                bias += f64::from(k2) * b1;
                for i in 0..inp {
                    fused.weight[(o * inp + i) * 9 + t] += k2 * expand.w(m, i, 0, 0);
                }
            }
        }
        fused.bias[o] = bias as f32;
    }
    Ok(fused)
}

/// Diagonal-channel 3×3 kernel `scale[o] * stencil` with zero bias.
pub fn fuse_scaled_fixed(scale: &[f32], stencil: Stencil) -> ConvSpec {
    let ch = scale.len();
    let k = stencil.kernel();
    let mut out = ConvSpec::zeros(ch, ch, 3, 1);
    for (o, &s) in scale.iter().enumerate() {
        for (ky, row) in k.iter().enumerate() {
            for (kx, &v) in row.iter().enumerate() {
                out.weight[((o * ch + o) * 3 + ky) * 3 + kx] = s * v;
            }
        }
    }
    out
}

/// Centre-tap delta per channel.
pub fn identity_3x3(channels: usize) -> ConvSpec {
    let mut out = ConvSpec::zeros(channels, channels, 3, 1);
    for c in 0..channels {
        out.weight[((c * channels + c) * 3 + 1) * 3 + 1] = 1.0;
    }
    out
}

fn branch_as_3x3(branch: &Branch, channels: usize) -> Result<ConvSpec> {
    match branch {
        Branch::Plain3x3(c) => {
            require_kernel(c, 3, "plain 3x3 branch")?;
            Ok(c.clone())
        }
        Branch::Plain1x1(c) => expand_1x1_to_3x3(c),
        Branch::Seq1x1x3x3 { expand, conv } => fuse_seq_1x1_3x3(expand, conv),
        Branch::ScaledFixed { stencil, scale } => Ok(fuse_scaled_fixed(scale, *stencil)),
        Branch::Identity => Ok(identity_3x3(channels)),
    }
}

/// Collapses a block into one "same"-padded 3×3 conv.
pub fn fuse_block(block: &RepBlock) -> Result<ConvSpec> {
    block.validate()?;
    let mut fused = ConvSpec::zeros(block.in_ch, block.out_ch, 3, 1);
    for branch in &block.branches {
        let k = branch_as_3x3(branch, block.out_ch)?;
        for (acc, v) in fused.weight.iter_mut().zip(&k.weight) {
            *acc += v;
        }
        for (acc, v) in fused.bias.iter_mut().zip(&k.bias) {
            *acc += v;
        }
    }
    Ok(fused)
}

/// Replaces every RepBlock node by its fused conv and marks the graph fused.
pub fn fuse_graph(graph: &ModelGraph) -> Result<ModelGraph> {
    let mut out = graph.clone();
    for node in &mut out.nodes {
        if let Op::RepBlock(block) = &node.op {
            node.op = Op::Conv(fuse_block(block)?);
        }
    }
    out.form = Form::Fused;
    Ok(out)
}

/// Fused-vs-branch tolerance on bounded inputs.
pub const FUSION_TOLERANCE: f32 = 1e-4;

/// Max |fused - training| over all outputs for one seeded probe in [0, 1).
pub fn fusion_divergence(
    training: &ModelGraph,
    fused: &ModelGraph,
    inputs: &std::collections::HashMap<String, Shape>,
    seed: u64,
) -> Result<f32> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut names: Vec<&String> = inputs.keys().collect();
    names.sort();
    let probe = names
        .into_iter()
        .map(|n| (n.clone(), Tensor::from_fn(inputs[n], |_, _, _, _| rng.gen::<f32>())))
        .collect();
    let a = training.run(&probe)?;
    let b = fused.run(&probe)?;
    let mut worst = 0.0f32;
    for (name, t) in &a {
        let other = b
            .get(name)
            .ok_or_else(|| ReparamError::InvalidBlock(format!("fused graph lacks output `{name}`")))?;
        let d = t
            .max_abs_diff(other)
            .ok_or_else(|| ReparamError::InvalidBlock(format!("output `{name}` changed shape")))?;
        worst = worst.max(d);
    }
    Ok(worst)
}
