//! Graph builders. Widths and depths the source descriptions leave open are
//! calibrated against the published params/MACs targets; every such constant
//! lives in a config struct so it can be overridden.

use crate::nn::{Form, GlobalGate, GraphBuilder, ModelGraph, Op};
use crate::reparam::RepBlock;

pub const LR_INPUT: &str = "lr";
pub const OUTPUT: &str = "out";

fn conv_relu(b: &mut GraphBuilder, id: &str, input: &str, cin: usize, cout: usize) -> String {
    let c = b.conv(id, input, cin, cout, 3, 1);
    b.relu(format!("{id}.act"), &c)
}

/// RepBlock stream at reduced (×3) or full (×4) LR resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperBicubicConfig {
    pub scale: usize,
    pub channels: usize,
    /// Width of the training-time 1×1 expansion inside each RepBlock.
    pub expand: usize,
    pub blocks: usize,
    pub head_stride: usize,
}

impl SuperBicubicConfig {
    pub fn for_scale(scale: usize) -> Self {
        if scale == 3 {
            Self {
                scale,
                channels: 32,
                expand: 64,
                blocks: 2,
                head_stride: 2,
            }
        } else {
            Self {
                scale,
                channels: 64,
                expand: 128,
                blocks: 10,
                head_stride: 1,
            }
        }
    }
}

pub fn build_superbicubicpp(cfg: &SuperBicubicConfig, form: Form) -> ModelGraph {
    let name = format!("superbicubicpp_x{}", cfg.scale);
    let mut b = GraphBuilder::new(&name, Form::Training);
    let x = b.input(LR_INPUT, 3);
    let head = b.conv("head", &x, 3, cfg.channels, 3, cfg.head_stride);
    let mut cur = b.relu("head.act", &head);
    for i in 0..cfg.blocks {
        let id = format!("body.{i}");
        let blk = b.push(
            &id,
            Op::RepBlock(RepBlock::ecb(cfg.channels, cfg.expand)),
            &[&cur],
        );
        cur = b.relu(format!("{id}.act"), &blk);
    }
    let r = cfg.scale * cfg.head_stride;
    let tail = b.conv("tail", &cur, cfg.channels, 3 * r * r, 3, 1);
    let out = b.push(OUTPUT, Op::PixelShuffle(r), &[&tail]);
    b.output(&out);
    let graph = b.finish();
    match form {
        Form::Training => graph,
        Form::Fused => crate::reparam::fuse_graph(&graph).expect("ECB blocks always fuse"),
    }
}

/// Unshuffled front end, residual body, two-step shuffle producing a Y residual.
#[derive(Debug, Clone, PartialEq)]
pub struct BviConfig {
    pub scale: usize,
    pub channels: usize,
    pub blocks: usize,
    pub unshuffle: usize,
}

impl BviConfig {
    pub fn for_scale(scale: usize) -> Self {
        Self {
            scale,
            channels: 24,
            blocks: 3,
            unshuffle: 2,
        }
    }
}

pub fn build_bvi_rtvsr(cfg: &BviConfig) -> ModelGraph {
    let c = cfg.channels;
    let r = cfg.unshuffle;
    let mut b = GraphBuilder::new(format!("bvi_rtvsr_x{}", cfg.scale), Form::Fused);
    let x = b.input(LR_INPUT, 3);
    let u = b.push("unshuffle", Op::PixelUnshuffle(r), &[&x]);
    let head = b.conv("head", &u, 3 * r * r, c, 3, 1);
    let mut cur = head.clone();
    for i in 0..cfg.blocks {
        let c1 = b.conv(format!("body.{}", 2 * i), &cur, c, c, 3, 1);
        let c2 = b.conv(format!("body.{}", 2 * i + 1), &c1, c, c, 3, 1);
        let act = b.relu(format!("block.{i}.act"), &c2);
        cur = b.add(format!("block.{i}.skip"), &cur, &act);
    }
    let end = b.conv("body_end", &cur, c, c, 3, 1);
    let skip = b.add("global_skip", &end, &head);
    let up1 = b.conv("up.0", &skip, c, c * r * r, 3, 1);
    let sh1 = b.push("up.0.shuffle", Op::PixelShuffle(r), &[&up1]);
    let s = cfg.scale;
    let up2 = b.conv("up.1", &sh1, c, s * s, 3, 1);
    let out = b.push(OUTPUT, Op::PixelShuffle(s), &[&up2]);
    b.output(&out);
    b.finish()
}

/// Recurrent cell: warped texture state and motion state enter with the frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FsmdConfig {
    pub scale: usize,
    pub channels: usize,
    pub extract_blocks: usize,
    pub recon_blocks: usize,
}

impl FsmdConfig {
    pub fn for_scale(scale: usize) -> Self {
        Self {
            scale,
            channels: 77,
            extract_blocks: if scale == 3 { 3 } else { 2 },
            recon_blocks: 10,
        }
    }
}

pub const FSMD_WARPED_H1: &str = "warped_h1";
pub const FSMD_H0: &str = "h0";
pub const FSMD_RESIDUAL: &str = "residual";
pub const FSMD_MOTION_DELTA: &str = "motion_delta";
pub const FSMD_H0_NEXT: &str = "h0_next";
pub const FSMD_H1_NEXT: &str = "h1_next";

fn res_block(b: &mut GraphBuilder, prefix: &str, input: &str, c: usize) -> String {
    let a = conv_relu(b, &format!("{prefix}.conv1"), input, c, c);
    let d = b.conv(format!("{prefix}.conv2"), &a, c, c, 3, 1);
    b.add(format!("{prefix}.skip"), input, &d)
}

pub fn build_fsmd(cfg: &FsmdConfig) -> ModelGraph {
    let c = cfg.channels;
    let mut b = GraphBuilder::new(format!("fsmd_x{}", cfg.scale), Form::Fused);
    let x = b.input(LR_INPUT, 3);
    let h1 = b.input(FSMD_WARPED_H1, c);
    let h0 = b.input(FSMD_H0, c);
    let u = b.push("unshuffle", Op::PixelUnshuffle(2), &[&x]);
    let cat = b.push("concat", Op::Concat, &[&u, &h1, &h0]);
    let mut cur = conv_relu(&mut b, "fuse", &cat, 12 + 2 * c, c);
    for i in 0..cfg.extract_blocks {
        cur = res_block(&mut b, &format!("extract.{i}"), &cur, c);
    }
    let motion = b.conv(FSMD_MOTION_DELTA, &cur, c, 2, 3, 1);
    let h0_conv = b.conv("h0_update", &cur, c, c, 3, 1);
    let h0_next = b.relu(FSMD_H0_NEXT, &h0_conv);
    for i in 0..cfg.recon_blocks {
        cur = res_block(&mut b, &format!("recon.{i}"), &cur, c);
    }
    let h1_next = b.push(FSMD_H1_NEXT, Op::Relu, &[&cur]);
    let r = 2 * cfg.scale;
    let tail = b.conv("tail", &h1_next, c, 3 * r * r, 3, 1);
    let res = b.push(FSMD_RESIDUAL, Op::PixelShuffle(r), &[&tail]);
    for o in [&res, &motion, &h0_next, &h1_next] {
        b.output(o);
    }
    b.finish()
}

/// Two parallel 36-channel streams over a shared front conv, summed before the tail.
#[derive(Debug, Clone, PartialEq)]
pub struct EtdsConfig {
    pub scale: usize,
    pub channels: usize,
    pub blocks: usize,
    pub residual_branch: bool,
}

impl Default for EtdsConfig {
    fn default() -> Self {
        Self {
            scale: 3,
            channels: 36,
            blocks: 3,
            residual_branch: true,
        }
    }
}

fn etds_stream(b: &mut GraphBuilder, name: &str, input: &str, c: usize, blocks: usize) -> String {
    let mut cur = input.to_string();
    for i in 0..2 * blocks {
        cur = conv_relu(b, &format!("{name}.{i}"), &cur, c, c);
    }
    cur
}

pub fn build_etdsv2(cfg: &EtdsConfig) -> ModelGraph {
    let c = cfg.channels;
    let mut b = GraphBuilder::new("etdsv2", Form::Fused);
    let x = b.input(LR_INPUT, 3);
    let front = conv_relu(&mut b, "front", &x, 3, c);
    let mut merged = etds_stream(&mut b, "backbone", &front, c, cfg.blocks);
    if cfg.residual_branch {
        let res = etds_stream(&mut b, "residual", &front, c, cfg.blocks);
        merged = b.add("merge", &merged, &res);
    }
    let s = cfg.scale;
    let tail = b.conv("tail", &merged, c, 3 * s * s, 3, 1);
    let out = b.push(OUTPUT, Op::PixelShuffle(s), &[&tail]);
    b.output(&out);
    b.finish()
}

/// Single-scale modulation block plus convolutional channel mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct SafmConfig {
    pub scale: usize,
    pub channels: usize,
    pub pool: usize,
    pub attn_hidden: usize,
    pub gate_hidden: usize,
    pub ccm_expand: usize,
}

impl Default for SafmConfig {
    fn default() -> Self {
        Self {
            scale: 4,
            channels: 20,
            pool: 4,
            attn_hidden: 120,
            gate_hidden: 4,
            ccm_expand: 40,
        }
    }
}

pub fn build_safm_lite(cfg: &SafmConfig) -> ModelGraph {
    let c = cfg.channels;
    let half = c / 2;
    let mut b = GraphBuilder::new(format!("safm_lite_x{}", cfg.scale), Form::Fused);
    let x = b.input(LR_INPUT, 3);
    let head = b.conv("head", &x, 3, c, 3, 1);
    let keep = b.push("split.a", Op::Slice { start: 0, end: half }, &[&head]);
    let modb = b.push("split.b", Op::Slice { start: half, end: c }, &[&head]);

    let pooled = b.push("attn.pool", Op::AvgPool(cfg.pool), &[&modb]);
    let a1 = conv_relu(&mut b, "attn.conv1", &pooled, half, cfg.attn_hidden);
    let a2 = b.conv("attn.conv2", &a1, cfg.attn_hidden, half, 3, 1);
    let up = b.push("attn.up", Op::UpsampleNearest(cfg.pool), &[&a2, &modb]);
    let gated = b.push(
        "attn.gate",
        Op::GlobalBranch(GlobalGate::zeros(half, cfg.gate_hidden)),
        &[&modb],
    );
    let modulated = b.push("attn.mul", Op::Mul, &[&up, &gated]);
    let cat = b.push("attn.concat", Op::Concat, &[&keep, &modulated]);
    let fused = b.conv("attn.fuse", &cat, c, c, 1, 1);
    let safm = b.add("attn.skip", &fused, &head);

    let e = conv_relu(&mut b, "ccm.expand", &safm, c, cfg.ccm_expand);
    let p = b.conv("ccm.project", &e, cfg.ccm_expand, c, 1, 1);
    let ccm = b.add("ccm.skip", &p, &safm);

    let s = cfg.scale;
    let tail = b.conv("tail", &ccm, c, 3 * s * s, 3, 1);
    let out = b.push(OUTPUT, Op::PixelShuffle(s), &[&tail]);
    b.output(&out);
    b.finish()
}
