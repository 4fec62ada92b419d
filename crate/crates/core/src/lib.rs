//! Desk-scale toolkit for efficient video super-resolution experiments.
//!
//! * [`frame_io`] reads and writes 8-bit 4:2:0 Y4M and raw planar video.
//! * [`resample`] provides the Lanczos, bicubic and nearest scalers.
//! * [`nn`] is a small CPU inference engine with params/MACs accounting.
//! * [`reparam`] fuses multi-branch training blocks into single convolutions.
//! * [`zoo`] builds the challenge networks and drives clip upscaling.
//! * [`quality`] holds PSNR/SSIM/MS-SSIM and the loss evaluators.
//! * [`bench`] runs downscale → encode → upscale → score sweeps.

pub mod bench;
pub mod frame_io;
pub mod nn;
pub mod quality;
pub mod reparam;
pub mod resample;
pub mod zoo;

/// Per-frame MACs budget for every challenge entry.
pub const MACS_BUDGET: u64 = 250_000_000_000;
