use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use evsr::bench::{crf_sweep, emit_report, ReportFormat, SweepConfig};
use evsr::frame_io::{self, ClipHeader, Frame420};
use evsr::nn::{Form, WeightSet};
use evsr::quality::{metrics_json, score_clip};
use evsr::reparam::{fuse_graph, fusion_divergence, FUSION_TOLERANCE};
use evsr::resample::{downscale_420, upscale_420, FilterSpec};
use evsr::zoo::{analyze, ModelId, Upscaler};
use evsr::MACS_BUDGET;

#[derive(Parser)]
#[command(name = "evsr", version, about = "Efficient video super-resolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct RawInput {
    /// Geometry of headerless .yuv input; Y4M input needs no flags.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    /// Frame rate of raw input, N or N:D.
    #[arg(long, default_value = "30", value_parser = parse_fps)]
    fps: (u32, u32),
}

#[derive(Subcommand)]
enum Cmd {
    /// Downscale a 4:2:0 clip by an integer factor.
    Downscale {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u32).range(2..=4))]
        factor: u32,
        #[arg(long, default_value = "lanczos")]
        filter: FilterSpec,
        #[command(flatten)]
        raw: RawInput,
    },
    /// Upscale with a classical filter (--factor/--filter) or a model (--model).
    Upscale {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u32).range(2..=4), conflicts_with = "model")]
        factor: Option<u32>,
        #[arg(long, default_value = "lanczos")]
        filter: FilterSpec,
        #[arg(long)]
        model: Option<ModelId>,
        #[arg(long, requires = "model")]
        weights: Option<PathBuf>,
        #[command(flatten)]
        raw: RawInput,
    },
    /// Collapse training-form weights into the inference graph.
    Fuse {
        #[arg(long)]
        model: ModelId,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameters, MACs and budget verdict at a given LR resolution.
    Analyze {
        #[arg(long)]
        model: ModelId,
        #[arg(long, value_parser = parse_size)]
        res: Option<(usize, usize)>,
    },
    /// PSNR-Y, SSIM-Y and MS-SSIM-Y of a distorted clip against a reference.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        dist: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        per_frame: bool,
        #[command(flatten)]
        raw: RawInput,
    },
    /// Run a CRF sweep described by a TOML config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        codec_free: bool,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        markdown: Option<PathBuf>,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    frame_io::parse_size(s).ok_or_else(|| format!("expected WxH, got `{s}`"))
}

fn parse_fps(s: &str) -> std::result::Result<(u32, u32), String> {
    frame_io::parse_fps_arg(s).ok_or_else(|| format!("expected N or N:D, got `{s}`"))
}

fn read_clip(path: &Path, raw: &RawInput) -> Result<(ClipHeader, Vec<Frame420>)> {
    let clip = match raw.size {
        Some((w, h)) => {
            let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let frames = frame_io::read_raw_yuv(std::io::BufReader::new(file), w, h)?;
            (ClipHeader::new(w, h, raw.fps.0, raw.fps.1), frames)
        }
        None => frame_io::read_y4m_file(path).with_context(|| format!("reading {}", path.display()))?,
    };
    Ok(clip)
}

fn write_clip(path: &Path, header: &ClipHeader, frames: &[Frame420]) -> Result<()> {
    if path.extension().is_some_and(|e| e == "yuv") {
        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        frame_io::write_raw_yuv(frames, &mut file)?;
    } else {
        frame_io::write_y4m_file(path, header, frames)?;
    }
    Ok(())
}

fn resized_header(h: &ClipHeader, frames: &[Frame420]) -> ClipHeader {
    let (w, ht) = frames.first().map_or((h.width, h.height), |f| (f.width(), f.height()));
    ClipHeader { width: w, height: ht, ..*h }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Cmd::Downscale { input, out, factor, filter, raw } => {
            let (header, frames) = read_clip(&input, &raw)?;
            let lr = frames
                .iter()
                .map(|f| downscale_420(f, factor as usize, filter))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            write_clip(&out, &resized_header(&header, &lr), &lr)?;
        }
        Cmd::Upscale { input, out, factor, filter, model, weights, raw } => {
            let (header, frames) = read_clip(&input, &raw)?;
            let hr = match (model, factor) {
                (Some(id), _) => {
                    let ws = weights.as_deref().map(WeightSet::load).transpose()?;
                    if ws.is_none() {
                        eprintln!("no --weights given; using seeded random weights");
                    }
                    Upscaler::new(id, ws.as_ref())?.upscale_clip(&frames)?
                }
                (None, Some(k)) => frames
                    .iter()
                    .map(|f| upscale_420(f, k as usize, filter))
                    .collect::<std::result::Result<Vec<_>, _>>()?,
                (None, None) => bail!("upscale needs --factor or --model"),
            };
            write_clip(&out, &resized_header(&header, &hr), &hr)?;
        }
        Cmd::Fuse { model, input, out } => {
            let mut training = model.build(Form::Training);
            training.load_weights(&WeightSet::load(&input)?)?;
            let fused = fuse_graph(&training)?;
            let probe = model.input_shapes(32, 32);
            let divergence = fusion_divergence(&training, &fused, &probe, 0)?;
            println!(
                "params {} -> {}, max divergence {divergence:.3e}",
                training.count_params(),
                fused.count_params()
            );
            if divergence > FUSION_TOLERANCE {
                eprintln!("fusion self-check failed: {divergence:.3e} > {FUSION_TOLERANCE:e}");
                return Ok(ExitCode::FAILURE);
            }
            fused.export_weights().save(&out)?;
        }
        Cmd::Analyze { model, res } => {
            let (w, h) = res.unwrap_or_else(|| model.track_resolution());
            let c = analyze(model, w, h)?;
            println!("model            {model} (x{})", model.scale());
            println!("input            {w}x{h}");
            println!("params           {} ({:.4} M)", c.params, c.params as f64 / 1e6);
            println!("MACs/frame       {:.3} G", c.macs_per_frame as f64 / 1e9);
            println!("MACs/pixel       {:.3} K", c.macs_per_pixel / 1e3);
            let verdict = if c.within_budget { "within" } else { "OVER" };
            println!("budget           {verdict} {} G/frame", MACS_BUDGET / 1_000_000_000);
        }
        Cmd::Metrics { reference, dist, out, per_frame, raw } => {
            let (_, a) = read_clip(&reference, &raw)?;
            let (_, b) = read_clip(&dist, &raw)?;
            let score = score_clip(&a, &b, true)?;
            let json = metrics_json(&score, per_frame);
            match out {
                Some(p) => fs::write(&p, json + "\n")?,
                None => println!("{json}"),
            }
        }
        Cmd::Sweep { config, codec_free, jobs, csv, markdown } => {
            let mut cfg = SweepConfig::load(&config)?;
            cfg.codec_free |= codec_free;
            if let Some(j) = jobs {
                cfg.jobs = j;
            }
            let report = crf_sweep(&cfg)?;
            if let Some(reason) = &report.codec_free_reason {
                eprintln!("codec-free mode: {reason}");
            }
            let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} rows ({failed} failed) -> {}", report.rows.len(), cfg.report.display());
            if let Some(p) = csv {
                fs::write(p, emit_report(&report, ReportFormat::Csv))?;
            }
            if let Some(p) = markdown {
                fs::write(p, emit_report(&report, ReportFormat::Markdown))?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
