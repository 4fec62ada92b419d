//! CRF sweep harness: downscale → AV1 encode/decode → upscale → score.
//!
//! The encoder is an external ffmpeg build with libsvtav1, driven with the
//! challenge's flag strings. Without it, the sweep runs codec-free: the LR
//! clip passes straight from the downscaler to the upscaler.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::frame_io::{self, ClipHeader, Frame420, FrameIoError};
use crate::nn::WeightSet;
use crate::quality::{score_clip, Fixed6};
use crate::resample::{downscaled_size, resize_420, FilterSpec};
use crate::zoo::{analyze, ModelId, Upscaler};
use crate::MACS_BUDGET;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid sweep config: {0}")]
    Config(String),
    #[error("CRF {0} is outside the AV1 range 0..=63")]
    InvalidCrf(u32),
    #[error("encoder tool not found: {}", .0.display())]
    ToolNotFound(PathBuf),
    #[error("external tool failed ({status}); log kept at {}", .log.display())]
    EncoderFailed { status: String, log: PathBuf },
    #[error("decoded clip is {got_w}x{got_h}, expected {expected_w}x{expected_h}")]
    GeometryMismatch {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("no successful baseline row for `{clip}` at CRF {crf}")]
    MissingBaseline { clip: String, crf: u32 },
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    FrameIo(#[from] FrameIoError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

pub const DEFAULT_CRFS: [u32; 5] = [31, 39, 47, 55, 63];
pub const MAX_CRF: u32 = 63;
pub const SVTAV1_PARAMS: &str = "preset=10:lookahead=0:keyint=-1:pred-struct=1";
pub const BASELINE: &str = "lanczos_baseline";
pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_ENV: &str = "EVSR_FFMPEG";

const SCALE_FLAGS: &str = "flags=lanczos+accurate_rnd+full_chroma_int:sws_dither=none:param0=5";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    /// 360p → 1080p, ×3.
    X3Mobile,
    /// 540p → 4K, ×4.
    X4General,
}

impl Track {
    pub fn scale(self) -> usize {
        match self {
            Track::X3Mobile => 3,
            Track::X4General => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Track::X3Mobile => "x3_mobile",
            Track::X4General => "x4_general",
        }
    }
}

/// An upscaling method under test.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Classical { name: String, filter: FilterSpec },
    Model { id: ModelId, weights: Option<PathBuf> },
}

impl Method {
    pub fn parse(name: &str, weights: Option<PathBuf>) -> Result<Self> {
        let classical = |filter| Method::Classical {
            name: name.to_string(),
            filter,
        };
        let method = match name {
            BASELINE => classical(FilterSpec::LANCZOS5),
            "bicubic_baseline" => classical(FilterSpec::Bicubic),
            "nearest_baseline" => classical(FilterSpec::Nearest),
            _ => {
                let id = ModelId::from_str(name).map_err(|e| BenchError::Config(e.to_string()))?;
                return Ok(Method::Model { id, weights });
            }
        };
        if weights.is_some() {
            return Err(BenchError::Config(format!("`{name}` takes no weights")));
        }
        Ok(method)
    }

    pub fn name(&self) -> String {
        match self {
            Method::Classical { name, .. } => name.clone(),
            Method::Model { id, .. } => id.name().to_string(),
        }
    }
}

/// ffmpeg location and SVT-AV1 parameter string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_svt_params")]
    pub svtav1_params: String,
}

fn default_svt_params() -> String {
    SVTAV1_PARAMS.to_string()
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            path: None,
            svtav1_params: default_svt_params(),
        }
    }
}

/// A resolved external tool.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub tool: PathBuf,
    pub svtav1_params: String,
}

impl Default for Encoder {
    fn default() -> Self {
        Self {
            tool: PathBuf::from("ffmpeg"),
            svtav1_params: default_svt_params(),
        }
    }
}

impl EncoderConfig {
    /// The environment override wins over the config path, which wins over `ffmpeg` on `PATH`.
    pub fn resolve_with(&self, env_override: Option<String>) -> Encoder {
        let tool = env_override
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
            .or_else(|| self.path.clone())
            .unwrap_or_else(|| PathBuf::from("ffmpeg"));
        Encoder {
            tool,
            svtav1_params: self.svtav1_params.clone(),
        }
    }

    pub fn resolve(&self) -> Encoder {
        self.resolve_with(std::env::var(TOOL_ENV).ok())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    /// Path as written in the config; the report key.
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub sources: Vec<Source>,
    pub track: Track,
    pub crfs: Vec<u32>,
    pub methods: Vec<Method>,
    pub workdir: PathBuf,
    pub report: PathBuf,
    /// LR rung geometry; defaults to the source size divided by the track scale.
    pub lr_size: Option<(usize, usize)>,
    pub jobs: usize,
    pub codec_free: bool,
    /// Write upscaled clips into the workdir and emit a ready-to-run VMAF command per row.
    pub keep_outputs: bool,
    pub encoder: EncoderConfig,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MethodEntry {
    Name(String),
    Model { model: String, weights: Option<PathBuf> },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    sources: Vec<String>,
    track: Track,
    #[serde(default = "default_crfs")]
    crfs: Vec<u32>,
    methods: Vec<MethodEntry>,
    workdir: PathBuf,
    report: PathBuf,
    #[serde(default)]
    lr_size: Option<String>,
    #[serde(default)]
    jobs: Option<usize>,
    #[serde(default)]
    codec_free: bool,
    #[serde(default)]
    keep_outputs: bool,
    #[serde(default)]
    encoder: EncoderConfig,
}

fn default_crfs() -> Vec<u32> {
    DEFAULT_CRFS.to_vec()
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl SweepConfig {
    pub fn new(sources: Vec<PathBuf>, track: Track, methods: Vec<Method>, workdir: PathBuf, report: PathBuf) -> Self {
        Self {
            sources: sources
                .into_iter()
                .map(|p| Source {
                    name: p.display().to_string(),
                    path: p,
                })
                .collect(),
            track,
            crfs: default_crfs(),
            methods,
            workdir,
            report,
            lr_size: None,
            jobs: default_jobs(),
            codec_free: false,
            keep_outputs: false,
            encoder: EncoderConfig::default(),
        }
    }

    /// Parses a TOML document; relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let file: SweepFile = toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        let rel = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }
        };
        let methods = file
            .methods
            .into_iter()
            .map(|m| match m {
                MethodEntry::Name(n) => Method::parse(&n, None),
                MethodEntry::Model { model, weights } => Method::parse(&model, weights.as_deref().map(rel)),
            })
            .collect::<Result<Vec<_>>>()?;
        let lr_size = match file.lr_size {
            Some(s) => Some(
                frame_io::parse_size(&s).ok_or_else(|| BenchError::Config(format!("bad lr_size `{s}`")))?,
            ),
            None => None,
        };
        let mut encoder = file.encoder;
        encoder.path = encoder.path.map(|p| if p.components().count() > 1 { rel(&p) } else { p });
        let cfg = Self {
            sources: file
                .sources
                .iter()
                .map(|s| Source {
                    name: s.clone(),
                    path: rel(Path::new(s)),
                })
                .collect(),
            track: file.track,
            crfs: file.crfs,
            methods,
            workdir: rel(&file.workdir),
            report: rel(&file.report),
            lr_size,
            jobs: file.jobs.unwrap_or_else(default_jobs),
            codec_free: file.codec_free,
            keep_outputs: file.keep_outputs,
            encoder,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&crf) = self.crfs.iter().find(|&&c| c > MAX_CRF) {
            return Err(BenchError::InvalidCrf(crf));
        }
        let unique = |names: Vec<String>, what: &str| -> Result<()> {
            let mut seen = HashSet::new();
            for n in names {
                if !seen.insert(n.clone()) {
                    return Err(BenchError::Config(format!("duplicate {what} `{n}`")));
                }
            }
            Ok(())
        };
        unique(self.crfs.iter().map(u32::to_string).collect(), "crf")?;
        unique(self.sources.iter().map(|s| s.name.clone()).collect(), "source")?;
        unique(self.methods.iter().map(Method::name).collect(), "method")?;
        if self.sources.is_empty() || self.methods.is_empty() || self.crfs.is_empty() {
            return Err(BenchError::Config("sources, crfs and methods must be non-empty".into()));
        }
        if self.jobs == 0 {
            return Err(BenchError::Config("jobs must be at least 1".into()));
        }
        for m in &self.methods {
            if let Method::Model { id, .. } = m {
                if id.scale() != self.track.scale() {
                    return Err(BenchError::Config(format!(
                        "{id} is a x{} model, track {} is x{}",
                        id.scale(),
                        self.track.name(),
                        self.track.scale()
                    )));
                }
                let (w, h) = id.track_resolution();
                let c = analyze(*id, w, h).map_err(|e| BenchError::Config(e.to_string()))?;
                if c.macs_per_frame > MACS_BUDGET {
                    return Err(BenchError::Config(format!("{id} exceeds the per-frame MACs budget")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed,
}

/// One encode/decode round trip through the external codec.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeJob {
    pub input: PathBuf,
    pub output: PathBuf,
    pub decoded: PathBuf,
    pub log: PathBuf,
    pub crf: u32,
    pub width: usize,
    pub height: usize,
    pub status: JobStatus,
}

impl EncodeJob {
    /// Job with workdir-derived paths named after `stem` and the CRF.
    pub fn in_workdir(input: &Path, workdir: &Path, stem: &str, crf: u32, width: usize, height: usize) -> Self {
        let base = workdir.join(format!("{stem}_crf{crf}"));
        let with = |suffix: &str| PathBuf::from(format!("{}{suffix}", base.display()));
        Self {
            input: input.to_path_buf(),
            output: with(".mkv"),
            decoded: with("_dec.y4m"),
            log: with(".log"),
            crf,
            width,
            height,
            status: JobStatus::Pending,
        }
    }
}

fn arg(p: &Path) -> String {
    p.display().to_string()
}

/// `ffmpeg … -vf scale=W:H:… -c:v libsvtav1 -svtav1-params … -crf N out`; the caller redirects output to the log.
pub fn build_encode_command(job: &EncodeJob, encoder: &Encoder) -> Vec<String> {
    vec![
        arg(&encoder.tool),
        "-hide_banner".into(),
        "-y".into(),
        "-loglevel".into(),
        "error".into(),
        "-i".into(),
        arg(&job.input),
        "-vf".into(),
        format!("scale={}:{}:{SCALE_FLAGS}", job.width, job.height),
        "-c:v".into(),
        "libsvtav1".into(),
        "-svtav1-params".into(),
        encoder.svtav1_params.clone(),
        "-crf".into(),
        job.crf.to_string(),
        arg(&job.output),
    ]
}

/// Decodes the bitstream to a 4:2:0 Y4M file.
pub fn build_decode_command(job: &EncodeJob, encoder: &Encoder) -> Vec<String> {
    vec![
        arg(&encoder.tool),
        "-hide_banner".into(),
        "-y".into(),
        "-loglevel".into(),
        "error".into(),
        "-i".into(),
        arg(&job.output),
        "-f".into(),
        "yuv4mpegpipe".into(),
        "-pix_fmt".into(),
        "yuv420p".into(),
        arg(&job.decoded),
    ]
}

/// Near-lossless x264 encode for submitting upscaled clips; creates the output directory.
pub fn build_output_encode_command(tool: &Path, input: &Path, output: &Path) -> Result<Vec<String>> {
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(vec![
        arg(tool),
        "-i".into(),
        arg(input),
        "-c:v".into(),
        "libx264".into(),
        "-preset".into(),
        "veryfast".into(),
        "-crf".into(),
        "12".into(),
        "-strict".into(),
        "-2".into(),
        arg(output),
    ])
}

/// PSNR / float-SSIM / VMAF scoring command of the challenge evaluation.
pub fn vmaf_command(tool: &Path, upscaled: &Path, original: &Path, log: &Path) -> String {
    format!(
        "{} -hide_banner -y -loglevel error -i {} -i {} -filter_complex 'libvmaf=feature=name=psnr|name=float_ssim:log_path={}:log_fmt=xml' -f null -",
        tool.display(),
        upscaled.display(),
        original.display(),
        log.display()
    )
}

/// Runs `argv`, appending stdout and stderr to `log`.
pub fn run_logged(argv: &[String], log: &Path) -> Result<()> {
    if let Some(dir) = log.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file = OpenOptions::new().create(true).append(true).open(log)?;
    let status = Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::null())
        .stdout(file.try_clone()?)
        .stderr(file)
        .status()
        .map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => BenchError::ToolNotFound(PathBuf::from(&argv[0])),
            _ => BenchError::Io(e),
        })?;
    if !status.success() {
        return Err(BenchError::EncoderFailed {
            status: status.to_string(),
            log: log.to_path_buf(),
        });
    }
    Ok(())
}

/// Encodes, decodes and checks the decoded geometry; returns the decoded frames.
pub fn run_stage(job: &mut EncodeJob, encoder: &Encoder) -> Result<Vec<Frame420>> {
    job.status = JobStatus::Running;
    let result = (|| {
        run_logged(&build_encode_command(job, encoder), &job.log)?;
        run_logged(&build_decode_command(job, encoder), &job.log)?;
        let (header, frames) = frame_io::read_y4m_file(&job.decoded)?;
        if (header.width, header.height) != (job.width, job.height) {
            return Err(BenchError::GeometryMismatch {
                expected_w: job.width,
                expected_h: job.height,
                got_w: header.width,
                got_h: header.height,
            });
        }
        Ok(frames)
    })();
    job.status = if result.is_ok() {
        JobStatus::Done
    } else {
        JobStatus::Failed
    };
    result
}

/// Checks the tool runs and has the SVT-AV1 encoder; returns its version line.
pub fn probe_encoder(encoder: &Encoder) -> std::result::Result<String, String> {
    let run = |args: &[&str]| {
        Command::new(&encoder.tool)
            .args(args)
            .stdin(Stdio::null())
            .output()
            .map_err(|e| format!("{} not runnable: {e}", encoder.tool.display()))
    };
    let encoders = run(&["-hide_banner", "-encoders"])?;
    if !String::from_utf8_lossy(&encoders.stdout).contains("libsvtav1") {
        return Err(format!("{} has no libsvtav1 encoder", encoder.tool.display()));
    }
    let version = run(&["-version"])?;
    Ok(String::from_utf8_lossy(&version.stdout)
        .lines()
        .next()
        .unwrap_or("ffmpeg (unknown version)")
        .to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Failed,
}

/// One (source, CRF, method) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub source: String,
    pub crf: u32,
    pub method: String,
    pub status: RowStatus,
    pub error: Option<String>,
    #[serde(with = "opt6")]
    pub psnr_y: Option<f64>,
    #[serde(with = "opt6")]
    pub ssim_y: Option<f64>,
    #[serde(with = "opt6")]
    pub ms_ssim_y: Option<f64>,
    #[serde(with = "opt6")]
    pub bitrate_kbps: Option<f64>,
    pub params: Option<u64>,
    #[serde(with = "opt6")]
    pub macs_g_per_frame: Option<f64>,
    #[serde(with = "opt6")]
    pub runtime_ms_per_frame: Option<f64>,
    pub tool_versions: String,
    pub timestamp: String,
    pub vmaf_command: Option<String>,
}

impl SweepRow {
    fn failed(source: &str, crf: u32, method: &str, tool_versions: &str, reason: String) -> Self {
        Self {
            source: source.to_string(),
            crf,
            method: method.to_string(),
            status: RowStatus::Failed,
            error: Some(reason),
            psnr_y: None,
            ssim_y: None,
            ms_ssim_y: None,
            bitrate_kbps: None,
            params: None,
            macs_g_per_frame: None,
            runtime_ms_per_frame: None,
            tool_versions: tool_versions.to_string(),
            timestamp: now(),
            vmaf_command: None,
        }
    }

    fn key(&self) -> (String, u32, String) {
        (self.source.clone(), self.crf, self.method.clone())
    }
}

mod opt6 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        v.map(Fixed6).serialize(s)
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum NumOrText {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
        match Option::<NumOrText>::deserialize(d)? {
            None => Ok(None),
            Some(NumOrText::Num(v)) => Ok(Some(v)),
            Some(NumOrText::Text(t)) => parse_special(&t)
                .map(Some)
                .ok_or_else(|| serde::de::Error::custom(format!("bad number `{t}`"))),
        }
    }
}

fn parse_special(t: &str) -> Option<f64> {
    match t {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        "nan" => Some(f64::NAN),
        _ => None,
    }
}

fn fmt6(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.6}")
    }
}

/// Values as they read back from a persisted report.
fn persisted(v: f64) -> f64 {
    if v.is_finite() {
        fmt6(v).parse().unwrap_or(v)
    } else {
        v
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema: u32,
    pub track: Track,
    /// `codec` or `codec-free`.
    pub mode: String,
    pub codec_free_reason: Option<String>,
    /// Where runtimes were measured; CPU figures are not comparable with GPU ones.
    pub machine: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn empty(track: Track) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            track,
            mode: "codec-free".into(),
            codec_free_reason: None,
            machine: machine_descriptor(),
            rows: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text).map_err(|e| BenchError::Report(e.to_string()))?;
        if report.schema != SCHEMA_VERSION {
            return Err(BenchError::Report(format!("unsupported schema {}", report.schema)));
        }
        Ok(report)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Writes JSON through a sibling temp file and a rename.
    pub fn save_atomic(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir)?;
        let name = path.file_name().ok_or_else(|| BenchError::Report("report path has no file name".into()))?;
        let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
        fs::write(&tmp, emit_report(self, ReportFormat::Json))?;
        File::open(&tmp)?.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

fn machine_descriptor() -> String {
    format!(
        "{}-{} cpu, {} threads; CPU wall-clock, not comparable with GPU figures",
        std::env::consts::ARCH,
        std::env::consts::OS,
        rayon::current_num_threads()
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(BenchError::Config(format!("unknown report format `{s}`"))),
        }
    }
}

pub const CSV_COLUMNS: [&str; 15] = [
    "source",
    "crf",
    "method",
    "status",
    "error",
    "psnr_y",
    "ssim_y",
    "ms_ssim_y",
    "bitrate_kbps",
    "params",
    "macs_g_per_frame",
    "runtime_ms_per_frame",
    "tool_versions",
    "timestamp",
    "vmaf_command",
];

pub fn emit_report(report: &SweepReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(report).expect("report serialises");
            out.push(b'\n');
            out
        }
        ReportFormat::Csv => emit_csv(&report.rows),
        ReportFormat::Markdown => emit_markdown(report).into_bytes(),
    }
}

fn opt_field<T>(v: Option<T>, f: impl Fn(T) -> String) -> String {
    v.map(f).unwrap_or_default()
}

fn emit_csv(rows: &[SweepRow]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).expect("in-memory write");
    for r in rows {
        let status = match r.status {
            RowStatus::Ok => "ok",
            RowStatus::Failed => "failed",
        };
        w.write_record([
            r.source.clone(),
            r.crf.to_string(),
            r.method.clone(),
            status.to_string(),
            r.error.clone().unwrap_or_default(),
            opt_field(r.psnr_y, fmt6),
            opt_field(r.ssim_y, fmt6),
            opt_field(r.ms_ssim_y, fmt6),
            opt_field(r.bitrate_kbps, fmt6),
            opt_field(r.params, |p| p.to_string()),
            opt_field(r.macs_g_per_frame, fmt6),
            opt_field(r.runtime_ms_per_frame, fmt6),
            r.tool_versions.clone(),
            r.timestamp.clone(),
            r.vmaf_command.clone().unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Parses rows written by the CSV emitter.
pub fn parse_csv_rows(bytes: &[u8]) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let headers = r.headers().map_err(|e| BenchError::Report(e.to_string()))?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(BenchError::Report(format!("unexpected CSV columns {headers:?}")));
    }
    let bad = |what: &str, v: &str| BenchError::Report(format!("bad {what} `{v}`"));
    let num = |v: &str| -> Result<Option<f64>> {
        if v.is_empty() {
            return Ok(None);
        }
        parse_special(v)
            .or_else(|| v.parse().ok())
            .map(Some)
            .ok_or_else(|| bad("number", v))
    };
    let text = |v: &str| (!v.is_empty()).then(|| v.to_string());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| BenchError::Report(e.to_string()))?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        rows.push(SweepRow {
            source: f(0).to_string(),
            crf: f(1).parse().map_err(|_| bad("crf", f(1)))?,
            method: f(2).to_string(),
            status: match f(3) {
                "ok" => RowStatus::Ok,
                "failed" => RowStatus::Failed,
                s => return Err(bad("status", s)),
            },
            error: text(f(4)),
            psnr_y: num(f(5))?,
            ssim_y: num(f(6))?,
            ms_ssim_y: num(f(7))?,
            bitrate_kbps: num(f(8))?,
            params: match f(9) {
                "" => None,
                p => Some(p.parse().map_err(|_| bad("params", p))?),
            },
            macs_g_per_frame: num(f(10))?,
            runtime_ms_per_frame: num(f(11))?,
            tool_versions: f(12).to_string(),
            timestamp: f(13).to_string(),
            vmaf_command: text(f(14)),
        });
    }
    Ok(rows)
}

fn finite_mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n, mut any) = (0.0, 0usize, false);
    for v in values {
        any = true;
        if v.is_finite() {
            sum += v;
            n += 1;
        }
    }
    match (n, any) {
        (0, true) => Some(f64::INFINITY),
        (0, false) => None,
        _ => Some(sum / n as f64),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), fmt6)
}

fn emit_markdown(report: &SweepReport) -> String {
    let mut methods: Vec<String> = Vec::new();
    let mut crfs: Vec<u32> = Vec::new();
    for r in &report.rows {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
        if !crfs.contains(&r.crf) {
            crfs.push(r.crf);
        }
    }
    let mut md = String::new();
    let t = report.track;
    let _ = writeln!(md, "## Track {} (x{})\n", t.name(), t.scale());
    let _ = writeln!(md, "Mode: {}. Runtime: {}.\n", report.mode, report.machine);
    md.push_str("| Method | PSNR-Y (dB) | SSIM-Y | MS-SSIM-Y | Bitrate (kbps) | Params (M) | MACs (G/frame) | Runtime (ms/frame) | Rows ok |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for m in &methods {
        let rows: Vec<&SweepRow> = report.rows.iter().filter(|r| &r.method == m).collect();
        let ok: Vec<&&SweepRow> = rows.iter().filter(|r| r.status == RowStatus::Ok).collect();
        let mean = |f: &dyn Fn(&SweepRow) -> Option<f64>| finite_mean(ok.iter().filter_map(|r| f(r)));
        let params = ok.iter().find_map(|r| r.params).map(|p| p as f64 / 1e6);
        let _ = writeln!(
            md,
            "| {m} | {} | {} | {} | {} | {} | {} | {} | {}/{} |",
            cell(mean(&|r| r.psnr_y)),
            cell(mean(&|r| r.ssim_y)),
            cell(mean(&|r| r.ms_ssim_y)),
            cell(mean(&|r| r.bitrate_kbps)),
            cell(params),
            cell(mean(&|r| r.macs_g_per_frame)),
            cell(mean(&|r| r.runtime_ms_per_frame)),
            ok.len(),
            rows.len()
        );
    }
    md.push_str("\n### PSNR-Y (dB) per CRF\n\n| Method |");
    for c in &crfs {
        let _ = write!(md, " CRF {c} |");
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(crfs.len()));
    md.push('\n');
    for m in &methods {
        let _ = write!(md, "| {m} |");
        for c in &crfs {
            let v = finite_mean(
                report
                    .rows
                    .iter()
                    .filter(|r| &r.method == m && r.crf == *c && r.status == RowStatus::Ok)
                    .filter_map(|r| r.psnr_y),
            );
            let _ = write!(md, " {} |", cell(v));
        }
        md.push('\n');
    }
    md
}

/// Method metric minus baseline metric for one (source, CRF) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub source: String,
    pub crf: u32,
    pub method: String,
    pub d_psnr_y: f64,
    pub d_ssim_y: f64,
    pub d_ms_ssim_y: Option<f64>,
}

/// Mean deltas of one method, per CRF (`crf = Some`) or overall (`None`).
#[derive(Debug, Clone, PartialEq)]
pub struct MeanDelta {
    pub method: String,
    pub crf: Option<u32>,
    pub d_psnr_y: f64,
    pub d_ssim_y: f64,
    pub d_ms_ssim_y: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineComparison {
    pub rows: Vec<DeltaRow>,
    pub per_crf: Vec<MeanDelta>,
    pub overall: Vec<MeanDelta>,
}

fn mean_deltas(method: &str, crf: Option<u32>, rows: &[&DeltaRow]) -> MeanDelta {
    let n = rows.len() as f64;
    let ms = rows
        .iter()
        .map(|r| r.d_ms_ssim_y)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / n);
    MeanDelta {
        method: method.to_string(),
        crf,
        d_psnr_y: rows.iter().map(|r| r.d_psnr_y).sum::<f64>() / n,
        d_ssim_y: rows.iter().map(|r| r.d_ssim_y).sum::<f64>() / n,
        d_ms_ssim_y: ms,
    }
}

/// Deltas against the Lanczos baseline, recomputed from the raw rows.
pub fn compare_baseline(report: &SweepReport) -> Result<BaselineComparison> {
    let baseline: HashMap<(&str, u32), &SweepRow> = report
        .rows
        .iter()
        .filter(|r| r.method == BASELINE && r.status == RowStatus::Ok)
        .map(|r| ((r.source.as_str(), r.crf), r))
        .collect();
    let mut rows = Vec::new();
    for r in report.rows.iter().filter(|r| r.status == RowStatus::Ok) {
        let b = baseline
            .get(&(r.source.as_str(), r.crf))
            .ok_or_else(|| BenchError::MissingBaseline {
                clip: r.source.clone(),
                crf: r.crf,
            })?;
        let d = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) if x == y => Some(0.0),
            (Some(x), Some(y)) => Some(x - y),
            _ => None,
        };
        rows.push(DeltaRow {
            source: r.source.clone(),
            crf: r.crf,
            method: r.method.clone(),
            d_psnr_y: d(r.psnr_y, b.psnr_y).unwrap_or(f64::NAN),
            d_ssim_y: d(r.ssim_y, b.ssim_y).unwrap_or(f64::NAN),
            d_ms_ssim_y: d(r.ms_ssim_y, b.ms_ssim_y),
        });
    }
    let mut methods: Vec<&str> = Vec::new();
    let mut crfs: Vec<u32> = Vec::new();
    for r in &rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        if !crfs.contains(&r.crf) {
            crfs.push(r.crf);
        }
    }
    let mut per_crf = Vec::new();
    let mut overall = Vec::new();
    for m in &methods {
        for c in &crfs {
            let sel: Vec<&DeltaRow> = rows.iter().filter(|r| r.method == *m && r.crf == *c).collect();
            if !sel.is_empty() {
                per_crf.push(mean_deltas(m, Some(*c), &sel));
            }
        }
        let sel: Vec<&DeltaRow> = rows.iter().filter(|r| r.method == *m).collect();
        overall.push(mean_deltas(m, None, &sel));
    }
    Ok(BaselineComparison {
        rows,
        per_crf,
        overall,
    })
}

/// Everything one worker needs for a (source, CRF) cell.
struct CellContext<'a> {
    cfg: &'a SweepConfig,
    encoder: &'a Encoder,
    codec: bool,
    tool_versions: &'a str,
}

struct Prepared {
    hr_header: ClipHeader,
    hr: Vec<Frame420>,
    lr: Vec<Frame420>,
    bitrate_kbps: Option<f64>,
}

fn file_stem(si: usize, src: &Source) -> String {
    let stem = src
        .path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "source".into());
    format!("{si:02}_{stem}")
}

impl CellContext<'_> {
    fn lr_geometry(&self, w: usize, h: usize) -> (usize, usize) {
        self.cfg
            .lr_size
            .unwrap_or_else(|| downscaled_size(w, h, self.cfg.track.scale()))
    }

    fn prepare(&self, si: usize, crf: u32) -> Result<Prepared> {
        let src = &self.cfg.sources[si];
        let (hr_header, hr) = frame_io::read_y4m_file(&src.path)?;
        let (lw, lh) = self.lr_geometry(hr_header.width, hr_header.height);
        if !self.codec {
            let lr = hr
                .iter()
                .map(|f| resize_420(f, lw, lh, FilterSpec::LANCZOS5))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| BenchError::Config(e.to_string()))?;
            return Ok(Prepared {
                hr_header,
                hr,
                lr,
                bitrate_kbps: None,
            });
        }
        let mut job = EncodeJob::in_workdir(&src.path, &self.cfg.workdir, &file_stem(si, src), crf, lw, lh);
        let _ = fs::remove_file(&job.log);
        let lr = run_stage(&mut job, self.encoder)?;
        let seconds = hr.len() as f64 / hr_header.fps().max(f64::MIN_POSITIVE);
        let bits = fs::metadata(&job.output)?.len() as f64 * 8.0;
        Ok(Prepared {
            hr_header,
            hr,
            lr,
            bitrate_kbps: (seconds > 0.0).then(|| bits / seconds / 1000.0),
        })
    }

    fn upscale(&self, method: &Method, lr: &[Frame420], w: usize, h: usize) -> Result<Vec<Frame420>> {
        let out = match method {
            Method::Classical { filter, .. } => lr
                .iter()
                .map(|f| resize_420(f, w, h, *filter))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| BenchError::Config(e.to_string()))?,
            Method::Model { id, weights } => {
                let ws = weights
                    .as_deref()
                    .map(WeightSet::load)
                    .transpose()
                    .map_err(|e| BenchError::Config(e.to_string()))?;
                Upscaler::new(*id, ws.as_ref())
                    .and_then(|u| u.upscale_clip(lr))
                    .map_err(|e| BenchError::Config(e.to_string()))?
            }
        };
        // Rungs that do not divide the source evenly are brought to the source size for scoring.
        out.into_iter()
            .map(|f| {
                if (f.width(), f.height()) == (w, h) {
                    Ok(f)
                } else {
                    resize_420(&f, w, h, FilterSpec::LANCZOS5).map_err(|e| BenchError::Config(e.to_string()))
                }
            })
            .collect()
    }

    fn row(&self, si: usize, crf: u32, method: &Method, prep: &Prepared) -> Result<SweepRow> {
        let src = &self.cfg.sources[si];
        let (w, h) = (prep.hr_header.width, prep.hr_header.height);
        let start = Instant::now();
        let up = self.upscale(method, &prep.lr, w, h)?;
        let runtime_ms = start.elapsed().as_secs_f64() * 1000.0 / up.len().max(1) as f64;
        let score = score_clip(&prep.hr, &up, true).map_err(|e| BenchError::Config(e.to_string()))?;
        let (params, macs) = match method {
            Method::Model { id, .. } => {
                let lr0 = &prep.lr[0];
                let c = analyze(*id, lr0.width(), lr0.height()).map_err(|e| BenchError::Config(e.to_string()))?;
                (Some(c.params), Some(c.macs_per_frame as f64 / 1e9))
            }
            Method::Classical { .. } => (None, None),
        };
        let vmaf = if self.cfg.keep_outputs {
            let stem = file_stem(si, src);
            let out = self.cfg.workdir.join(format!("{stem}_crf{crf}_{}.y4m", method.name()));
            frame_io::write_y4m_file(&out, &prep.hr_header, &up)?;
            let log = out.with_extension("vmaf.xml");
            Some(vmaf_command(&self.encoder.tool, &out, &src.path, &log))
        } else {
            None
        };
        Ok(SweepRow {
            source: src.name.clone(),
            crf,
            method: method.name(),
            status: RowStatus::Ok,
            error: None,
            psnr_y: Some(persisted(score.psnr_y)),
            ssim_y: Some(persisted(score.ssim_y)),
            ms_ssim_y: score.ms_ssim_y.map(persisted),
            bitrate_kbps: prep.bitrate_kbps.map(persisted),
            params,
            macs_g_per_frame: macs.map(persisted),
            runtime_ms_per_frame: Some(persisted(runtime_ms)),
            tool_versions: self.tool_versions.to_string(),
            timestamp: now(),
            vmaf_command: vmaf,
        })
    }

    fn run(&self, si: usize, crf: u32, methods: &[usize]) -> Vec<(usize, SweepRow)> {
        let name = &self.cfg.sources[si].name;
        let fail = |mi: usize, reason: String| {
            let m = self.cfg.methods[mi].name();
            (mi, SweepRow::failed(name, crf, &m, self.tool_versions, reason))
        };
        match self.prepare(si, crf) {
            Err(e) => methods.iter().map(|&mi| fail(mi, e.to_string())).collect(),
            Ok(prep) if prep.lr.is_empty() => methods
                .iter()
                .map(|&mi| fail(mi, "source has no frames".into()))
                .collect(),
            Ok(prep) => methods
                .iter()
                .map(|&mi| match self.row(si, crf, &self.cfg.methods[mi], &prep) {
                    Ok(r) => (mi, r),
                    Err(e) => fail(mi, e.to_string()),
                })
                .collect(),
        }
    }
}

type CellKey = (usize, usize, usize);

/// Runs every (source, CRF, method) cell, persisting the report after each cell.
///
/// Successful rows already in the report with the same tool versions are kept
/// as they are, so an interrupted sweep resumes where it stopped and a finished
/// one is left byte-identical.
pub fn crf_sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.workdir)?;
    let encoder = cfg.encoder.resolve();
    let (codec, reason, tool_versions) = if cfg.codec_free {
        (false, Some("requested".to_string()), codec_free_versions())
    } else {
        match probe_encoder(&encoder) {
            Ok(v) => (true, None, format!("evsr {}; {v}", env!("CARGO_PKG_VERSION"))),
            Err(why) => (false, Some(why), codec_free_versions()),
        }
    };

    let mut done: BTreeMap<CellKey, SweepRow> = BTreeMap::new();
    if cfg.report.exists() {
        let previous = SweepReport::load(&cfg.report)?;
        let index: HashMap<(String, u32, String), SweepRow> = previous
            .rows
            .into_iter()
            .filter(|r| r.status == RowStatus::Ok && r.tool_versions == tool_versions)
            .map(|r| (r.key(), r))
            .collect();
        for (si, s) in cfg.sources.iter().enumerate() {
            for (ci, &crf) in cfg.crfs.iter().enumerate() {
                for (mi, m) in cfg.methods.iter().enumerate() {
                    if let Some(r) = index.get(&(s.name.clone(), crf, m.name())) {
                        done.insert((si, ci, mi), r.clone());
                    }
                }
            }
        }
    }

    let report_of = |rows: &BTreeMap<CellKey, SweepRow>| SweepReport {
        schema: SCHEMA_VERSION,
        track: cfg.track,
        mode: if codec { "codec" } else { "codec-free" }.to_string(),
        codec_free_reason: reason.clone(),
        machine: machine_descriptor(),
        rows: rows.values().cloned().collect(),
    };

    let cells: Vec<(usize, usize, Vec<usize>)> = (0..cfg.sources.len())
        .flat_map(|si| (0..cfg.crfs.len()).map(move |ci| (si, ci)))
        .map(|(si, ci)| {
            let pending = (0..cfg.methods.len())
                .filter(|&mi| !done.contains_key(&(si, ci, mi)))
                .collect();
            (si, ci, pending)
        })
        .filter(|(_, _, p): &(usize, usize, Vec<usize>)| !p.is_empty())
        .collect();

    let ctx = CellContext {
        cfg,
        encoder: &encoder,
        codec,
        tool_versions: &tool_versions,
    };
    let state = Mutex::new(done);
    let write_error: Mutex<Option<BenchError>> = Mutex::new(None);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| BenchError::Config(e.to_string()))?;
    pool.install(|| {
        cells.par_iter().for_each(|(si, ci, pending)| {
            let rows = ctx.run(*si, cfg.crfs[*ci], pending);
            let mut guard = state.lock().expect("sweep state lock");
            for (mi, row) in rows {
                guard.insert((*si, *ci, mi), row);
            }
            if let Err(e) = report_of(&guard).save_atomic(&cfg.report) {
                write_error.lock().expect("error lock").get_or_insert(e);
            }
        });
    });
    if let Some(e) = write_error.into_inner().expect("error lock") {
        return Err(e);
    }
    let report = report_of(&state.into_inner().expect("sweep state lock"));
    report.save_atomic(&cfg.report)?;
    Ok(report)
}

fn codec_free_versions() -> String {
    format!("evsr {}; codec-free", env!("CARGO_PKG_VERSION"))
}
