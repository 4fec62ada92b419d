use std::fs;
use std::path::{Path, PathBuf};

use evsr::bench::*;
use evsr::frame_io::{write_y4m_file, ClipHeader, Frame420};
use evsr::quality::psnr_y;
use evsr::resample::{downscale_420, resize_420, FilterSpec};
use evsr::zoo::ModelId;

mod common;

fn golden(name: &str) -> Vec<String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

fn golden_job() -> EncodeJob {
    EncodeJob::in_workdir(Path::new("in/source.y4m"), Path::new("work"), "source", 47, 480, 268)
}

#[test]
fn encode_argv_matches_golden_file() {
    let argv = build_encode_command(&golden_job(), &Encoder::default());
    assert_eq!(argv, golden("encode_argv.txt"));
    assert!(argv.contains(&"preset=10:lookahead=0:keyint=-1:pred-struct=1".to_string()));
    assert!(argv.windows(2).any(|w| w == ["-crf", "47"]));
}

#[test]
fn output_encode_argv_matches_golden_and_creates_dir() {
    let dir = tempfile::tempdir().unwrap();
    let rel = |p: &str| dir.path().join(p);
    let argv = build_output_encode_command(Path::new("ffmpeg"), &rel("up/source_x4.y4m"), &rel("submit/source_x4.mp4"))
        .unwrap();
    assert!(rel("submit").is_dir());
    let prefix = format!("{}/", dir.path().display());
    let stripped: Vec<String> = argv.iter().map(|a| a.replace(&prefix, "")).collect();
    assert_eq!(stripped, golden("output_encode_argv.txt"));

    let other = build_output_encode_command(Path::new("ffmpeg"), &rel("b.y4m"), &rel("c.mp4")).unwrap();
    let differing: Vec<usize> = (0..argv.len()).filter(|&i| argv[i] != other[i]).collect();
    assert_eq!(differing, vec![2, argv.len() - 1]);
}

#[test]
fn crf_outside_av1_range_is_rejected() {
    let mut cfg = SweepConfig::new(
        vec!["a.y4m".into()],
        Track::X3Mobile,
        vec![Method::parse(BASELINE, None).unwrap()],
        "work".into(),
        "r.json".into(),
    );
    cfg.crfs = vec![31, 64];
    assert!(matches!(cfg.validate(), Err(BenchError::InvalidCrf(64))));
    cfg.crfs = vec![0, 63];
    cfg.validate().unwrap();
}

#[test]
fn failing_tool_keeps_log_and_missing_tool_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut job = EncodeJob::in_workdir(&dir.path().join("in.y4m"), dir.path(), "x", 63, 16, 16);
    let failing = Encoder {
        tool: "false".into(),
        ..Encoder::default()
    };
    match run_stage(&mut job, &failing) {
        Err(BenchError::EncoderFailed { log, .. }) => {
            assert_eq!(log, job.log);
            assert!(log.exists());
        }
        other => panic!("expected EncoderFailed, got {other:?}"),
    }
    assert_eq!(job.status, JobStatus::Failed);

    let missing = Encoder {
        tool: dir.path().join("no-such-ffmpeg"),
        ..Encoder::default()
    };
    assert!(matches!(run_stage(&mut job, &missing), Err(BenchError::ToolNotFound(p)) if p == missing.tool));
    assert!(probe_encoder(&missing).is_err());
}

/// Smooth drifting gradient, 192x108 so the x3 rung is 64x36.
fn smooth_clip(frames: usize, w: usize, h: usize) -> Vec<Frame420> {
    (0..frames)
        .map(|t| {
            let y = (0..w * h)
                .map(|i| {
                    let (x, y) = ((i % w) as f64, (i / w) as f64);
                    (60.0 + 0.4 * x + 0.3 * y + 20.0 * ((x + 2.0 * t as f64) / 17.0).sin()).round() as u8
                })
                .collect();
            let c = w.div_ceil(2) * h.div_ceil(2);
            Frame420::new(w, h, y, vec![120; c], vec![136; c]).unwrap()
        })
        .collect()
}

fn write_source(dir: &Path) -> PathBuf {
    let frames = smooth_clip(3, 192, 108);
    let path = dir.join("src.y4m");
    write_y4m_file(&path, &ClipHeader::new(192, 108, 30, 1), &frames).unwrap();
    path
}

fn codec_free_config(dir: &Path, methods: &[&str]) -> SweepConfig {
    let mut cfg = SweepConfig::new(
        vec![write_source(dir)],
        Track::X3Mobile,
        methods.iter().map(|m| Method::parse(m, None).unwrap()).collect(),
        dir.join("work"),
        dir.join("report.json"),
    );
    cfg.codec_free = true;
    cfg.jobs = 2;
    cfg
}

fn strip_volatile(mut r: SweepReport) -> SweepReport {
    for row in &mut r.rows {
        row.timestamp.clear();
        row.runtime_ms_per_frame = None;
    }
    r
}

#[test]
fn codec_free_sweep_rows_resume_and_baseline_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = codec_free_config(dir.path(), &[BASELINE, "bvi_rtvsr_x3"]);
    let report = crf_sweep(&cfg).unwrap();
    assert_eq!(report.rows.len(), 10);
    assert_eq!(report.mode, "codec-free");
    assert!(report.rows.iter().all(|r| r.status == RowStatus::Ok), "{:?}", report.rows);
    for r in &report.rows {
        if r.method == BASELINE {
            assert!(r.params.is_none() && r.macs_g_per_frame.is_none());
        } else {
            assert!(r.params.unwrap() > 0 && r.macs_g_per_frame.unwrap() <= 250.0);
        }
        assert!(r.bitrate_kbps.is_none());
    }
    let bytes = fs::read(&cfg.report).unwrap();
    assert_eq!(SweepReport::from_json(std::str::from_utf8(&bytes).unwrap()).unwrap(), report);

    // Rerunning a finished sweep touches nothing.
    crf_sweep(&cfg).unwrap();
    assert_eq!(fs::read(&cfg.report).unwrap(), bytes);
    let leftovers: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty());

    // Interrupted run: only some rows made it to disk.
    let mut partial = report.clone();
    partial.rows.retain(|r| r.crf <= 39 && r.method == BASELINE);
    partial.save_atomic(&cfg.report).unwrap();
    let resumed = crf_sweep(&cfg).unwrap();
    assert_eq!(strip_volatile(resumed), strip_volatile(report.clone()));

    let baseline_only = SweepReport {
        rows: report.rows.iter().filter(|r| r.method == BASELINE).cloned().collect(),
        ..report.clone()
    };
    let cmp = compare_baseline(&baseline_only).unwrap();
    assert_eq!(cmp.rows.len(), 5);
    for d in &cmp.rows {
        assert_eq!((d.d_psnr_y, d.d_ssim_y, d.d_ms_ssim_y), (0.0, 0.0, Some(0.0)));
    }
    assert!(cmp.overall.iter().all(|m| m.d_psnr_y == 0.0 && m.d_ssim_y == 0.0));

    let full = compare_baseline(&report).unwrap();
    assert_eq!(full.rows.len(), 10);
    assert_eq!(full.per_crf.len(), 10);
    assert_eq!(full.overall.len(), 2);
    let r0 = report.rows.iter().find(|r| r.method == "bvi_rtvsr_x3" && r.crf == 31).unwrap();
    let b0 = report.rows.iter().find(|r| r.method == BASELINE && r.crf == 31).unwrap();
    let d0 = full.rows.iter().find(|d| d.method == "bvi_rtvsr_x3" && d.crf == 31).unwrap();
    assert_eq!(d0.d_psnr_y, r0.psnr_y.unwrap() - b0.psnr_y.unwrap());
}

#[test]
fn missing_baseline_names_the_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = codec_free_config(dir.path(), &["bvi_rtvsr_x3"]);
    cfg.crfs = vec![47];
    let report = crf_sweep(&cfg).unwrap();
    match compare_baseline(&report) {
        Err(BenchError::MissingBaseline { clip, crf }) => {
            assert_eq!(clip, cfg.sources[0].name);
            assert_eq!(crf, 47);
        }
        other => panic!("expected MissingBaseline, got {other:?}"),
    }
}

#[test]
fn lanczos_beats_nearest_on_smooth_content() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = codec_free_config(dir.path(), &[BASELINE, "nearest_baseline"]);
    cfg.crfs = vec![31];
    let report = crf_sweep(&cfg).unwrap();
    let psnr = |m: &str| report.rows.iter().find(|r| r.method == m).unwrap().psnr_y.unwrap();
    assert!(psnr(BASELINE) >= psnr("nearest_baseline"));

    // Same ordering with nearest on both legs.
    let src = common::ramp_frame(192, 108);
    let round_trip = |f: FilterSpec| {
        let lr = downscale_420(&src, 3, f).unwrap();
        psnr_y(&src, &resize_420(&lr, 192, 108, f).unwrap()).unwrap()
    };
    assert!(round_trip(FilterSpec::LANCZOS5) >= round_trip(FilterSpec::Nearest));
}

#[test]
fn unreadable_source_fails_rows_without_aborting() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = codec_free_config(dir.path(), &[BASELINE]);
    cfg.crfs = vec![31, 63];
    let good = cfg.sources[0].clone();
    cfg.sources.insert(
        0,
        Source {
            name: "missing.y4m".into(),
            path: dir.path().join("missing.y4m"),
        },
    );
    let report = crf_sweep(&cfg).unwrap();
    assert_eq!(report.rows.len(), 4);
    for r in &report.rows {
        if r.source == good.name {
            assert_eq!(r.status, RowStatus::Ok);
        } else {
            assert_eq!(r.status, RowStatus::Failed);
            assert!(r.error.as_deref().is_some_and(|e| !e.is_empty()));
        }
    }
}

#[test]
fn model_weights_mismatch_is_recorded_per_row() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("w.evsrw");
    let mut ws = ModelId::BviRtvsrX3.build(evsr::nn::Form::Fused).export_weights();
    ws.remove("body.0.weight");
    ws.save(&weights).unwrap();
    let mut cfg = codec_free_config(dir.path(), &[BASELINE]);
    cfg.crfs = vec![55];
    cfg.methods.push(Method::Model {
        id: ModelId::BviRtvsrX3,
        weights: Some(weights),
    });
    let report = crf_sweep(&cfg).unwrap();
    let bad = report.rows.iter().find(|r| r.method == "bvi_rtvsr_x3").unwrap();
    assert_eq!(bad.status, RowStatus::Failed);
    assert!(bad.error.as_deref().unwrap().contains("body.0.weight"));
}

#[test]
fn report_formats() {
    let empty = SweepReport::empty(Track::X4General);
    let csv = String::from_utf8(emit_report(&empty, ReportFormat::Csv)).unwrap();
    assert_eq!(csv.trim_end(), CSV_COLUMNS.join(","));
    assert!(parse_csv_rows(csv.as_bytes()).unwrap().is_empty());

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = codec_free_config(dir.path(), &[BASELINE, "bvi_rtvsr_x3"]);
    cfg.crfs = vec![31, 63];
    cfg.keep_outputs = true;
    let mut report = crf_sweep(&cfg).unwrap();
    assert!(report.rows.iter().all(|r| r.vmaf_command.as_deref().is_some_and(|c| c.contains("libvmaf"))));
    report.rows[0].error = Some("quote \"and\", comma".into());
    report.rows[1].psnr_y = Some(f64::INFINITY);

    let json = String::from_utf8(emit_report(&report, ReportFormat::Json)).unwrap();
    assert!(json.contains("\"schema\": 1"));
    assert!(json.contains("\"psnr_y\": \"inf\""));
    let first_psnr = report.rows[0].psnr_y.unwrap();
    assert!(json.contains(&format!("\"psnr_y\": {first_psnr:.6}")));

    let parsed = SweepReport::from_json(&json).unwrap();
    let csv = emit_report(&parsed, ReportFormat::Csv);
    let rows = parse_csv_rows(&csv).unwrap();
    let rebuilt = SweepReport {
        rows,
        ..parsed.clone()
    };
    assert_eq!(rebuilt, parsed);
    assert_eq!(String::from_utf8(emit_report(&rebuilt, ReportFormat::Json)).unwrap(), json);

    let md = String::from_utf8(emit_report(&report, ReportFormat::Markdown)).unwrap();
    assert!(md.contains("## Track x3_mobile (x3)"));
    assert!(md.contains("| Method | PSNR-Y (dB) |"));
    let baseline_line = md.lines().find(|l| l.starts_with("| lanczos_baseline |")).unwrap();
    // Params and MACs columns are dashes for the classical scaler.
    let cols: Vec<&str> = baseline_line.split('|').map(str::trim).collect();
    assert_eq!((cols[6], cols[7]), ("-", "-"));
}

#[test]
fn codec_sweep_psnr_falls_with_crf_when_encoder_present() {
    let encoder = EncoderConfig::default().resolve();
    if let Err(reason) = probe_encoder(&encoder) {
        eprintln!("skipped: {reason}");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = codec_free_config(dir.path(), &[BASELINE]);
    cfg.codec_free = false;
    let report = crf_sweep(&cfg).unwrap();
    assert_eq!(report.mode, "codec");
    let psnr: Vec<f64> = report.rows.iter().map(|r| r.psnr_y.unwrap()).collect();
    for w in psnr.windows(2) {
        assert!(w[1] <= w[0] + 0.05, "{psnr:?}");
    }
}

#[test]
fn config_file_loads_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let toml = "sources = [\"src.y4m\"]\ntrack = \"x4_general\"\ncrfs = [63]\nmethods = [\"lanczos_baseline\", \"safm_lite_x4\"]\nworkdir = \"w\"\nreport = \"r.json\"\ncodec_free = true\n";
    let path = dir.path().join("sweep.toml");
    fs::write(&path, toml).unwrap();
    let cfg = SweepConfig::load(&path).unwrap();
    assert_eq!(cfg.report, dir.path().join("r.json"));
    assert_eq!(cfg.methods[1].name(), "safm_lite_x4");
    let frames: Vec<Frame420> = common::synthetic_clip(2, 64, 36, 3);
    write_y4m_file(&dir.path().join("src.y4m"), &ClipHeader::new(64, 36, 25, 1), &frames).unwrap();
    let report = crf_sweep(&cfg).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows.iter().all(|r| r.status == RowStatus::Ok), "{:?}", report.rows);
}
