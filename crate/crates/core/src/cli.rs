//! Command-line front end.
//!
//! Machine-readable output goes to stdout or to files under `--out`;
//! progress and summaries go to stderr. Exit codes: 0 success, 1 user
//! error, 2 internal error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{
    emit_report, parse_cases, run_bench_with, BacKernel, BenchOptions, MacKernel, ReportFormat,
};
use crate::event_io::{
    gen_synthetic_bar, parse_events_auto, read_pgm, window_iter, write_event_csv, write_evt8,
    write_pgm, EventFrame, EventStream, SynthConfig,
};
use crate::kernels::FloatTensor;
use crate::model::{
    frames_tensor, load_pwrf, load_pwrq, model_stats, quantize_model, run_tensor, save_pwrf,
    save_pwrq, verify_layerwise, Engine, QuantModel, QuantizeOptions, RunOptions, Scheme,
    VerifyReport,
};
use crate::quantize::CalibrationMode;
use crate::train::{metrics_csv, train, Mode, TrainConfig, DEFAULT_SEED};

/// Environment variable capping internal parallelism (0 = automatic).
pub const THREADS_ENV: &str = "POWSHIFT_THREADS";

#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

fn user(e: impl std::fmt::Display) -> CliError {
    CliError::User(e.to_string())
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "powshift",
    version,
    about = "Power-of-two quantization toolkit for event-camera CNNs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FrameFormat {
    Pgm,
    Evtcsv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    Auto,
    Evt8,
    Csv,
    Pgm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EngineArg {
    Float,
    Mac,
    Bac,
}

impl From<EngineArg> for Engine {
    fn from(e: EngineArg) -> Self {
        match e {
            EngineArg::Float => Engine::Float,
            EngineArg::Mac => Engine::Mac,
            EngineArg::Bac => Engine::Bac,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportArg {
    Csv,
    Markdown,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Slice an event stream into frames, one file per window.
    Frames {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 10)]
        window_ms: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FrameFormat::Pgm)]
        format: FrameFormat,
        /// Input container; sniffed from the magic bytes by default.
        #[arg(long, value_enum, default_value_t = InputFormat::Auto)]
        input_format: InputFormat,
    },
    /// Quantize a float model.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scheme: String,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        exempt_first_last: bool,
        /// Calibrate on the symmetric percentile range instead of min/max.
        #[arg(long)]
        percentile: Option<f64>,
    },
    /// Run one frame (or every window of a stream) through a quantized model.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = EngineArg::Bac)]
        engine: EngineArg,
        /// Write each layer's output for the first frame here.
        #[arg(long)]
        taps: Option<PathBuf>,
    },
    /// Cross-check the three engines on random frames.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the toy network on the moving-bar task.
    Train {
        #[arg(long)]
        mode: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        /// Baseline PWRF for QAT modes; defaults to `<out>/baseline.pwrf`.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        exempt_first_last: bool,
        #[arg(long)]
        no_ema: bool,
        #[arg(long)]
        train_samples: Option<usize>,
        #[arg(long)]
        test_samples: Option<usize>,
    },
    /// Generate synthetic event streams.
    Gen {
        #[arg(long, default_value = "moving-bar")]
        task: String,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter counts and packed sizes of a quantized model.
    Stats {
        #[arg(long)]
        model: PathBuf,
    },
    /// Time the MAC and BAC kernels on the cases in a CSV file.
    Bench {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportArg::Csv)]
        format: ReportArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {}", describe(&e));
        return e.exit_code();
    }
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            e.exit_code()
        }
    }
}

fn describe(e: &CliError) -> &str {
    match e {
        CliError::User(m) | CliError::Internal(m) => m,
    }
}

fn configure_threads() -> CliResult {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| {
        user(format!(
            "{THREADS_ENV} must be a non-negative integer, got {v:?}"
        ))
    })?;
    // A pool may already exist when called repeatedly in one process.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

pub fn execute(cmd: Command) -> CliResult {
    match cmd {
        Command::Frames {
            input,
            window_ms,
            out,
            format,
            input_format,
        } => cmd_frames(&input, window_ms, &out, format, input_format),
        Command::Quantize {
            model,
            scheme,
            calib,
            out,
            exempt_first_last,
            percentile,
        } => cmd_quantize(
            &model,
            &scheme,
            calib.as_deref(),
            &out,
            exempt_first_last,
            percentile,
        ),
        Command::Infer {
            model,
            input,
            engine,
            taps,
        } => cmd_infer(&model, &input, engine.into(), taps.as_deref()),
        Command::Verify { model, n, seed } => cmd_verify(&model, n, seed),
        Command::Train {
            mode,
            out,
            seed,
            epochs,
            baseline,
            exempt_first_last,
            no_ema,
            train_samples,
            test_samples,
        } => {
            let mode: Mode = mode.parse().map_err(user)?;
            let mut cfg = TrainConfig::new(mode, seed);
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(n) = train_samples {
                cfg.train_samples = n;
            }
            if let Some(n) = test_samples {
                cfg.test_samples = n;
            }
            cfg.exempt_first_last = exempt_first_last;
            if no_ema {
                cfg.ema_decay = None;
            }
            cmd_train(&cfg, &out, baseline.as_deref())
        }
        Command::Gen { task, n, seed, out } => cmd_gen(&task, n, seed, &out),
        Command::Stats { model } => cmd_stats(&model),
        Command::Bench {
            cases,
            format,
            out,
            threads,
            seed,
        } => cmd_bench(&cases, format, out.as_deref(), threads, seed),
    }
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, bytes).map_err(|e| internal(format!("{}: {e}", path.display())))
}

fn make_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| internal(format!("{}: {e}", path.display())))
}

fn parse_stream(bytes: &[u8], format: InputFormat) -> CliResult<EventStream> {
    let parsed = match format {
        InputFormat::Auto => parse_events_auto(bytes),
        InputFormat::Evt8 => crate::event_io::parse_evt8(bytes),
        InputFormat::Csv => std::str::from_utf8(bytes)
            .map_err(|_| crate::event_io::EventError::MalformedRow(1))
            .and_then(crate::event_io::parse_event_csv),
        InputFormat::Pgm => return Err(user("PGM is a frame format, not an event stream")),
    };
    parsed.map_err(user)
}

/// The events of `stream` with timestamps in `[begin, end)`.
fn slice_stream(stream: &EventStream, begin: u64, end: u64) -> EventStream {
    let events = stream
        .events()
        .iter()
        .filter(|e| (begin..end).contains(&(e.t as u64)))
        .copied()
        .collect();
    EventStream::new(stream.width(), stream.height(), events).expect("subset of a valid stream")
}

pub fn cmd_frames(
    input: &Path,
    window_ms: u32,
    out: &Path,
    format: FrameFormat,
    input_format: InputFormat,
) -> CliResult {
    if window_ms == 0 {
        return Err(user("--window-ms must be positive"));
    }
    let tau = window_ms
        .checked_mul(1000)
        .ok_or_else(|| user("--window-ms too large"))?;
    let stream = parse_stream(&read(input)?, input_format)?;
    make_dir(out)?;
    let mut count = 0;
    for (k, frame) in window_iter(&stream, tau).enumerate() {
        match format {
            FrameFormat::Pgm => write(&out.join(format!("frame_{k:06}.pgm")), write_pgm(&frame))?,
            FrameFormat::Evtcsv => {
                let part = slice_stream(&stream, frame.t_begin(), frame.t_end());
                write(
                    &out.join(format!("frame_{k:06}.csv")),
                    write_event_csv(&part),
                )?
            }
        }
        count += 1;
    }
    eprintln!(
        "frames: {count} windows of {window_ms} ms written to {}",
        out.display()
    );
    Ok(())
}

/// Frames from a PGM file, or every window of an event stream.
fn load_frames(path: &Path, tau_us: u32) -> CliResult<Vec<EventFrame>> {
    let bytes = read(path)?;
    if bytes.starts_with(b"P5") {
        return Ok(vec![
            read_pgm(&bytes).map_err(|e| user(format!("{}: {e}", path.display())))?
        ]);
    }
    let stream = parse_events_auto(&bytes).map_err(|e| user(format!("{}: {e}", path.display())))?;
    Ok(window_iter(&stream, tau_us.max(1)).collect())
}

fn calibration_frames(dir: &Path, tau_us: u32, shape: [usize; 3]) -> CliResult<FloatTensor> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| user(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("pgm" | "evt8" | "csv")
            ) && p.file_name().is_some_and(|n| n != "labels.csv")
        })
        .collect();
    paths.sort();
    let mut frames = Vec::new();
    for p in &paths {
        frames.extend(load_frames(p, tau_us)?.into_iter().take(1));
    }
    let [_, h, w] = shape;
    if let Some(f) = frames
        .iter()
        .find(|f| (f.height() as usize, f.width() as usize) != (h, w))
    {
        return Err(user(format!(
            "calibration frame {}x{} does not match model input {w}x{h}",
            f.width(),
            f.height()
        )));
    }
    Ok(frames_tensor(&frames))
}

pub fn cmd_quantize(
    model: &Path,
    scheme: &str,
    calib: Option<&Path>,
    out: &Path,
    exempt_first_last: bool,
    percentile: Option<f64>,
) -> CliResult {
    let scheme: Scheme = scheme.parse().map_err(user)?;
    let float = load_pwrf(&read(model)?).map_err(user)?;
    let calib = match calib {
        Some(dir) => calibration_frames(dir, float.meta.tau_us, float.input_shape)?,
        None => FloatTensor {
            shape: [0, 1, 1, 1],
            data: vec![],
        },
    };
    let opts = QuantizeOptions {
        exempt_first_last,
        calibration: percentile.map_or(CalibrationMode::MinMax, CalibrationMode::Percentile),
    };
    let q = quantize_model(&float, &calib, scheme, opts).map_err(user)?;
    let bytes = save_pwrq(&q).map_err(internal)?;
    write(out, &bytes)?;
    println!("{}", model_stats(&q));
    eprintln!(
        "quantize: {scheme} model written to {} ({} bytes)",
        out.display(),
        bytes.len()
    );
    Ok(())
}

fn load_quant(path: &Path) -> CliResult<QuantModel> {
    load_pwrq(&read(path)?).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn tensor_text(t: &crate::model::Tensor) -> String {
    let values: Vec<String> = match t {
        crate::model::Tensor::Int8(q) => q.data.iter().map(i8::to_string).collect(),
        crate::model::Tensor::Float(f) => f.data.iter().map(f64::to_string).collect(),
    };
    values.join(",") + "\n"
}

pub fn cmd_infer(model: &Path, input: &Path, engine: Engine, taps: Option<&Path>) -> CliResult {
    let q = load_quant(model)?;
    let frames = load_frames(input, q.meta.tau_us)?;
    let [c, h, w] = q.input_shape;
    let mut header = vec!["frame".to_string(), "argmax".to_string()];
    let classes = q.output_shape().map_err(user)?.iter().product::<usize>();
    header.extend((0..classes).map(|k| format!("logit_{k}")));
    println!("{}", header.join(","));
    for (i, frame) in frames.iter().enumerate() {
        let x = frames_tensor(std::slice::from_ref(frame));
        if x.shape[1..] != [c, h, w] {
            return Err(user(format!(
                "shape mismatch: frame {}x{}, model expects {w}x{h}",
                frame.width(),
                frame.height()
            )));
        }
        let opts = RunOptions {
            keep_taps: taps.is_some() && i == 0,
        };
        let out = run_tensor(&q, &x, engine, opts).map_err(user)?;
        let row = &out.logits()[0];
        let mut cells = vec![i.to_string(), crate::model::argmax(row).to_string()];
        cells.extend(row.iter().map(|v| v.to_string()));
        println!("{}", cells.join(","));
        if let (Some(dir), true) = (taps, i == 0) {
            make_dir(dir)?;
            for (l, (tap, layer)) in out.taps.iter().zip(&q.layers).enumerate() {
                if let Some(t) = tap {
                    write(
                        &dir.join(format!("layer_{l:02}_{}.csv", layer.kind().name())),
                        tensor_text(t),
                    )?;
                }
            }
        }
    }
    eprintln!(
        "infer: {} frame(s) on the {} engine",
        frames.len(),
        engine.name()
    );
    Ok(())
}

/// Random frames with values in {-1, 0, 1}.
fn random_frames(n: usize, shape: [usize; 3], seed: u64) -> FloatTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: usize = shape.iter().product();
    FloatTensor {
        shape: [n, shape[0], shape[1], shape[2]],
        data: (0..n * per)
            .map(|_| rng.gen_range(-1i32..=1) as f64)
            .collect(),
    }
}

/// Worst-case check over `n` random frames; `Ok(report)` even when it fails.
pub fn verify_model(q: &QuantModel, n: usize, seed: u64) -> CliResult<VerifyReport> {
    let mut report = VerifyReport { layers: vec![] };
    let x = random_frames(n, q.input_shape, seed);
    let per: usize = q.input_shape.iter().product();
    for chunk in x.data.chunks(per * 16) {
        let t = FloatTensor {
            shape: [
                chunk.len() / per,
                q.input_shape[0],
                q.input_shape[1],
                q.input_shape[2],
            ],
            data: chunk.to_vec(),
        };
        report.merge(verify_layerwise(q, &t).map_err(user)?);
    }
    Ok(report)
}

pub fn cmd_verify(model: &Path, n: usize, seed: u64) -> CliResult {
    if n == 0 {
        return Err(user("--n must be at least 1"));
    }
    let q = load_quant(model)?;
    let report = verify_model(&q, n, seed)?;
    println!("layer,kind,engines_agree,max_lsb");
    for l in &report.layers {
        println!("{},{},{},{}", l.index, l.kind, l.engines_agree, l.max_lsb);
    }
    println!("worst_deviation_lsb: {}", report.worst_lsb());
    match report.first_failure(1) {
        None => {
            eprintln!("verify: {n} frames, all layers pass");
            Ok(())
        }
        Some(layer) => Err(user(format!("verification failed at layer {layer}"))),
    }
}

pub fn cmd_train(cfg: &TrainConfig, out: &Path, baseline: Option<&Path>) -> CliResult {
    let base = match cfg.mode {
        Mode::Baseline => None,
        _ => {
            let path = baseline.map_or_else(|| out.join("baseline.pwrf"), Path::to_path_buf);
            if !path.exists() {
                return Err(user(format!(
                    "quantization-aware modes need a trained baseline model; {} not found",
                    path.display()
                )));
            }
            Some(load_pwrf(&read(&path)?).map_err(user)?)
        }
    };
    let outcome = train(cfg, base.as_ref()).map_err(user)?;
    make_dir(out)?;
    let name = cfg.mode.name();
    write(
        &out.join(format!("metrics_{name}.csv")),
        metrics_csv(&outcome.metrics),
    )?;
    write(&out.join(format!("{name}.pwrf")), save_pwrf(&outcome.float))?;
    if let Some(q) = &outcome.quant {
        write(
            &out.join(format!("{name}.pwrq")),
            save_pwrq(q).map_err(internal)?,
        )?;
    }
    eprintln!(
        "train: mode {name}, {} epochs, test accuracy {:.4}, outputs in {}",
        outcome.metrics.len(),
        outcome.test_acc,
        out.display()
    );
    Ok(())
}

pub fn cmd_gen(task: &str, n: usize, seed: u64, out: &Path) -> CliResult {
    if task != "moving-bar" {
        return Err(user(format!(
            "unknown task {task:?}; supported: moving-bar"
        )));
    }
    make_dir(out)?;
    let cfg = SynthConfig::default();
    let mut labels = String::from("file,label\n");
    for i in 0..n {
        let direction = (i % 8) as u8;
        let (stream, label) =
            gen_synthetic_bar(direction, seed.wrapping_add(i as u64), &cfg).map_err(internal)?;
        let name = format!("sample_{i:05}.evt8");
        write(&out.join(&name), write_evt8(&stream))?;
        labels.push_str(&format!("{name},{label}\n"));
    }
    write(&out.join("labels.csv"), labels)?;
    eprintln!("gen: {n} moving-bar streams written to {}", out.display());
    Ok(())
}

pub fn cmd_stats(model: &Path) -> CliResult {
    let q = load_quant(model)?;
    println!("{}", model_stats(&q));
    Ok(())
}

pub fn cmd_bench(
    cases: &Path,
    format: ReportArg,
    out: Option<&Path>,
    threads: usize,
    seed: u64,
) -> CliResult {
    let text = String::from_utf8(read(cases)?).map_err(user)?;
    let cases = parse_cases(&text).map_err(user)?;
    let opts = BenchOptions {
        threads: threads.max(1),
        seed,
    };
    let report = run_bench_with(&cases, &MacKernel, &BacKernel, opts).map_err(user)?;
    let format = match format {
        ReportArg::Csv => ReportFormat::Csv,
        ReportArg::Markdown => ReportFormat::Markdown,
    };
    let text = emit_report(&report, format).map_err(user)?;
    match out {
        Some(path) => write(path, text)?,
        None => print!("{text}"),
    }
    eprintln!(
        "bench: {} case(s) timed after MAC/BAC agreement",
        cases.len()
    );
    Ok(())
}
