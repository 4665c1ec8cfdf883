use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use consuq::config::{Overrides, PipelineConfig};
use consuq::conservation::EvaluationMode;
use consuq::ingest::{self, FrameReader, IngestError, InputFormat};
use consuq::pipeline::{ReportStream, WindowReport};
use consuq::propagation::CombineMode;
use consuq::report::{self, PlotWriter, DEFAULT_HISTOGRAM_BINS};
use consuq::synth::{self, ScenarioSpec};

#[derive(Parser)]
#[command(name = "consuq", version, about = "Measurement uncertainty from conservation-law violations")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate uncertainties window by window and check the safety limit.
    Run(RunArgs),
    /// Compare conservation and baseline estimates on a scanner recording.
    ValidateScanner(ValidateArgs),
    /// Generate a synthetic stream and its ground-truth sidecar.
    Synth(SynthArgs),
    /// Validate a configuration and print it with defaults filled in.
    CheckConfig(CheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Conservation,
    Baseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum Propagation {
    AsPrinted,
    GumSquared,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Csv,
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum OutputFormat {
    #[default]
    Jsonl,
    Summary,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(short, long)]
    config: PathBuf,
    /// Input frames; `-` reads stdin.
    #[arg(short, long, default_value = "-")]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "jsonl")]
    input_format: Format,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    window_size: Option<usize>,
    #[arg(long)]
    confidence: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long, value_enum)]
    propagation: Option<Propagation>,
    /// Report destination; `-` writes stdout.
    #[arg(short, long, default_value = "-")]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "jsonl")]
    format: OutputFormat,
    /// Also write bootstrap histograms as CSV.
    #[arg(long)]
    plot_data: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_HISTOGRAM_BINS)]
    bins: usize,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Manufacturer uncertainty, meters.
    #[arg(long, requires = "datasheet_range")]
    datasheet_u: Option<f64>,
    /// Range the manufacturer figure refers to, meters.
    #[arg(long, requires = "datasheet_u")]
    datasheet_range: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    /// Scenario, JSON or TOML (by extension).
    #[arg(short, long)]
    scenario: PathBuf,
    /// Frames as JSONL; `-` writes stdout.
    #[arg(short, long, default_value = "-")]
    output: PathBuf,
    /// Ground-truth sidecar, JSON.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_frames: Option<usize>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(short, long)]
    config: PathBuf,
}

type Failure = Box<dyn std::error::Error>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::ValidateScanner(a) => validate_scanner(a),
        Command::Synth(a) => generate(a),
        Command::CheckConfig(a) => check_config(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn open_input(path: &Path) -> Result<Box<dyn BufRead>, Failure> {
    if path == Path::new("-") {
        Ok(Box::new(io::stdin().lock()))
    } else {
        let f = File::open(path).map_err(|e| format!("cannot open {}: {e}", path.display()))?;
        Ok(Box::new(BufReader::new(f)))
    }
}

fn open_output(path: &Path) -> Result<Box<dyn Write>, Failure> {
    if path == Path::new("-") {
        Ok(Box::new(BufWriter::new(io::stdout().lock())))
    } else {
        let f = File::create(path).map_err(|e| format!("cannot create {}: {e}", path.display()))?;
        Ok(Box::new(BufWriter::new(f)))
    }
}

fn load_config(args: &PipelineArgs, extra: Overrides) -> Result<PipelineConfig, Failure> {
    let mut config = PipelineConfig::from_file(&args.config)?;
    Overrides {
        seed: args.seed,
        window_size: args.window_size,
        confidence: args.confidence,
        workers: args.workers,
        ..extra
    }
    .apply(&mut config);
    config.validate()?;
    Ok(config)
}

/// Stops at the first fatal ingest error and keeps it.
struct Frames<'a, R> {
    reader: &'a mut FrameReader<R>,
    fatal: &'a mut Option<IngestError>,
}

impl<R: BufRead> Iterator for Frames<'_, R> {
    type Item = consuq::frame::MeasurementFrame;

    fn next(&mut self) -> Option<Self::Item> {
        if self.fatal.is_some() {
            return None;
        }
        match self.reader.next()? {
            Ok(f) => Some(f),
            Err(e) => {
                *self.fatal = Some(e);
                None
            }
        }
    }
}

fn input_format(f: Format) -> InputFormat {
    match f {
        Format::Jsonl => InputFormat::Jsonl,
        Format::Csv => InputFormat::Csv,
    }
}

/// Drives the pipeline over the input and hands each report to `sink`.
fn drive(
    config: PipelineConfig,
    args: &PipelineArgs,
    mut sink: impl FnMut(&WindowReport) -> Result<(), Failure>,
) -> Result<(), Failure> {
    let input = open_input(&args.input)?;
    let mut reader = FrameReader::new(input, input_format(args.input_format), config.scan_geometry);
    let mut fatal = None;
    let frames = Frames {
        reader: &mut reader,
        fatal: &mut fatal,
    };
    let mut stream = ReportStream::new(config, frames)?;
    let mut windows = 0u64;
    for report in stream.by_ref() {
        sink(&report)?;
        windows += 1;
    }
    let dropped = stream.dropped();
    drop(stream);
    if let Some(e) = fatal {
        return Err(e.into());
    }
    let stats = reader.stats();
    log::info!(
        "{windows} windows, {} records, {} skipped, {dropped} trailing frames dropped",
        stats.total_records,
        stats.skipped
    );
    if stats.skipped > 0 {
        log::warn!("{} malformed records skipped", stats.skipped);
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<bool, Failure> {
    let config = load_config(
        &args.pipeline,
        Overrides {
            mode: args.mode.map(|m| match m {
                Mode::Conservation => EvaluationMode::Conservation,
                Mode::Baseline => EvaluationMode::Baseline,
            }),
            propagation: args.propagation.map(|p| match p {
                Propagation::AsPrinted => CombineMode::AsPrinted,
                Propagation::GumSquared => CombineMode::GumSquared,
            }),
            ..Overrides::default()
        },
    )?;
    let checks_safety = config.risk.is_some();
    let mut out = open_output(&args.output)?;
    let mut plot = match &args.plot_data {
        Some(p) => Some(PlotWriter::new(open_output(p)?, args.bins)),
        None => None,
    };
    let (mut passed, mut failed, mut undecided) = (0u64, 0u64, 0u64);
    drive(config, &args.pipeline, |r| {
        match args.format {
            OutputFormat::Jsonl => report::write_jsonl(&mut out, r)?,
            OutputFormat::Summary => report::write_summary(&mut out, r)?,
        }
        if let Some(p) = plot.as_mut() {
            p.write(r)?;
        }
        match r.passed() {
            Some(true) => passed += 1,
            Some(false) => failed += 1,
            None if checks_safety => undecided += 1,
            None => {}
        }
        Ok(())
    })?;
    out.flush()?;
    if let Some(p) = plot.as_mut() {
        p.flush()?;
    }
    if checks_safety {
        log::info!("{passed} windows pass, {failed} fail, {undecided} without verdict");
        if undecided > 0 {
            log::warn!("{undecided} windows produced no verdict and count as failures");
        }
    }
    Ok(failed == 0 && undecided == 0)
}

#[derive(Default)]
struct Tally {
    windows: usize,
    u_sum: f64,
    rel_sum: f64,
    rel_n: usize,
}

impl Tally {
    fn add(&mut self, r: &WindowReport) {
        if let Some(p) = &r.pooled {
            self.windows += 1;
            self.u_sum += p.u;
            if let Some(rel) = p.relative {
                self.rel_sum += rel;
                self.rel_n += 1;
            }
        }
    }

    fn mean(&self) -> Option<f64> {
        (self.windows > 0).then(|| self.u_sum / self.windows as f64)
    }

    fn mean_relative(&self) -> Option<f64> {
        (self.rel_n > 0).then(|| self.rel_sum / self.rel_n as f64)
    }
}

fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.4}%", v * 100.0))
}

fn validate_scanner(args: ValidateArgs) -> Result<bool, Failure> {
    let mut tallies = Vec::new();
    for mode in [EvaluationMode::Conservation, EvaluationMode::Baseline] {
        let config = load_config(
            &args.pipeline,
            Overrides {
                mode: Some(mode),
                ..Overrides::default()
            },
        )?;
        let mut tally = Tally::default();
        drive(config, &args.pipeline, |r| {
            tally.add(r);
            Ok(())
        })?;
        if tally.windows == 0 {
            return Err(format!("no window produced an estimate in {mode:?} mode").into());
        }
        tallies.push(tally);
    }
    let (cons, base) = (&tallies[0], &tallies[1]);
    let mut ok = true;
    println!("windows        {}", cons.windows);
    println!(
        "conservation   u = {:.6e} m  ({})",
        cons.mean().unwrap_or(f64::NAN),
        percent(cons.mean_relative())
    );
    println!(
        "baseline       u = {:.6e} m  ({})",
        base.mean().unwrap_or(f64::NAN),
        percent(base.mean_relative())
    );
    if let (Some(u), Some(range)) = (args.datasheet_u, args.datasheet_range) {
        if !(u >= 0.0 && range > 0.0) {
            return Err("data sheet values must be non-negative with a positive range".into());
        }
        println!("data sheet     u = {u:.6e} m  ({})", percent(Some(u / range)));
        let est = cons.mean_relative().unwrap_or(cons.u_sum / cons.windows as f64 / range);
        ok = est <= u / range;
        println!(
            "conservation estimate is {} the data sheet figure",
            if ok { "within" } else { "above" }
        );
    }
    Ok(ok)
}

fn generate(args: SynthArgs) -> Result<bool, Failure> {
    let text = std::fs::read_to_string(&args.scenario)
        .map_err(|e| format!("cannot read {}: {e}", args.scenario.display()))?;
    let mut spec: ScenarioSpec = if args.scenario.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text)?
    } else {
        serde_json::from_str(&text)?
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(n) = args.n_frames {
        spec.n_frames = n;
    }
    let mut out = open_output(&args.output)?;
    if let Some(path) = &args.truth {
        let (frames, truth) = synth::generate(&spec)?;
        for f in &frames {
            ingest::write_frame(&mut out, f)?;
        }
        let mut t = open_output(path)?;
        serde_json::to_writer_pretty(&mut t, &truth)?;
        t.write_all(b"\n")?;
        t.flush()?;
    } else {
        for f in synth::FrameStream::new(&spec)? {
            ingest::write_frame(&mut out, &f)?;
        }
    }
    out.flush()?;
    Ok(true)
}

fn check_config(args: CheckArgs) -> Result<bool, Failure> {
    let config = PipelineConfig::from_file(&args.config)?;
    config.validate()?;
    print!("{}", config.to_toml_string());
    Ok(true)
}
