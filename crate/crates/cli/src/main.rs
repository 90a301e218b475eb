//! Command-line driver for the smoothing simulator and the fluid-queue
//! solver.
//!
//! Four subcommands: `analyze` (trace statistics), `smooth` (one smoothing
//! run), `fluid` (analytic buffer model, optionally cross-checked against
//! the Monte Carlo oracle), and `compare` (two smoothing runs side by
//! side). Every command is deterministic for a fixed argv: all randomness
//! is seeded, and rerunning overwrites output files byte-identically.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numeric-quality error.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vsmooth::channel::{
    aggregate_feedback, parse_channel, synth_channel, AvgPolicy, ChannelFeed, DEFAULT_TTI,
};
use vsmooth::fluid::{self, FluidParams};
use vsmooth::metrics::{run_metrics, to_csv_row, RunMetrics};
use vsmooth::smoother::{
    billing, billing_text, log_to_csv, make_config, run, BillingStatement, LogRecord, RateLabel,
    SmootherConfig, SmootherMode, TransmissionLog, DEFAULT_RTP_PERIOD,
};
use vsmooth::trace::{
    parse_trace, synth_trace, to_csv as trace_to_csv, trace_stats, FrameTrace, KindParams,
    TraceFormat,
};

#[derive(Parser)]
#[command(name = "vsmooth", version, about = "VBR smoothing simulator and fluid-queue solver")]
struct Cli {
    #[command(flatten)]
    globals: Globals,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Globals {
    /// Directory the command writes its output files into.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for every random draw the command makes.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output file format.
    #[arg(long, global = true, value_enum)]
    format: Option<OutFormat>,
    /// Flat key=value file supplying defaults for any flag; flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print and save summary statistics of a frame-size trace.
    Analyze(AnalyzeArgs),
    /// Run the smoother once and save the log, billing, and metrics.
    Smooth(SmoothArgs),
    /// Solve the analytic buffer model and save the summary and CDF grid.
    Fluid(FluidArgs),
    /// Run two experiments and tabulate their metrics side by side.
    Compare(CompareArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Frame-size trace file.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
    /// Input trace format.
    #[arg(long, value_enum, value_name = "FMT")]
    trace_format: Option<TraceFmt>,
    /// Generate the trace instead: key=value pairs (gop=, mean-i=, mean-p=,
    /// mean-b=, jitter=, frames=, fps=, name=).
    #[arg(long, num_args = 1.., value_name = "KEY=VALUE")]
    synth: Option<Vec<String>>,
    /// Also write the (parsed or generated) trace as CSV to this path.
    #[arg(long, value_name = "FILE")]
    emit_trace: Option<PathBuf>,
}

#[derive(Args)]
struct SmoothArgs {
    /// Frame-size trace file.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
    /// Input trace format.
    #[arg(long, value_enum, value_name = "FMT")]
    trace_format: Option<TraceFmt>,
    /// Generate the trace instead: key=value pairs as in `analyze`.
    #[arg(long, num_args = 1.., value_name = "KEY=VALUE")]
    synth: Option<Vec<String>>,
    /// Rate-selection variant.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Variability inflation of the target rate over the trace mean.
    #[arg(long)]
    alpha: Option<f64>,
    /// Startup buffer level as a multiple of the lower threshold.
    #[arg(long)]
    prefill_multiple: Option<f64>,
    /// Buffer capacity in bytes (unbounded when absent).
    #[arg(long)]
    capacity: Option<u64>,
    /// Transmission step length in seconds.
    #[arg(long)]
    rtp_period: Option<f64>,
    /// Channel trace file providing per-step feedback.
    #[arg(long, value_name = "FILE")]
    channel: Option<PathBuf>,
    /// Generate the channel instead: key=value pairs (mean=, rel-stddev=,
    /// ttis=, tti=, prbs-per-alloc=, alloc-every=, max-prbs=).
    #[arg(long, num_args = 1.., value_name = "KEY=VALUE")]
    channel_synth: Option<Vec<String>>,
    /// Collapse the channel feedback to its per-run mean.
    #[arg(long)]
    freeze_feedback: bool,
    /// Skip smoothing: log the unsmoothed per-frame stream instead.
    #[arg(long)]
    no_smooth: bool,
}

#[derive(Args)]
struct FluidArgs {
    /// Model parameters as a key=value file (n, rho, beta, lambda, cer_t,
    /// alpha, a1, a2, k). Exclusive with the individual parameter flags.
    #[arg(long, value_name = "FILE")]
    params: Option<PathBuf>,
    /// Number of ON-OFF sources.
    #[arg(long)]
    n: Option<usize>,
    /// OFF-to-ON transition rate.
    #[arg(long)]
    rho: Option<f64>,
    /// ON-to-OFF transition rate.
    #[arg(long)]
    beta: Option<f64>,
    /// Fluid rate of one ON source.
    #[arg(long)]
    lambda: Option<f64>,
    /// Target service rate of the middle region.
    #[arg(long)]
    cer_t: Option<f64>,
    /// Service-rate spread: the regions drain at cer_t*(1-alpha), cer_t,
    /// cer_t*(1+alpha).
    #[arg(long)]
    alpha: Option<f64>,
    /// Lower buffer threshold.
    #[arg(long)]
    a1: Option<f64>,
    /// Upper buffer threshold.
    #[arg(long)]
    a2: Option<f64>,
    /// Buffer capacity.
    #[arg(long)]
    k: Option<f64>,
    /// Number of levels in the CDF output grid.
    #[arg(long, value_name = "N")]
    grid_points: Option<usize>,
    /// Cross-check the solution against the Monte Carlo oracle.
    #[arg(long)]
    validate_mc: bool,
    /// Simulated horizon in seconds for the oracle (defaults to roughly a
    /// million source transitions).
    #[arg(long, value_name = "S")]
    horizon: Option<f64>,
}

#[derive(Args)]
struct CompareArgs {
    /// Experiment config file for the left column (smooth keys plus seed).
    left: PathBuf,
    /// Experiment config file for the right column.
    right: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum TraceFmt {
    /// index,kind,size_bytes with optional #fps=/#name= directives.
    Csv,
    /// Whitespace columns with a #cols directive.
    Asu,
}

impl TraceFmt {
    fn as_format(self) -> TraceFormat {
        match self {
            TraceFmt::Csv => TraceFormat::Csv,
            TraceFmt::Asu => TraceFormat::Asu,
        }
    }

    fn parse(s: &str) -> Result<TraceFmt> {
        match s {
            "csv" => Ok(TraceFmt::Csv),
            "asu" => Ok(TraceFmt::Asu),
            other => bail!("unknown trace format {other:?}; expected csv or asu"),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Credit,
    Feedback,
}

impl ModeArg {
    fn as_mode(self) -> SmootherMode {
        match self {
            ModeArg::Baseline => SmootherMode::Baseline,
            ModeArg::Credit => SmootherMode::CreditGated,
            ModeArg::Feedback => SmootherMode::Feedback,
        }
    }

    fn parse(s: &str) -> Result<ModeArg> {
        match s {
            "baseline" => Ok(ModeArg::Baseline),
            "credit" => Ok(ModeArg::Credit),
            "feedback" => Ok(ModeArg::Feedback),
            other => bail!("unknown mode {other:?}; expected baseline, credit or feedback"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            // Degenerate parameter points and failed quality gates are
            // numeric verdicts; everything else is a usage or input fault.
            match err.downcast_ref::<vsmooth::Error>() {
                Some(vsmooth::Error::Degenerate(_)) | Some(vsmooth::Error::Numeric(_)) => {
                    ExitCode::from(3)
                }
                _ => ExitCode::from(2),
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let conf = Config::load(cli.globals.config.as_deref())?;
    let out = match cli.globals.out {
        Some(dir) => dir,
        None => PathBuf::from(conf.string("out")?.unwrap_or_else(|| ".".into())),
    };
    let seed = match cli.globals.seed {
        Some(s) => s,
        None => conf.u64("seed")?.unwrap_or(42),
    };
    // Only CSV output exists; the flag still validates its argument.
    if cli.globals.format.is_none() {
        if let Some(f) = conf.string("format")? {
            if f != "csv" {
                bail!("unknown output format {f:?}; expected csv");
            }
        }
    }
    match cli.cmd {
        Cmd::Analyze(args) => cmd_analyze(&out, seed, args, &conf),
        Cmd::Smooth(args) => cmd_smooth(&out, seed, args, &conf),
        Cmd::Fluid(args) => cmd_fluid(&out, seed, args, &conf),
        Cmd::Compare(args) => cmd_compare(&out, seed, args, &conf),
    }
}

const GLOBAL_KEYS: &[&str] = &["out", "seed", "format"];
const ANALYZE_KEYS: &[&str] = &["trace", "trace-format", "synth", "emit-trace"];
const SMOOTH_KEYS: &[&str] = &[
    "trace",
    "trace-format",
    "synth",
    "mode",
    "alpha",
    "prefill-multiple",
    "capacity",
    "rtp-period",
    "channel",
    "channel-synth",
    "freeze-feedback",
    "no-smooth",
];
const FLUID_KEYS: &[&str] = &[
    "params",
    "n",
    "rho",
    "beta",
    "lambda",
    "cer-t",
    "alpha",
    "a1",
    "a2",
    "k",
    "grid-points",
    "validate-mc",
    "horizon",
];

/// Flat key=value config text. Keys mirror the long flag names; `_` and `-`
/// are interchangeable. `#` starts a comment.
struct Config(Vec<(String, String)>);

impl Config {
    fn empty() -> Config {
        Config(Vec::new())
    }

    fn load(path: Option<&Path>) -> Result<Config> {
        match path {
            None => Ok(Config::empty()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Config::parse(&text).with_context(|| format!("in config {}", p.display()))
            }
        }
    }

    fn parse(text: &str) -> Result<Config> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value, got {line:?}", idx + 1))?;
            let key = key.trim().replace('_', "-");
            let value = value.trim().to_string();
            if key.is_empty() {
                bail!("line {}: empty key", idx + 1);
            }
            if entries.iter().any(|(k, _)| *k == key) {
                bail!("line {}: duplicate key {key:?}", idx + 1);
            }
            entries.push((key, value));
        }
        Ok(Config(entries))
    }

    /// Rejects keys outside the given sets, so a typo fails loudly instead
    /// of silently falling back to a default.
    fn check_known(&self, allowed: &[&[&str]]) -> Result<()> {
        for (key, _) in &self.0 {
            if !allowed.iter().any(|set| set.contains(&key.as_str())) {
                bail!("unknown config key {key:?}");
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn string(&self, key: &str) -> Result<Option<String>> {
        Ok(self.get(key).map(|v| v.to_string()))
    }

    fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.get(key).map(PathBuf::from))
    }

    fn f64(&self, key: &str) -> Result<Option<f64>> {
        self.get(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| anyhow!("config key {key}: expected a number, got {v:?}"))
            })
            .transpose()
    }

    fn u64(&self, key: &str) -> Result<Option<u64>> {
        self.get(key)
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|_| anyhow!("config key {key}: expected an integer, got {v:?}"))
            })
            .transpose()
    }

    fn usize(&self, key: &str) -> Result<Option<usize>> {
        self.get(key)
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| anyhow!("config key {key}: expected an integer, got {v:?}"))
            })
            .transpose()
    }

    fn bool(&self, key: &str) -> Result<Option<bool>> {
        self.get(key)
            .map(|v| match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                other => Err(anyhow!("config key {key}: expected a boolean, got {other:?}")),
            })
            .transpose()
    }

    /// Values like `synth=gop=G16B3,frames=1200` carry a nested key=value
    /// list in one config entry.
    fn kv_list(&self, key: &str) -> Result<Option<Vec<String>>> {
        Ok(self.get(key).map(|v| vec![v.to_string()]))
    }
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Splits `k=v` items (each possibly a comma-separated list of pairs) into
/// normalized pairs.
fn kv_pairs(items: &[String]) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for item in items {
        for part in item.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| anyhow!("expected key=value, got {part:?}"))?;
            let key = key.trim().replace('_', "-");
            if pairs.iter().any(|(k, _): &(String, String)| *k == key) {
                bail!("duplicate key {key:?}");
            }
            pairs.push((key, value.trim().to_string()));
        }
    }
    Ok(pairs)
}

fn kv_f64(pairs: &mut Vec<(String, String)>, key: &str) -> Result<Option<f64>> {
    match pairs.iter().position(|(k, _)| k == key) {
        None => Ok(None),
        Some(idx) => {
            let (_, v) = pairs.remove(idx);
            v.parse::<f64>()
                .map(Some)
                .map_err(|_| anyhow!("{key}: expected a number, got {v:?}"))
        }
    }
}

fn kv_usize(pairs: &mut Vec<(String, String)>, key: &str) -> Result<Option<usize>> {
    match pairs.iter().position(|(k, _)| k == key) {
        None => Ok(None),
        Some(idx) => {
            let (_, v) = pairs.remove(idx);
            v.parse::<usize>()
                .map(Some)
                .map_err(|_| anyhow!("{key}: expected an integer, got {v:?}"))
        }
    }
}

fn kv_u32(pairs: &mut Vec<(String, String)>, key: &str) -> Result<Option<u32>> {
    match pairs.iter().position(|(k, _)| k == key) {
        None => Ok(None),
        Some(idx) => {
            let (_, v) = pairs.remove(idx);
            v.parse::<u32>()
                .map(Some)
                .map_err(|_| anyhow!("{key}: expected an integer, got {v:?}"))
        }
    }
}

fn kv_string(pairs: &mut Vec<(String, String)>, key: &str) -> Option<String> {
    pairs
        .iter()
        .position(|(k, _)| k == key)
        .map(|idx| pairs.remove(idx).1)
}

fn kv_done(pairs: &[(String, String)], what: &str) -> Result<()> {
    if let Some((key, _)) = pairs.first() {
        bail!("unknown {what} key {key:?}");
    }
    Ok(())
}

/// Expands a compact GOP alias `G<n>B<k>` (n frames per GOP, k consecutive
/// B frames) into an explicit pattern: frame 0 is I, every (k+1)-th frame
/// after it is P, the rest are B. `G16B3` gives `IBBBPBBBPBBBPBBB`.
/// Anything that does not match the shape passes through as a literal
/// I/P/B pattern.
fn expand_gop(spec: &str) -> String {
    let Some(body) = spec.strip_prefix(['G', 'g']) else {
        return spec.to_string();
    };
    let Some((n_str, b_str)) = body.split_once(['B', 'b']) else {
        return spec.to_string();
    };
    let (Ok(n), Ok(b)) = (n_str.parse::<usize>(), b_str.parse::<usize>()) else {
        return spec.to_string();
    };
    if n == 0 {
        return spec.to_string();
    }
    let period = b.saturating_add(1);
    (0..n)
        .map(|i| {
            if i == 0 {
                'I'
            } else if i % period == 0 {
                'P'
            } else {
                'B'
            }
        })
        .collect()
}

/// Builds a trace from either a file or a synth spec; exactly one of the
/// two sources must be given.
fn resolve_trace(
    trace: Option<&Path>,
    format: TraceFmt,
    synth: Option<&[String]>,
    seed: u64,
) -> Result<FrameTrace> {
    match (trace, synth) {
        (Some(_), Some(_)) => bail!("give either --trace or --synth, not both"),
        (None, None) => bail!("a trace source is required: --trace FILE or --synth KEY=VALUE"),
        (Some(path), None) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading trace {}", path.display()))?;
            let t = parse_trace(&text, format.as_format())
                .with_context(|| format!("parsing trace {}", path.display()))?;
            Ok(t)
        }
        (None, Some(items)) => {
            let mut pairs = kv_pairs(items).context("in --synth")?;
            let gop = kv_string(&mut pairs, "gop").unwrap_or_else(|| "G16B3".into());
            let mean_i = kv_f64(&mut pairs, "mean-i")?.unwrap_or(10_000.0);
            let mean_p = kv_f64(&mut pairs, "mean-p")?.unwrap_or(4_000.0);
            let mean_b = kv_f64(&mut pairs, "mean-b")?.unwrap_or(1_000.0);
            let jitter = kv_f64(&mut pairs, "jitter")?.unwrap_or(0.3);
            let frames = kv_usize(&mut pairs, "frames")?.unwrap_or(4_800);
            let fps = kv_f64(&mut pairs, "fps")?.unwrap_or(30.0);
            let name = kv_string(&mut pairs, "name").unwrap_or_else(|| gop.clone());
            kv_done(&pairs, "--synth")?;
            let t = synth_trace(
                &expand_gop(&gop),
                KindParams { i: mean_i, p: mean_p, b: mean_b },
                KindParams::uniform(jitter),
                frames,
                fps,
                seed,
                name,
            )?;
            Ok(t)
        }
    }
}

/// Builds channel feedback from either a file or a synth spec. The synth
/// seed is offset from the trace seed so the two streams never share draws.
fn resolve_channel(
    channel: Option<&Path>,
    synth: Option<&[String]>,
    rtp_period: f64,
    seed: u64,
    freeze: bool,
) -> Result<Option<ChannelFeed>> {
    let (ct, policy, max_prbs) = match (channel, synth) {
        (Some(_), Some(_)) => bail!("give either --channel or --channel-synth, not both"),
        (None, None) => return Ok(None),
        (Some(path), None) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading channel {}", path.display()))?;
            let ct = parse_channel(&text)
                .with_context(|| format!("parsing channel {}", path.display()))?;
            // File traces carry rates only; the scheduling policy defaults
            // to one block per TTI unless overridden via --channel-synth.
            (ct, AvgPolicy { prbs_per_alloc: 1, alloc_every_n_ttis: 1 }, 1)
        }
        (None, Some(items)) => {
            let mut pairs = kv_pairs(items).context("in --channel-synth")?;
            let mean = kv_f64(&mut pairs, "mean")?
                .ok_or_else(|| anyhow!("--channel-synth requires mean= (per-block bits/second)"))?;
            let rel_stddev = kv_f64(&mut pairs, "rel-stddev")?.unwrap_or(0.1);
            let ttis = kv_usize(&mut pairs, "ttis")?.unwrap_or(60_000);
            let tti = kv_f64(&mut pairs, "tti")?.unwrap_or(DEFAULT_TTI);
            let prbs_per_alloc = kv_u32(&mut pairs, "prbs-per-alloc")?.unwrap_or(1);
            let alloc_every = kv_u32(&mut pairs, "alloc-every")?.unwrap_or(1);
            let max_prbs = kv_u32(&mut pairs, "max-prbs")?.unwrap_or(1);
            kv_done(&pairs, "--channel-synth")?;
            let ct = synth_channel(mean, rel_stddev, ttis, tti, seed.wrapping_add(1))?;
            (
                ct,
                AvgPolicy { prbs_per_alloc, alloc_every_n_ttis: alloc_every },
                max_prbs,
            )
        }
    };
    let feed = aggregate_feedback(&ct, rtp_period, policy, max_prbs)?;
    Ok(Some(if freeze { feed.frozen() } else { feed }))
}

fn cmd_analyze(out: &Path, seed: u64, args: AnalyzeArgs, conf: &Config) -> Result<()> {
    conf.check_known(&[GLOBAL_KEYS, ANALYZE_KEYS])?;
    let trace_path = args.trace.or(conf.path("trace")?);
    let format = match args.trace_format {
        Some(f) => f,
        None => match conf.string("trace-format")? {
            Some(s) => TraceFmt::parse(&s)?,
            None => TraceFmt::Csv,
        },
    };
    let synth = match args.synth {
        Some(items) => Some(items),
        None => conf.kv_list("synth")?,
    };
    let emit = args.emit_trace.or(conf.path("emit-trace")?);

    let trace = resolve_trace(trace_path.as_deref(), format, synth.as_deref(), seed)?;
    let stats = trace_stats(&trace);
    let text = format!(
        "name={}\nn_frames={}\nfps={}\nmean_frame_bytes={}\ncer_bps={}\nper_bps={}\n",
        trace.name(),
        stats.n_frames,
        stats.fps,
        stats.mean_frame_bytes,
        stats.cer,
        stats.per
    );
    print!("{text}");
    let csv = format!(
        "name,n_frames,fps,mean_frame_bytes,cer_bps,per_bps\n{},{},{},{},{},{}\n",
        trace.name(),
        stats.n_frames,
        stats.fps,
        stats.mean_frame_bytes,
        stats.cer,
        stats.per
    );
    write_out(out, "stats.csv", &csv)?;
    if let Some(path) = emit {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, trace_to_csv(&trace))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// One experiment's inputs after flag/config merging, before any file IO.
struct SmoothSpec {
    trace: Option<PathBuf>,
    trace_format: TraceFmt,
    synth: Option<Vec<String>>,
    mode: ModeArg,
    alpha: f64,
    prefill_multiple: f64,
    capacity: Option<u64>,
    rtp_period: f64,
    channel: Option<PathBuf>,
    channel_synth: Option<Vec<String>>,
    freeze_feedback: bool,
    no_smooth: bool,
    seed: u64,
}

impl SmoothSpec {
    fn from_flags(args: SmoothArgs, conf: &Config, seed: u64) -> Result<SmoothSpec> {
        Ok(SmoothSpec {
            trace: args.trace.or(conf.path("trace")?),
            trace_format: match args.trace_format {
                Some(f) => f,
                None => match conf.string("trace-format")? {
                    Some(s) => TraceFmt::parse(&s)?,
                    None => TraceFmt::Csv,
                },
            },
            synth: match args.synth {
                Some(items) => Some(items),
                None => conf.kv_list("synth")?,
            },
            mode: match args.mode {
                Some(m) => m,
                None => match conf.string("mode")? {
                    Some(s) => ModeArg::parse(&s)?,
                    None => ModeArg::Baseline,
                },
            },
            alpha: match args.alpha {
                Some(v) => v,
                None => conf.f64("alpha")?.unwrap_or(0.2),
            },
            prefill_multiple: match args.prefill_multiple {
                Some(v) => v,
                None => conf.f64("prefill-multiple")?.unwrap_or(1.0),
            },
            capacity: args.capacity.or(conf.u64("capacity")?),
            rtp_period: match args.rtp_period {
                Some(v) => v,
                None => conf.f64("rtp-period")?.unwrap_or(DEFAULT_RTP_PERIOD),
            },
            channel: args.channel.or(conf.path("channel")?),
            channel_synth: match args.channel_synth {
                Some(items) => Some(items),
                None => conf.kv_list("channel-synth")?,
            },
            freeze_feedback: args.freeze_feedback || conf.bool("freeze-feedback")?.unwrap_or(false),
            no_smooth: args.no_smooth || conf.bool("no-smooth")?.unwrap_or(false),
            seed,
        })
    }

    /// An experiment defined entirely by a config file (the `compare`
    /// sides); the file may override the shared seed.
    fn from_file(path: &Path, default_seed: u64) -> Result<SmoothSpec> {
        let conf = Config::load(Some(path))?;
        conf.check_known(&[&["seed"], SMOOTH_KEYS])
            .with_context(|| format!("in experiment {}", path.display()))?;
        let seed = conf.u64("seed")?.unwrap_or(default_seed);
        let args = SmoothArgs {
            trace: None,
            trace_format: None,
            synth: None,
            mode: None,
            alpha: None,
            prefill_multiple: None,
            capacity: None,
            rtp_period: None,
            channel: None,
            channel_synth: None,
            freeze_feedback: false,
            no_smooth: false,
        };
        SmoothSpec::from_flags(args, &conf, seed)
            .with_context(|| format!("in experiment {}", path.display()))
    }

    fn build(self) -> Result<Experiment> {
        let trace = resolve_trace(
            self.trace.as_deref(),
            self.trace_format,
            self.synth.as_deref(),
            self.seed,
        )?;
        let stats = trace_stats(&trace);
        let cfg = make_config(
            &stats,
            self.alpha,
            // The unsmoothed stream is logged per frame; its step is the
            // frame period regardless of the requested RTP quantum.
            if self.no_smooth { 1.0 / stats.fps } else { self.rtp_period },
            self.mode.as_mode(),
            self.prefill_multiple,
            self.capacity,
        )?;
        let feed = resolve_channel(
            self.channel.as_deref(),
            self.channel_synth.as_deref(),
            cfg.rtp_period,
            self.seed,
            self.freeze_feedback,
        )?;
        Ok(Experiment { trace, cfg, feed, no_smooth: self.no_smooth })
    }
}

/// A fully resolved experiment, ready to run.
struct Experiment {
    trace: FrameTrace,
    cfg: SmootherConfig,
    feed: Option<ChannelFeed>,
    no_smooth: bool,
}

impl Experiment {
    fn execute(&self) -> Result<(TransmissionLog, BillingStatement, RunMetrics)> {
        let (log, bill) = if self.no_smooth {
            unsmoothed_log(&self.trace, &self.cfg)
        } else {
            run(&self.trace, &self.cfg, self.feed.as_ref())?
        };
        let metrics = run_metrics(&log, &bill, &self.cfg)?;
        Ok((log, bill, metrics))
    }
}

/// The no-smoothing reference stream: each frame leaves within its own
/// frame period, so record k carries rate size_k*8*fps and moves the whole
/// frame. No ledger moves; the log's step is the frame period.
fn unsmoothed_log(trace: &FrameTrace, cfg: &SmootherConfig) -> (TransmissionLog, BillingStatement) {
    let records: Vec<LogRecord> = trace
        .frames()
        .iter()
        .map(|f| {
            let rate = f.size_bytes as f64 * 8.0 / cfg.tf;
            let label = match rate.partial_cmp(&cfg.cer_t).expect("rates are finite") {
                Ordering::Less => RateLabel::R1,
                Ordering::Equal => RateLabel::Cer,
                Ordering::Greater => RateLabel::R2,
            };
            LogRecord {
                time_s: trace.frame_time(f.index as usize),
                rate_bps: rate,
                sent_bytes: f.size_bytes,
                buffer_before: f.size_bytes,
                buffer_after: 0,
                label,
                credit_delta: 0.0,
                debt_delta: 0.0,
            }
        })
        .collect();
    let log = TransmissionLog {
        records,
        rtp_period: cfg.tf,
        overflow_events: 0,
        overflow_bytes: 0,
        startup_delay: 0.0,
    };
    let bill = billing(&log);
    (log, bill)
}

fn cmd_smooth(out: &Path, seed: u64, args: SmoothArgs, conf: &Config) -> Result<()> {
    conf.check_known(&[GLOBAL_KEYS, SMOOTH_KEYS])?;
    let spec = SmoothSpec::from_flags(args, conf, seed)?;
    let exp = spec.build()?;
    let (log, bill, metrics) = exp.execute()?;
    let row = to_csv_row(&metrics);
    write_out(out, "log.csv", &log_to_csv(&log))?;
    write_out(out, "billing.txt", &billing_text(&bill))?;
    write_out(out, "metrics.csv", &row)?;
    print!("{row}");
    Ok(())
}

fn cmd_compare(out: &Path, seed: u64, args: CompareArgs, conf: &Config) -> Result<()> {
    conf.check_known(&[GLOBAL_KEYS])?;
    let left = SmoothSpec::from_file(&args.left, seed)?.build()?;
    let right = SmoothSpec::from_file(&args.right, seed)?.build()?;
    // A side-by-side table only means something over the same input stream.
    if left.trace.frames() != right.trace.frames() || left.trace.fps() != right.trace.fps() {
        bail!(
            "compared experiments use different traces ({} vs {})",
            left.trace.name(),
            right.trace.name()
        );
    }
    // The runs share nothing, so they can proceed concurrently.
    let (lres, rres) = std::thread::scope(|s| {
        let lh = s.spawn(|| left.execute());
        let rh = s.spawn(|| right.execute());
        (
            lh.join().expect("experiment thread panicked"),
            rh.join().expect("experiment thread panicked"),
        )
    });
    let (_, _, lm) = lres.context("left experiment")?;
    let (_, _, rm) = rres.context("right experiment")?;
    let csv = compare_csv(&lm, &rm);
    write_out(out, "compare.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

/// Side-by-side metrics with a percentage-improvement column:
/// (left - right) / left * 100, so a positive entry means the right run
/// lowered the metric. Identical runs give exactly zero.
fn compare_csv(l: &RunMetrics, r: &RunMetrics) -> String {
    let rows: [(&str, f64, f64); 9] = [
        ("variability", l.variability, r.variability),
        ("p_r1", l.p_r1, r.p_r1),
        ("p_cer", l.p_cer, r.p_cer),
        ("p_r2", l.p_r2, r.p_r2),
        ("max_buffer_bytes", l.max_buffer as f64, r.max_buffer as f64),
        ("net_per_second", l.net_per_second, r.net_per_second),
        ("overflows", l.overflows as f64, r.overflows as f64),
        ("underflows", l.underflows as f64, r.underflows as f64),
        (
            "cer_t_obtained_ratio",
            l.cer_t_obtained_ratio,
            r.cer_t_obtained_ratio,
        ),
    ];
    let mut outp = String::from("metric,left,right,improvement_pct\n");
    for (name, lv, rv) in rows {
        // Equal values short-circuit to a clean zero (never -0 from a
        // negative base).
        let imp = if lv == rv || lv == 0.0 { 0.0 } else { (lv - rv) / lv * 100.0 };
        outp.push_str(&format!("{name},{lv},{rv},{imp}\n"));
    }
    outp
}

fn cmd_fluid(out: &Path, seed: u64, args: FluidArgs, conf: &Config) -> Result<()> {
    conf.check_known(&[GLOBAL_KEYS, FLUID_KEYS])?;
    let params_path = args.params.clone().or(conf.path("params")?);
    let params = match params_path {
        Some(path) => {
            let field_flags = args.n.is_some()
                || args.rho.is_some()
                || args.beta.is_some()
                || args.lambda.is_some()
                || args.cer_t.is_some()
                || args.alpha.is_some()
                || args.a1.is_some()
                || args.a2.is_some()
                || args.k.is_some();
            if field_flags {
                bail!("give --params or the individual parameter flags, not both");
            }
            let text = fs::read_to_string(&path)
                .with_context(|| format!("reading params {}", path.display()))?;
            fluid::parse_params(&text)
                .with_context(|| format!("parsing params {}", path.display()))?
        }
        None => {
            fn req<T>(flag: Option<T>, from_conf: Option<T>, key: &str) -> Result<T> {
                flag.or(from_conf)
                    .ok_or_else(|| anyhow!("missing model parameter {key} (flag or config)"))
            }
            FluidParams::new(
                req(args.n, conf.usize("n")?, "n")?,
                req(args.rho, conf.f64("rho")?, "rho")?,
                req(args.beta, conf.f64("beta")?, "beta")?,
                req(args.lambda, conf.f64("lambda")?, "lambda")?,
                req(args.cer_t, conf.f64("cer-t")?, "cer-t")?,
                req(args.alpha, conf.f64("alpha")?, "alpha")?,
                req(args.a1, conf.f64("a1")?, "a1")?,
                req(args.a2, conf.f64("a2")?, "a2")?,
                req(args.k, conf.f64("k")?, "k")?,
            )?
        }
    };
    let grid_points = match args.grid_points {
        Some(v) => v,
        None => conf.usize("grid-points")?.unwrap_or(201),
    };
    if grid_points < 2 {
        bail!("--grid-points must be at least 2, got {grid_points}");
    }
    let validate_mc = args.validate_mc || conf.bool("validate-mc")?.unwrap_or(false);
    let horizon = match args.horizon {
        Some(v) => Some(v),
        None => conf.f64("horizon")?,
    };

    let sol = fluid::solve(&params)?;
    let mut summary = fluid::summary_text(&sol);

    // A flat service profile must reproduce the plain one-region model; the
    // cross-check runs whenever the spread is exactly zero.
    let mut quality_failure: Option<String> = None;
    if params.alpha == 0.0 {
        let single = fluid::solve_single(&params)?;
        let mut worst = 0.0f64;
        for g in 0..1000 {
            let x = params.k * g as f64 / 999.0;
            let d = (sol.total_cdf(x) - single.total_cdf(x)).abs();
            if d > worst {
                worst = d;
            }
        }
        if worst <= 1e-8 {
            summary.push_str("single_regime_check=passed\n");
        } else {
            summary.push_str("single_regime_check=failed\n");
            quality_failure = Some(format!(
                "single-regime cross-check diverged by {worst:e} (tolerance 1e-8)"
            ));
        }
    }

    if validate_mc {
        let horizon = horizon.unwrap_or_else(|| fluid::horizon_for_transitions(&params, 1e6));
        let est = fluid::mc_oracle(&params, horizon, seed, &[])?;
        let reg = fluid::regime_probabilities(&sol);
        // Tolerances: 3 batch-means standard errors, plus a tiny absolute
        // floor where the simulator cannot resolve the analytic value (a
        // loss of 1e-12, or a stationary share a particle visits for less
        // than a second over the whole run).
        const REGIME_FLOOR: f64 = 2e-6;
        let checks = [
            (
                "throughput",
                fluid::throughput(&sol),
                est.throughput,
                3.0 * est.throughput_se,
            ),
            (
                "loss_probability",
                fluid::loss_probability(&sol),
                est.loss_probability,
                3.0 * est.loss_probability_se + 1e-12,
            ),
            ("p_low", reg.p_low, est.p_low, 3.0 * est.p_low_se + REGIME_FLOOR),
            ("p_mid", reg.p_mid, est.p_mid, 3.0 * est.p_mid_se + REGIME_FLOOR),
            (
                "p_high",
                reg.p_high,
                est.p_high,
                3.0 * est.p_high_se + REGIME_FLOOR,
            ),
        ];
        summary.push_str(&format!("mc_transitions={}\n", est.transitions));
        summary.push_str(&format!("mc_throughput={}\n", est.throughput));
        summary.push_str(&format!("mc_throughput_se={}\n", est.throughput_se));
        summary.push_str(&format!("mc_loss_probability={}\n", est.loss_probability));
        summary.push_str(&format!("mc_loss_probability_se={}\n", est.loss_probability_se));
        summary.push_str(&format!("mc_p_low={}\n", est.p_low));
        summary.push_str(&format!("mc_p_low_se={}\n", est.p_low_se));
        summary.push_str(&format!("mc_p_mid={}\n", est.p_mid));
        summary.push_str(&format!("mc_p_mid_se={}\n", est.p_mid_se));
        summary.push_str(&format!("mc_p_high={}\n", est.p_high));
        summary.push_str(&format!("mc_p_high_se={}\n", est.p_high_se));
        let mut all_pass = true;
        for (name, analytic, mc, tol) in &checks {
            let gap = (analytic - mc).abs();
            let pass = gap <= *tol;
            all_pass &= pass;
            summary.push_str(&format!(
                "check_{name}={}\n",
                if pass { "pass" } else { "fail" }
            ));
            if !pass && quality_failure.is_none() {
                quality_failure = Some(format!(
                    "simulation disagreement on {name}: analytic {analytic} vs simulated {mc} \
                     (gap {gap:e}, tolerance {tol:e})"
                ));
            }
        }
        summary.push_str(&format!(
            "mc_validation={}\n",
            if all_pass { "pass" } else { "fail" }
        ));
    }

    // Outputs land on disk even when a quality gate trips, so a failing
    // comparison can still be inspected.
    write_out(out, "summary.txt", &summary)?;
    write_out(out, "cdf.csv", &fluid::to_cdf_csv(&sol, grid_points))?;
    print!("{summary}");
    if let Some(message) = quality_failure {
        return Err(vsmooth::Error::Numeric(message).into());
    }
    Ok(())
}
