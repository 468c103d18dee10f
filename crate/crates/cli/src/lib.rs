//! Command-line driver for the stereo distance pipeline.
//!
//! `run` is the whole program; `main.rs` only forwards `std::env::args` and
//! the exit status, which keeps every subcommand testable in-process.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use uavdist_core::correction::{CorrectorStack, EstimateTrace, InferenceMode};
use uavdist_core::eval::{self, EvalReport, DEFAULT_BIN_BOUNDARY_M};
use uavdist_core::nn::{MixerConfig, TOKENS};
use uavdist_core::simdata as dataset_io;
use uavdist_core::training::{self, TrainConfig};
use uavdist_core::{BoundingBox, DeviationModel, SceneConfig, StereoRig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "uavdist",
    version,
    about = "Stereo distance estimation with learned position correction",
    args_override_self = true,
    propagate_version = true
)]
pub struct Cli {
    /// Stereo rig JSON; overrides the rig stored with a dataset or stack
    #[arg(long, global = true, value_name = "PATH")]
    rig: Option<PathBuf>,

    /// Seed for every random stream
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Flat `key = value` file of flag defaults; command-line flags win
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Progress and diagnostics on stderr
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic stereo detection dataset
    Simulate(SimulateArgs),
    /// Train a correction stack on a dataset
    Train(TrainArgs),
    /// Score a stack (or plain triangulation) on a dataset
    Eval(EvalArgs),
    /// Estimate the distance of a single detection pair
    Infer(InferArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Output dataset (JSON lines); the rig is written next to it
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Number of records
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Nearest target distance, meters
    #[arg(long, default_value_t = 5.0)]
    d_min: f64,
    /// Farthest target distance, meters
    #[arg(long, default_value_t = 30.0)]
    d_max: f64,
    /// Target width, meters
    #[arg(long, default_value_t = 0.88)]
    target_width: f64,
    /// Target height, meters
    #[arg(long, default_value_t = 0.5)]
    target_height: f64,
    /// Constant x bias of the left camera, pixels
    #[arg(long, default_value_t = 1.5, allow_hyphen_values = true)]
    alpha_l: f64,
    /// Constant x bias of the right camera, pixels
    #[arg(long, default_value_t = -1.5, allow_hyphen_values = true)]
    alpha_r: f64,
    /// Cubic radial deviation coefficient
    #[arg(long, default_value_t = 4.0, allow_hyphen_values = true)]
    beta: f64,
    /// Per-image vibration jitter, pixels
    #[arg(long, default_value_t = 0.5)]
    sigma_vib: f64,
    /// Detection noise, pixels
    #[arg(long, default_value_t = 0.3)]
    sigma_px: f64,
    /// Ideal cameras: ignore all deviation settings
    #[arg(long)]
    no_deviation: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training dataset (JSON lines)
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Output stack weights (JSON)
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Training log CSV [default: <out stem>.log.csv]
    #[arg(long, value_name = "PATH")]
    log: Option<PathBuf>,
    /// Validation dataset scored after every offset epoch
    #[arg(long, value_name = "PATH")]
    val: Option<PathBuf>,
    /// Number of correction stages
    #[arg(long, default_value_t = 2)]
    stages: usize,
    /// Epochs per training phase
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Peak learning rate
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-3)]
    weight_decay: f64,
    /// Global gradient-norm limit
    #[arg(long, default_value_t = 1.0)]
    clip_norm: f64,
    /// Fraction of each phase spent warming up
    #[arg(long, default_value_t = 0.05)]
    warmup_fraction: f64,
    /// Relative error above which a sample is hard
    #[arg(long, default_value_t = 0.06)]
    hard_threshold: f64,
    /// Gate loss weight
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Gate probability below which inference stops
    #[arg(long, default_value_t = 0.5)]
    gate_threshold: f64,
    /// Pixels per unit of offset output [default: rig half-diagonal]
    #[arg(long, value_name = "PX")]
    offset_scale: Option<f64>,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value_t = 32)]
    token_hidden: usize,
    #[arg(long, default_value_t = 32)]
    channel_hidden: usize,
    /// Mixer layers
    #[arg(long, default_value_t = 2)]
    layers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// Gates decide whether later stages run
    Gated,
    /// Every stage runs
    Forced,
    /// First stage only
    Pcm,
}

impl From<ModeArg> for InferenceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Gated => InferenceMode::Gated,
            ModeArg::Forced => InferenceMode::Forced,
            ModeArg::Pcm => InferenceMode::Truncated(1),
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Evaluation dataset (JSON lines)
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Stack weights (JSON)
    #[arg(long, value_name = "PATH", required_unless_present = "baseline")]
    stack: Option<PathBuf>,
    /// Score plain triangulation instead of a stack
    #[arg(long, conflicts_with = "stack")]
    baseline: bool,
    /// Inference mode
    #[arg(long, value_enum, default_value_t = ModeArg::Gated)]
    mode: ModeArg,
    /// Near/far bin boundary, meters
    #[arg(long, default_value_t = DEFAULT_BIN_BOUNDARY_M)]
    boundary: f64,
    /// Report CSV
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// (distance, prediction) CSV for plotting
    #[arg(long, value_name = "PATH")]
    plot_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Stack weights (JSON)
    #[arg(long, value_name = "PATH")]
    stack: PathBuf,
    /// Left and right boxes as "x,y,w,h;x,y,w,h"
    #[arg(long, allow_hyphen_values = true, conflicts_with_all = ["record", "xl"])]
    boxes: Option<String>,
    /// Dataset file; the record at --index is used
    #[arg(long, value_name = "PATH", conflicts_with = "xl")]
    record: Option<PathBuf>,
    /// 0-based record index within --record
    #[arg(long, default_value_t = 0, requires = "record")]
    index: usize,
    /// Left center x, pixels
    #[arg(long, requires = "xr", allow_hyphen_values = true)]
    xl: Option<f64>,
    /// Right center x, pixels
    #[arg(long, requires = "xl", allow_hyphen_values = true)]
    xr: Option<f64>,
    /// Center y for --xl/--xr [default: principal point]
    #[arg(long, allow_hyphen_values = true)]
    y: Option<f64>,
    /// Box width for --xl/--xr, pixels
    #[arg(long, default_value_t = 40.0)]
    w: f64,
    /// Box height for --xl/--xr, pixels
    #[arg(long, default_value_t = 24.0)]
    h: f64,
    /// Inference mode
    #[arg(long, value_enum, default_value_t = ModeArg::Gated)]
    mode: ModeArg,
}

/// Usage problems exit 1, data and model problems exit 2.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(uavdist_core::Error),
}

impl From<uavdist_core::Error> for Failure {
    fn from(e: uavdist_core::Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Runs the program on `argv` (including the program name), writing normal
/// output to `out` and diagnostics to `err`. Returns the exit status.
pub fn run_with<I, T>(argv: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match apply_config_file(argv) {
        Ok(a) => a,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            return EXIT_USAGE;
        }
        Err(Failure::Data(e)) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_DATA;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    let mut report = String::new();
    let mut log = String::new();
    let status = match dispatch(&cli, &mut report, &mut log) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(log, "error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Data(e)) => {
            let _ = writeln!(log, "error: {e}");
            EXIT_DATA
        }
    };
    let _ = out.write_all(report.as_bytes());
    let _ = err.write_all(log.as_bytes());
    status
}

/// [`run_with`] on the process's stdout and stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// Help text of the top-level command or one subcommand.
pub fn help_text(subcommand: Option<&str>) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    match subcommand {
        None => cmd.render_long_help().to_string(),
        Some(name) => cmd
            .find_subcommand_mut(name)
            .map(|c| c.render_long_help().to_string())
            .unwrap_or_default(),
    }
}

const SUBCOMMANDS: [&str; 4] = ["simulate", "train", "eval", "infer"];

/// Splices `--key value` pairs from a `--config` file right after the
/// subcommand name, so flags given on the command line (which come later)
/// override them.
fn apply_config_file(argv: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let strs: Vec<Option<&str>> = argv.iter().map(|a| a.to_str()).collect();
    let mut config_path = None;
    for (i, a) in strs.iter().enumerate() {
        match a {
            Some("--config") => config_path = strs.get(i + 1).copied().flatten().map(PathBuf::from),
            Some(s) if s.starts_with("--config=") => {
                config_path = Some(PathBuf::from(&s["--config=".len()..]))
            }
            _ => {}
        }
    }
    let Some(path) = config_path else {
        return Ok(argv);
    };
    let Some(sub_pos) = strs
        .iter()
        .position(|a| a.is_some_and(|s| SUBCOMMANDS.contains(&s)))
    else {
        return Ok(argv);
    };
    let sub_name = strs[sub_pos].unwrap_or_default();

    let text = std::fs::read_to_string(&path)
        .map_err(|e| Failure::Data(uavdist_core::Error::Io { path: path.clone(), source: e }))?;
    let mut cmd = Cli::command();
    cmd.build();
    let sub = cmd
        .find_subcommand(sub_name)
        .expect("subcommand list matches the parser");
    let known = |key: &str| {
        sub.get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key))
            .map(|a| a.get_action().takes_values())
    };

    let mut injected = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Failure::Usage(format!(
                "{}:{}: expected `key = value`",
                path.display(),
                n + 1
            )));
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim().trim_matches('"');
        if key == "config" {
            continue;
        }
        match known(&key) {
            None => {
                return Err(Failure::Usage(format!(
                    "{}:{}: unknown key `{key}` for `{sub_name}`",
                    path.display(),
                    n + 1
                )))
            }
            Some(true) => {
                injected.push(OsString::from(format!("--{key}")));
                injected.push(OsString::from(value));
            }
            Some(false) => match value {
                "true" => injected.push(OsString::from(format!("--{key}"))),
                "false" => {}
                _ => {
                    return Err(Failure::Usage(format!(
                        "{}:{}: `{key}` takes true or false, got `{value}`",
                        path.display(),
                        n + 1
                    )))
                }
            },
        }
    }
    let mut out = argv;
    out.splice(sub_pos + 1..sub_pos + 1, injected);
    Ok(out)
}

fn dispatch(cli: &Cli, out: &mut String, log: &mut String) -> CliResult<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a, out, log),
        Command::Train(a) => train(cli, a, out, log),
        Command::Eval(a) => evaluate(cli, a, out, log),
        Command::Infer(a) => infer(cli, a, out),
    }
}

fn rig_override(cli: &Cli) -> CliResult<Option<StereoRig>> {
    cli.rig
        .as_deref()
        .map(dataset_io::read_rig)
        .transpose()
        .map_err(Failure::from)
}

/// `--rig` if given, else the sidecar written by `simulate`.
fn dataset_rig(cli: &Cli, data: &Path) -> CliResult<StereoRig> {
    if let Some(rig) = rig_override(cli)? {
        return Ok(rig);
    }
    let sidecar = dataset_io::rig_sidecar_path(data);
    if !sidecar.exists() {
        return Err(Failure::Usage(format!(
            "no rig for {}: pass --rig or provide {}",
            data.display(),
            sidecar.display()
        )));
    }
    Ok(dataset_io::read_rig(&sidecar)?)
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Failure::Data(uavdist_core::Error::Io { path: path.into(), source: e }))
}

fn simulate(cli: &Cli, a: &SimulateArgs, out: &mut String, log: &mut String) -> CliResult<()> {
    let rig = rig_override(cli)?.unwrap_or_else(StereoRig::reference);
    let deviation = if a.no_deviation {
        DeviationModel::none()
    } else {
        DeviationModel {
            alpha_l: a.alpha_l,
            alpha_r: a.alpha_r,
            beta: a.beta,
            sigma_vib: a.sigma_vib,
            sigma_px: a.sigma_px,
        }
    };
    let scene = SceneConfig {
        rig,
        target_width_m: a.target_width,
        target_height_m: a.target_height,
        d_min: a.d_min,
        d_max: a.d_max,
        n_samples: a.n,
        seed: cli.seed,
        deviation,
    };
    let records = dataset_io::generate_dataset(&scene)?;
    dataset_io::write_dataset(&records, &a.out)?;
    let sidecar = dataset_io::rig_sidecar_path(&a.out);
    dataset_io::write_rig(&rig, &sidecar)?;
    if cli.verbose {
        let _ = writeln!(log, "scene: {scene:?}");
    }
    let _ = writeln!(
        out,
        "wrote {} records to {} (rig: {})",
        records.len(),
        a.out.display(),
        sidecar.display()
    );
    Ok(())
}

fn default_log_path(stack: &Path) -> PathBuf {
    let stem = stack
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "stack".into());
    stack.with_file_name(format!("{stem}.log.csv"))
}

fn train(cli: &Cli, a: &TrainArgs, out: &mut String, log: &mut String) -> CliResult<()> {
    let rig = dataset_rig(cli, &a.data)?;
    let records = dataset_io::read_dataset(&a.data)?;
    let val = a.val.as_deref().map(dataset_io::read_dataset).transpose()?;
    let mixer = |k| MixerConfig {
        tokens: TOKENS,
        embed_dim: a.embed_dim,
        token_hidden: a.token_hidden,
        channel_hidden: a.channel_hidden,
        layers: a.layers,
        head_outputs: k,
    };
    let config = TrainConfig {
        lr_max: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        clip_norm: a.clip_norm,
        epochs: a.epochs,
        warmup_fraction: a.warmup_fraction,
        batch_size: a.batch_size,
        hard_threshold: a.hard_threshold,
        lambda: a.lambda,
        stages: a.stages,
        gate_threshold: a.gate_threshold,
        disparity_floor: TrainConfig::default().disparity_floor,
        seed: cli.seed,
        offset_scale_px: a.offset_scale,
        pcm_mixer: mixer(1),
        gate_mixer: mixer(2),
    };
    config
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let outcome = training::train(&rig, &records, val.as_deref(), &config)?;
    outcome.stack.save(&a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| default_log_path(&a.out));
    write_file(&log_path, &outcome.log.to_csv())?;

    if cli.verbose {
        for note in &outcome.log.notes {
            let _ = writeln!(log, "{note}");
        }
        let _ = writeln!(log, "hard samples per stage: {:?}", outcome.hard_counts);
    }
    let _ = writeln!(
        out,
        "trained {} stage(s) on {} records; weights {}, log {}",
        outcome.stack.num_stages(),
        records.len(),
        a.out.display(),
        log_path.display()
    );
    if let Some(stage) = outcome.stopped_early {
        let _ = writeln!(out, "stopped after stage {stage}: no hard samples left");
    }
    Ok(())
}

fn evaluate(cli: &Cli, a: &EvalArgs, out: &mut String, _log: &mut String) -> CliResult<()> {
    let records = dataset_io::read_dataset(&a.data)?;
    let report: EvalReport = match &a.stack {
        None => {
            let rig = dataset_rig(cli, &a.data)?;
            eval::evaluate_baseline(&rig, &records, a.boundary)?
        }
        Some(path) => {
            let mut stack = CorrectorStack::load(path)?;
            if let Some(rig) = rig_override(cli)? {
                stack.rig = rig;
            }
            eval::evaluate(&stack, &records, a.mode.into(), a.boundary)?
        }
    };
    if let Some(path) = &a.out {
        write_file(path, &report.to_csv())?;
    }
    if let Some(path) = &a.plot_data {
        write_file(path, &report.plot_csv())?;
    }
    out.push_str(&report.to_table());
    Ok(())
}

fn parse_boxes(spec: &str) -> CliResult<(BoundingBox, BoundingBox)> {
    let bad = || Failure::Usage(format!("--boxes expects \"x,y,w,h;x,y,w,h\", got \"{spec}\""));
    let parse_one = |s: &str| -> CliResult<BoundingBox> {
        let v: Vec<f64> = s
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        match v[..] {
            [x, y, w, h] => Ok(BoundingBox::new(x, y, w, h)),
            _ => Err(bad()),
        }
    };
    let (l, r) = spec.split_once(';').ok_or_else(bad)?;
    Ok((parse_one(l)?, parse_one(r)?))
}

fn format_trace(trace: &EstimateTrace) -> String {
    let mut s = String::new();
    for (i, ((ol, or), (xl, xr))) in trace.offsets.iter().zip(&trace.corrected_x).enumerate() {
        let _ = write!(s, "stage {}: O_L={ol:+.4} O_R={or:+.4} x_L={xl:.4} x_R={xr:.4}", i + 1);
        if let Some(g) = trace.gate_scores.get(i) {
            let _ = write!(s, " gate={g:.4}");
        }
        s.push('\n');
    }
    let _ = writeln!(s, "stages executed: {}", trace.stages_executed);
    s
}

fn infer(cli: &Cli, a: &InferArgs, out: &mut String) -> CliResult<()> {
    let mut stack = CorrectorStack::load(&a.stack)?;
    if let Some(rig) = rig_override(cli)? {
        stack.rig = rig;
    }
    let (left, right) = if let Some(spec) = &a.boxes {
        parse_boxes(spec)?
    } else if let Some(path) = &a.record {
        let records = dataset_io::read_dataset(path)?;
        let r = records.get(a.index).ok_or_else(|| {
            Failure::Usage(format!(
                "--index {} out of range: {} has {} records",
                a.index,
                path.display(),
                records.len()
            ))
        })?;
        (r.left, r.right)
    } else if let (Some(xl), Some(xr)) = (a.xl, a.xr) {
        let y = a.y.unwrap_or(stack.rig.cy);
        (BoundingBox::new(xl, y, a.w, a.h), BoundingBox::new(xr, y, a.w, a.h))
    } else {
        return Err(Failure::Usage(
            "infer needs --boxes, --record, or --xl with --xr".into(),
        ));
    };
    for b in [&left, &right] {
        b.validate(&stack.rig)?;
    }
    let (distance, trace) = stack.estimate_with(&left, &right, a.mode.into());
    out.push_str(&format_trace(&trace));
    let d = distance?;
    let _ = writeln!(out, "distance: {d:.3} m");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parser_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn boxes_parse() {
        let (l, r) = parse_boxes("600,360,40,24; 500,360,40,24").unwrap();
        assert_eq!((l.x, r.x, l.w, r.h), (600.0, 500.0, 40.0, 24.0));
        assert!(parse_boxes("600,360,40;500,360,40,24").is_err());
        assert!(parse_boxes("600,360,40,24").is_err());
        assert!(parse_boxes("a,b,c,d;1,2,3,4").is_err());
    }

    #[test]
    fn log_path_derivation() {
        assert_eq!(default_log_path(Path::new("runs/stack.json")), Path::new("runs/stack.log.csv"));
    }
}
