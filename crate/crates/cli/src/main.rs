use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clmfit::cen::CenArch;
use clmfit::metrics::NormMode;
use clmfit::pdm::BBox;
use clmfit::{Error, ErrorClass};

mod commands;

pub const EXIT_OK: u8 = 0;
pub const EXIT_LOW_CONFIDENCE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_VALIDATION: u8 = 4;
pub const EXIT_NUMERICAL: u8 = 5;

/// Facial landmark fitting with convolutional experts networks.
#[derive(Debug, Parser)]
#[command(name = "clmfit", version, about)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses every core. Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Log progress (same as CLMFIT_LOG=debug).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a shape model to a PGM image from a face bounding box.
    Fit(FitArgs),
    /// Render synthetic faces (PGM plus JSON ground truth).
    Synth(SynthArgs),
    /// Train a toy detector and report test r² and RMSE.
    Train(TrainArgs),
    /// Score fitted landmarks against ground truth.
    Eval(EvalArgs),
    /// Write a random synthetic shape model.
    Pdm(PdmArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub pdm: PathBuf,
    /// Detector bank directory (manifest.json plus models).
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Face box as x,y,w,h in pixels.
    #[arg(long, value_name = "X,Y,W,H", value_parser = parse_bbox)]
    pub bbox: BBox,
    #[arg(long)]
    pub out: PathBuf,
    /// Fit configuration JSON; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluate every initial orientation instead of stopping early.
    #[arg(long)]
    pub exhaustive: bool,
    /// JSON array of per-landmark reliabilities.
    #[arg(long)]
    pub reliability: Option<PathBuf>,
    /// Accept detectors with negative combiner weights.
    #[arg(long)]
    pub allow_ablation: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub pdm: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Image size as WxH.
    #[arg(long, default_value = "256x256", value_parser = parse_size)]
    pub size: (usize, usize),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of synthetic scenes to cut patches from; isolated synthetic
    /// patches are generated when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Channel counts, e.g. 16-8-6.
    #[arg(long, default_value = "16-8-6")]
    pub arch: CenArch,
    #[arg(long)]
    pub out: PathBuf,
    /// Train without the non-negative combiner constraint.
    #[arg(long)]
    pub no_nonneg: bool,
    /// Training configuration JSON; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Number of generated training patches (or patches per landmark with
    /// --data).
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long, default_value_t = 200)]
    pub test_samples: usize,
    /// Loss curve CSV; defaults to the model path with a .loss.csv suffix.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Also write a bank directory that serves the model for every landmark.
    #[arg(long, requires = "landmarks")]
    pub bank_out: Option<PathBuf>,
    /// Landmark count for --bank-out.
    #[arg(long)]
    pub landmarks: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Fit result CSVs, paired in order with --truth.
    #[arg(long, num_args = 1.., required_unless_present = "self_check")]
    pub pred: Vec<PathBuf>,
    /// Scene JSON sidecars holding the ground truth.
    #[arg(long, num_args = 1.., required_unless_present = "self_check")]
    pub truth: Vec<PathBuf>,
    #[arg(long, default_value = "iod", value_parser = parse_mode)]
    pub mode: NormMode,
    /// Cumulative error curve CSV.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Summary JSON with the median and every per-image error.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Largest curve threshold.
    #[arg(long, default_value_t = 0.1)]
    pub curve_max: f64,
    /// Re-derive every sidecar's landmarks from its parameters.
    #[arg(long, requires_all = ["pdm", "data"])]
    pub self_check: bool,
    #[arg(long)]
    pub pdm: Option<PathBuf>,
    /// Scene directory for --self-check.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PdmArgs {
    #[arg(long, default_value_t = 30)]
    pub landmarks: usize,
    #[arg(long, default_value_t = 8)]
    pub modes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_bbox(s: &str) -> Result<BBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("expected four numbers x,y,w,h, got {s:?}"))?;
    match v[..] {
        [x, y, width, height] if v.iter().all(|x| x.is_finite()) && width > 0.0 && height > 0.0 => {
            Ok(BBox { x, y, width, height })
        }
        [_, _, _, _] => Err(format!("box {s:?} needs finite values and positive size")),
        _ => Err(format!("expected four numbers x,y,w,h, got {s:?}")),
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok((w, h))
}

fn parse_mode(s: &str) -> Result<NormMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn exit_code(err: &Error) -> u8 {
    match err.class() {
        ErrorClass::Io => EXIT_IO,
        ErrorClass::Validation => EXIT_VALIDATION,
        ErrorClass::Numerical => EXIT_NUMERICAL,
    }
}

fn init_logging(verbose: bool) {
    let default = if verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CLMFIT_LOG", default))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK });
        }
    };
    init_logging(cli.verbose);
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Synth(a) => commands::synth(a, cli.seed),
        Command::Train(a) => commands::train(a, cli.seed),
        Command::Eval(a) => commands::eval(a),
        Command::Pdm(a) => commands::pdm(a, cli.seed),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
