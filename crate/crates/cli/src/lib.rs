//! `mipslice` command line: argument parsing and dispatch.

mod cache;
mod commands;

use std::ffi::OsString;
use std::net::IpAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mipslice_core::mip::View;
use mipslice_core::models::Variant;

pub use cache::CACHE_ENV;

#[derive(Debug, Parser)]
#[command(name = "mipslice", version, about = "Locate the L3 vertebra slice in CT volumes from MIP images")]
pub struct Cli {
    /// Seed for every stochastic step; equal seeds give identical outputs.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Compute device.
    #[arg(long, global = true, value_enum, default_value_t = Device::Cpu)]
    pub device: Device,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Device {
    Cpu,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Project volumes to frontal and restricted-sagittal MIPs.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic spine dataset with known L3 positions.
    GenPhantoms(GenPhantomsArgs),
    /// Train a detector on a dataset directory.
    Train(TrainArgs),
    /// Predict the L3 position for volumes or MIP images.
    Predict(PredictArgs),
    /// Compare predictions with annotations.
    Evaluate(EvaluateArgs),
    /// Time whole-image inference of one or more checkpoints.
    Benchmark(BenchmarkArgs),
    /// Run the annotation HTTP backend.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Volume files (.nii, .nii.gz, raw .json sidecars) or directories of them.
    #[arg(required = true)]
    pub volumes: Vec<PathBuf>,
    /// Output dataset directory; MIPs are written to <dir>/mips.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Annotation CSV to copy next to the MIPs, making a training dataset.
    #[arg(long)]
    pub ann: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenPhantomsArgs {
    #[arg(short = 'n', long)]
    pub count: usize,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Write NIfTI volumes instead of MIPs.
    #[arg(long)]
    pub volumes: bool,
    /// TOML file with phantom generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_variant)]
    pub variant: Variant,
    /// TOML experiment file; its keys override flags and defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory with mips/ and annotations.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint, history and resolved config.
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = parse_view)]
    pub view: Option<View>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint manifest (.json).
    #[arg(long)]
    pub model: PathBuf,
    /// Volumes, MIP PNGs, or directories of either.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, value_parser = parse_view, default_value = "frontal")]
    pub view: View,
    /// Window stride for sliding-window baselines.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Annotation CSV; when given, overlays also show the ground truth.
    #[arg(long)]
    pub ann: Option<PathBuf>,
    /// Skip the overlay PNGs.
    #[arg(long)]
    pub no_overlay: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of prediction JSON files.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub ann: PathBuf,
    /// MIP directory whose sidecars give each image's slice thickness.
    #[arg(long)]
    pub mips: Option<PathBuf>,
    /// Slice thickness for images without a sidecar value.
    #[arg(long, default_value_t = 1.0)]
    pub default_thickness: f64,
    /// Also write the statistics as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Checkpoint manifests; ratios are relative to the first.
    #[arg(long, required = true, num_args = 1..)]
    pub models: Vec<PathBuf>,
    /// MIP PNG to time on; a phantom of --height rows is generated otherwise.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 440)]
    pub height: usize,
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Allowed CORS origin; any origin when omitted.
    #[arg(long)]
    pub cors_origin: Option<String>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|_| format!("expected one of l3unet2d, l3unet1d, baseline, baseline-dual; got {s:?}"))
}

fn parse_view(s: &str) -> Result<View, String> {
    s.parse().map_err(|_| format!("expected frontal or sagittal; got {s:?}"))
}

/// Parse `argv` and run; returns the process exit code (0 ok, 1 runtime
/// failure, 2 usage error).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match commands::dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            1
        }
    }
}

/// The error and its causes on one line, skipping causes whose text an
/// outer message already includes.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !msg.contains(&text) {
            msg.push_str(": ");
            msg.push_str(&text);
        }
    }
    msg
}
