//! `musical`: simulate blinking stacks, reconstruct them and measure the
//! results from the command line.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use musical_core::indicator::{Family, ThresholdMode};
use musical_core::simulate::SceneKind;
use musical_core::PsfKind;

#[derive(Debug, Parser)]
#[command(name = "musical", version, about = "Fluctuation-based super-resolution with subspace indicator functions")]
pub struct Cli {
    /// Worker threads; defaults to all available cores. Results do not
    /// depend on this value.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Flat `key = value` file of flag values; command-line flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic blinking stack from the scene catalog.
    Simulate(SimulateArgs),
    /// Reconstruct a super-resolved image from a stack.
    Reconstruct(ReconstructArgs),
    /// Export every window's singular values as CSV.
    Svplot(SvplotArgs),
    /// Measure resolution (lines) or contrast (circles) against ground truth.
    Evaluate(EvaluateArgs),
    /// Export the signal-subspace cardinality map as an 8-bit PNG.
    Cardinality(CardinalityArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CalibrationArgs {
    #[arg(long, default_value_t = 80.0)]
    pub pixel_size_nm: f64,
    #[arg(long, default_value_t = 665.0)]
    pub wavelength_nm: f64,
    /// Numerical aperture.
    #[arg(long, default_value_t = 1.42)]
    pub na: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MethodArgs {
    /// Indicator family: musical or ev.
    #[arg(long, default_value = "musical")]
    pub method: Family,
    /// A, B, soft, or a manual log10(sigma0).
    #[arg(long, default_value = "B", allow_hyphen_values = true)]
    pub threshold: ThresholdMode,
    /// Leave windows with mean intensity below v out of the threshold
    /// statistics, as `minmean=<v>`.
    #[arg(long, value_parser = config::parse_window_filter)]
    pub threshold_window_filter: Option<f64>,
    /// Window side in pixels (odd); derived from the PSF by default.
    #[arg(long)]
    pub window_size: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scene: SceneKind,
    /// Fraction of time an emitter spends on.
    #[arg(long, default_value_t = musical_core::simulate::DEFAULT_DUTY_CYCLE)]
    pub duty: f64,
    /// Signal-to-background ratio (B + S_peak) / B.
    #[arg(long, default_value_t = musical_core::simulate::DEFAULT_SBR)]
    pub sbr: f64,
    #[arg(long, default_value_t = musical_core::simulate::DEFAULT_FRAMES)]
    pub frames: usize,
    #[arg(long, default_value_t = musical_core::simulate::DEFAULT_EXPOSURE_MS)]
    pub exposure_ms: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output multi-page TIFF.
    #[arg(long)]
    pub out: PathBuf,
    /// Emitter positions as CSV (x_nm,y_nm,z_nm).
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Field height in pixels; the scene default if omitted.
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, default_value_t = musical_core::simulate::DEFAULT_TAU_ON_MS)]
    pub tau_on_ms: f64,
    /// Photons per ms while an emitter is on.
    #[arg(long, default_value_t = musical_core::simulate::DEFAULT_PHOTON_RATE_PER_MS)]
    pub photon_rate: f64,
    /// Draw emitter counts from a Poisson distribution instead of rounding.
    #[arg(long)]
    pub poisson_counts: bool,
    #[arg(long, default_value_t = 0.0)]
    pub read_noise_sd: f64,
    #[command(flatten)]
    pub calibration: CalibrationArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReconstructArgs {
    /// Multi-page grayscale TIFF.
    #[arg(long)]
    pub input: PathBuf,
    /// .tif (16-bit, or 32-bit float with --float) or .png (8-bit).
    #[arg(long, alias = "out")]
    pub output: PathBuf,
    #[command(flatten)]
    pub method: MethodArgs,
    #[arg(long, default_value_t = musical_core::indicator::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = musical_core::reconstruct::DEFAULT_SUBPIXELS)]
    pub subpixels: usize,
    /// PSF used for steering vectors: gaussian or airy.
    #[arg(long, default_value = "gaussian")]
    pub psf: PsfKind,
    /// Also write the singular value table (CSV).
    #[arg(long)]
    pub export_sv: Option<PathBuf>,
    /// Also write the cardinality map (PNG); hard thresholds only.
    #[arg(long)]
    pub export_cardinality: Option<PathBuf>,
    /// Apply log10(1 + 1000 f / f_max) before export.
    #[arg(long)]
    pub log_display: bool,
    /// Write raw values as 32-bit float TIFF instead of scaling to 16 bits.
    #[arg(long)]
    pub float: bool,
    #[command(flatten)]
    pub calibration: CalibrationArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SvplotArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// CSV with header row,col,order,sigma,log10_sigma.
    #[arg(long, alias = "output")]
    pub out: PathBuf,
    #[arg(long)]
    pub window_size: Option<usize>,
    #[command(flatten)]
    pub calibration: CalibrationArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CardinalityArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, alias = "output")]
    pub out: PathBuf,
    #[command(flatten)]
    pub method: MethodArgs,
    #[command(flatten)]
    pub calibration: CalibrationArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Lines,
    Circles,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    /// Reconstruction TIFF (raw float preferred).
    #[arg(long, required_unless_present = "stack", conflicts_with = "stack")]
    pub recon: Option<PathBuf>,
    /// Evaluate the background-corrected mean image of a raw stack instead.
    #[arg(long)]
    pub stack: Option<PathBuf>,
    #[arg(long)]
    pub ground_truth: PathBuf,
    #[arg(long, value_enum)]
    pub target: Target,
    /// Ratio curve (lines) or ratio readings (circles) as CSV.
    #[arg(long, alias = "output")]
    pub out: PathBuf,
    /// Subpixels per pixel of the reconstruction; read from its manifest
    /// when present, else 10.
    #[arg(long)]
    pub subpixels: Option<usize>,
    /// Window side used for the reconstruction; sets the unprocessed border.
    #[arg(long)]
    pub window_size: Option<usize>,
    #[arg(long)]
    pub pixel_size_nm: Option<f64>,
    #[arg(long, default_value_t = 665.0)]
    pub wavelength_nm: f64,
    #[arg(long, default_value_t = 1.42)]
    pub na: f64,
    /// Band half-width as a fraction of the valley-to-peak distance.
    #[arg(long, default_value_t = musical_core::metrics::DEFAULT_BAND_FRACTION)]
    pub band_fraction: f64,
    #[arg(long, default_value_t = musical_core::metrics::RAYLEIGH_RATIO)]
    pub ratio_threshold: f64,
    #[arg(long, default_value_t = musical_core::metrics::DEFAULT_STABILITY_STEPS)]
    pub stability_steps: usize,
    /// Fine samples averaged on each side of the section line.
    #[arg(long, default_value_t = 0)]
    pub profile_half_width: usize,
}

fn parse(argv: Vec<String>) -> Result<Cli, clap::Error> {
    let cmd = Cli::command()
        .args_override_self(true)
        .mut_subcommands(|s| s.args_override_self(true));
    let matches = cmd.try_get_matches_from(argv)?;
    Cli::from_arg_matches(&matches)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let expanded = match config::expand(&argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match parse(expanded.clone()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(&cli, &argv, &expanded) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
