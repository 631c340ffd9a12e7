mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Fixed-length fingerprint templates: synthetic data, training,
/// extraction, enrollment and 1:N search.
#[derive(Debug, Parser)]
#[command(name = "fpfl", version, about)]
pub struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train the two-branch network on a dataset directory.
    Train(TrainArgs),
    /// Distill a trained network into a smaller student.
    Distill(DistillArgs),
    /// Extract templates from one image or from a whole dataset.
    Extract(ExtractArgs),
    /// Encode a `.mnt` minutiae file into a map dump.
    EncodeMap(EncodeMapArgs),
    /// Apply a bounded rigid crop-and-align to an image.
    Align(AlignArgs),
    /// Pack a directory of `.fpt` templates into a gallery file.
    Enroll(EnrollArgs),
    /// Search one probe template against a gallery.
    Search(SearchArgs),
    /// TAR at fixed FAR levels for a directory of probes.
    VerifyEval(EvalArgs),
    /// CMC curve for a directory of probes.
    SearchEval(EvalArgs),
    /// Measure exhaustive search throughput.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub impressions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat key = value file; flags below take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Per-epoch losses as CSV.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub min_lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub no_dropout: bool,
    #[arg(long)]
    pub localizer: bool,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Student stem widths, comma separated.
    #[arg(long)]
    pub stem_channels: Option<String>,
    #[arg(long)]
    pub branch_channels: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub min_lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Single image (PGM or PNG); needs --out.
    #[arg(long, conflicts_with = "data", requires = "out")]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset directory; needs --out-dir. Writes `gallery/class_<k>.fpt`
    /// from each class's first training impression and
    /// `probes/class_<k>__imp_<j>.fpt` for the held-out impressions.
    #[arg(long, requires = "out_dir")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeMapArgs {
    #[arg(long)]
    pub mnt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub h_map: usize,
    #[arg(long, default_value_t = 128)]
    pub w_map: usize,
    #[arg(long, default_value_t = 6)]
    pub channels: usize,
    #[arg(long, default_value_t = 2.0)]
    pub sigma_s: f64,
    /// Defaults to --sigma-s.
    #[arg(long)]
    pub sigma_o: Option<f64>,
    /// Cut-off in multiples of sigma_s; 0 evaluates every cell.
    #[arg(long, default_value_t = 6.0)]
    pub truncation: f64,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub tx: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub ty: f64,
    /// Radians.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub theta: f64,
    /// Output side; defaults to the input size.
    #[arg(long)]
    pub out_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EnrollArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    /// Directory of `.fpt` files; ids are the file stems.
    #[arg(long)]
    pub templates: PathBuf,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(short, long, default_value_t = 10)]
    pub k: usize,
    /// Defaults to the available parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    /// Directory of probe `.fpt` files named `<id>__<anything>.fpt`.
    #[arg(long)]
    pub probes: PathBuf,
    /// FAR levels for verify-eval, comma separated.
    #[arg(long, default_value = "0.1,0.01")]
    pub far: String,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Gallery to search; a random one of --size rows is used otherwise.
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub size: usize,
    #[arg(long, default_value_t = 512)]
    pub dim: usize,
    #[arg(long, default_value_t = 100)]
    pub probes: usize,
    #[arg(long, default_value_t = 1)]
    pub repetitions: usize,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(&cli) {
        Ok(report) => {
            output::emit(&report, cli.json);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("fpfl: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
