mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use strokediff::generation::Sampler;

#[derive(Parser, Debug)]
#[command(name = "strokediff", version, about = "Diffusion model for online handwriting generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Normalize, filter and merge a record file.
    Prepare(PrepareArgs),
    /// Train a model and write checkpoints and metrics.
    Train(TrainArgs),
    /// Generate handwriting for a text in the style of an image.
    Sample(SampleArgs),
    /// Generate with blends of two style images.
    Interpolate(InterpolateArgs),
    /// Render stroke records as SVG or PGM images.
    Render(RenderArgs),
    /// Report the cross-attention alignment for one record.
    DiagnoseAttention(DiagnoseArgs),
    /// Print the noise schedule table.
    ScheduleInfo(ScheduleArgs),
    /// Print the parameter count of a model configuration.
    ParamsCount(ParamsArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Input record file (JSON lines) or IAM-OnDB stroke XML file.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output record file.
    #[arg(long)]
    pub out: PathBuf,
    /// Outlier threshold in standard deviations.
    #[arg(long, default_value_t = strokediff::data::DEFAULT_OUTLIER_K)]
    pub outlier_k: f64,
    /// Collinearity tolerance in radians.
    #[arg(long, default_value_t = strokediff::data::DEFAULT_ANGLE_TOL)]
    pub angle_tol: f64,
    /// Normalization: per-example or corpus.
    #[arg(long, default_value = "per-example")]
    pub normalization: String,
    /// Text for an IAM-OnDB XML input.
    #[arg(long)]
    pub text: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training record file.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Treat the data as already prepared; scale is read from `<data>.meta.json`.
    #[arg(long, default_value_t = false)]
    pub prepared: bool,
    /// Continue from the checkpoint in the output directory.
    #[arg(long, default_value_t = false)]
    pub resume: bool,
    /// Overrides total_steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Overrides seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra config overrides, `key=value`, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct GenArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Text to write.
    #[arg(long)]
    pub text: String,
    /// Reverse-process variant.
    #[arg(long, default_value_t = Sampler::Modified)]
    pub sampler: Sampler,
    /// Number of reverse steps, counted down from this step [default: schedule length].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Number of output points [default: points-per-character times text length].
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest tolerated fraction of unknown characters.
    #[arg(long, default_value_t = 0.5)]
    pub max_unknown: f64,
    /// Output directory.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub gen: GenArgs,
    /// Style image.
    #[arg(long)]
    pub style: PathBuf,
}

#[derive(Args, Debug)]
pub struct InterpolateArgs {
    #[command(flatten)]
    pub gen: GenArgs,
    #[arg(long)]
    pub style0: PathBuf,
    #[arg(long)]
    pub style1: PathBuf,
    /// Weights of the first style, each in [0, 1].
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.75,0.5,0.25,0.0")]
    pub lambdas: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Record file.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// svg or pgm.
    #[arg(long, default_value = "svg")]
    pub format: String,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    /// SVG stroke width.
    #[arg(long, default_value_t = 1.0)]
    pub stroke_width: f64,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A record as a JSON line, or a path to a record file.
    #[arg(long)]
    pub record: String,
    /// Record index when `--record` is a file.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Diffusion step used to noise the record.
    #[arg(long, default_value_t = 1)]
    pub t: usize,
    /// Attention block, 0 is the highest resolution.
    #[arg(long, default_value_t = 0)]
    pub block: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct ScheduleArgs {
    /// Number of diffusion steps.
    #[arg(long = "T", default_value_t = 60)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.02)]
    pub base: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub lo: f64,
    #[arg(long, default_value_t = 0.4)]
    pub hi: f64,
    /// Also write a run manifest here.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    /// Config file; the desk preset when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// desk, paper or tiny; applied before the config file.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, default_value_t = 80)]
    pub vocab_size: usize,
    /// Also write a run manifest here.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", cat.as_str());
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}
