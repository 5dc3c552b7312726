use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod files;

/// Exit status of a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Failure = 1,
    Io = 2,
    Shape = 3,
    Mismatch = 4,
    Gradcheck = 5,
}

/// Error carrying the exit status it maps to.
#[derive(Debug)]
pub struct CliError {
    pub status: Status,
    pub message: String,
}

impl CliError {
    pub fn new(status: Status, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<guidedpose::Error> for CliError {
    fn from(e: guidedpose::Error) -> Self {
        use guidedpose::Error as E;
        let status = match &e {
            E::Io(_) | E::Write { .. } | E::Format(_) | E::Length { .. } | E::NonFinite { .. } | E::Schema { .. } => {
                Status::Io
            }
            E::Shape(_) => Status::Shape,
            E::Validation(_) => Status::Mismatch,
            _ => Status::Failure,
        };
        Self::new(status, e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "guidedpose", version, about = "Synthetic scenes, pose inference, evaluation and kernel checks")]
struct Cli {
    /// Worker threads (default: available parallelism; GUIDEDPOSE_THREADS
    /// applies when this flag is absent).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene with exact decoder outputs.
    Gen(GenArgs),
    /// Estimate poses from decoder outputs.
    Infer(InferArgs),
    /// Score estimated poses against ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Per-stage latency of the inference pipeline.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 3)]
    pub objects: usize,
    #[arg(long)]
    pub seed: u64,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Angular noise on the vector fields, radians.
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    /// Fraction of foreground pixels given random vectors.
    #[arg(long, default_value_t = 0.0)]
    pub outliers: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Dkr,
    Rv,
}

/// Decoder outputs: a directory written by `gen`, or single files.
#[derive(Debug, Args)]
pub struct InputArgs {
    /// Directory holding scene.txt, seg.cpt, field.cpt and conf.cpt.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub seg: Option<PathBuf>,
    #[arg(long)]
    pub field: Option<PathBuf>,
    #[arg(long)]
    pub conf: Option<PathBuf>,
    /// Treat the segmentation tensor as logits and apply the temperature softmax.
    #[arg(long)]
    pub seg_logits: bool,
    #[arg(long, default_value_t = guidedpose::semantic_norm::DEFAULT_TAU)]
    pub tau: f64,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long, value_enum, default_value_t = Mode::Dkr)]
    pub mode: Mode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 18)]
    pub min_component_pixels: usize,
    #[arg(long, default_value_t = 128)]
    pub hypotheses: usize,
    #[arg(long, default_value_t = 0.999)]
    pub inlier_cosine: f64,
    /// PnP RANSAC reprojection threshold, pixels.
    #[arg(long, default_value_t = 8.0)]
    pub pnp_threshold: f64,
    #[arg(long, default_value_t = 100)]
    pub pnp_iterations: usize,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Write pose records here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub est: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Scene file providing the camera and object models.
    #[arg(long)]
    pub scene: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Comma-separated subset of clade, conv, upsample, dkr, seg_loss,
    /// vector_loss, pv_loss, keypoint_loss.
    #[arg(long, value_delimiter = ',')]
    pub kernels: Vec<String>,
    #[arg(long, default_value_t = guidedpose::gradcheck::DEFAULT_INSTANCES)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negative control: perturb this kernel's analytic gradient.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
}

const THREADS_ENV: &str = "GUIDEDPOSE_THREADS";

fn thread_count(flag: Option<usize>) -> CliResult<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::new(Status::Failure, format!("{THREADS_ENV}=`{v}` is not a thread count"))),
        Err(_) => Ok(0),
    }
}

fn run(cli: Cli) -> CliResult {
    let threads = thread_count(cli.threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::new(Status::Failure, e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Bench(a) => commands::bench(&a),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.status as u8)
        }
    }
}
