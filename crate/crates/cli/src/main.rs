//! `qi2`: one subcommand per stage of the stack.
//!
//! Every subcommand reads a `--config` file, applies `--seed` and its own
//! flags on top, and writes the resolved configuration next to its outputs.
//! Exit codes: 0 success, 1 I/O or format failure, 2 usage or configuration
//! error, 3 invariant or contract violation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qi2::Error;

#[derive(Parser)]
#[command(name = "qi2", version, about = "Desk-scale text-to-image stack")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Run configuration (`section.key = value` lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Writes a toy corpus: shapes, glyphs, portraits, gaussians2d or pipeline.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.kind`.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Curation pipeline.
    Pipeline {
        #[command(subcommand)]
        cmd: PipelineCmd,
    },
    /// Trains the autoencoder on `vae.corpus`.
    TrainVae {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the diffusion transformer on latents of `data.kind`.
    TrainDit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Autoencoder checkpoint from `train-vae`.
        #[arg(long)]
        vae: PathBuf,
    },
    /// Generates images from a model directory.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Directory written by `train-dit` or `rlhf`; a seeded untrained
        /// model when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Prompt for every sample; shape captions in turn when absent.
        #[arg(long)]
        prompt: Option<String>,
        /// Euler steps (`sample.steps`).
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale (`sample.cfg`).
        #[arg(long)]
        cfg: Option<f64>,
        /// Use the few-step student sampler with this many evaluations.
        #[arg(long)]
        nfe: Option<usize>,
        /// Number of images (`sample.count`).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Distills the 2D toy teacher into a few-step student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Existing teacher checkpoint; trained from scratch when absent.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Runs GRPO on a model directory.
    Rlhf {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Prompt triplet synthesis.
    Promptforge {
        #[command(subcommand)]
        cmd: PromptforgeCmd,
    },
    /// Prints one metric value.
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
    /// Finite-difference checks of every registered op and the full model loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Runs one curation stage over a manifest.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: u8,
        #[arg(long = "in")]
        input: PathBuf,
        /// Manifest of kept records.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Subcommand)]
enum PromptforgeCmd {
    /// Builds one triplet per fine prompt.
    Build {
        #[command(flatten)]
        common: Common,
        /// One fine prompt per line; `promptforge.count` sampled captions when absent.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Triplets, one JSON object per line.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// PSNR in dB of two 8-bit images.
    Psnr {
        #[command(flatten)]
        common: Common,
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SSIM of two 8-bit images (uniform 8-px window).
    Ssim {
        #[command(flatten)]
        common: Common,
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sliced Wasserstein distance between the two halves of a sample dump.
    Swd {
        #[command(flatten)]
        common: Common,
        dump: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure with its exit code.
pub enum Failure {
    Lib(Error),
    Invariant { op: &'static str, detail: String },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Lib(Error::Io(e))
    }
}

impl Failure {
    fn report(&self) -> (u8, String) {
        match self {
            Self::Invariant { op, detail } => (3, format!("error[invariant] {op}: {detail}")),
            Self::Lib(e) => match e {
                Error::Config(m) => (2, format!("error[config] {m}")),
                Error::Dimension { op, detail } => (3, format!("error[dimension] {op}: {detail}")),
                Error::Contract { op, detail } => (3, format!("error[contract] {op}: {detail}")),
                Error::NonFinite { op } => (3, format!("error[non-finite] {op}")),
                Error::Format(m) => (1, format!("error[format] {m}")),
                Error::Io(err) => (1, format!("error[io] {err}")),
                Error::Json(err) => (1, format!("error[format] {err}")),
                Error::Image(err) => (1, format!("error[image] {err}")),
            },
        }
    }
}

pub type CmdResult = std::result::Result<(), Failure>;

fn run(cli: Cli) -> CmdResult {
    qi2::config::threads()?;
    match cli.cmd {
        Cmd::GenData { common, out, kind } => commands::gen_data(&common, &out, kind),
        Cmd::Pipeline { cmd: PipelineCmd::Run { common, stage, input, out, report } } => commands::pipeline_run(&common, stage, &input, &out, &report),
        Cmd::TrainVae { common, out } => commands::train_vae(&common, &out),
        Cmd::TrainDit { common, out, vae } => commands::train_dit(&common, &out, &vae),
        Cmd::Sample { common, out, model, prompt, steps, cfg, nfe, count } => commands::sample(&common, &out, model.as_deref(), prompt, steps, cfg, nfe, count),
        Cmd::Distill { common, out, teacher } => commands::distill(&common, &out, teacher.as_deref()),
        Cmd::Rlhf { common, out, model } => commands::rlhf(&common, &out, &model),
        Cmd::Promptforge { cmd: PromptforgeCmd::Build { common, input, out } } => commands::promptforge_build(&common, input.as_deref(), &out),
        Cmd::Eval { cmd } => match cmd {
            EvalCmd::Psnr { common, a, b, out } => commands::eval_pair(&common, &a, &b, out.as_deref(), false),
            EvalCmd::Ssim { common, a, b, out } => commands::eval_pair(&common, &a, &b, out.as_deref(), true),
            EvalCmd::Swd { common, dump, out } => commands::eval_swd(&common, &dump, out.as_deref()),
        },
        Cmd::Gradcheck { common, out } => commands::gradcheck(&common, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, line) = f.report();
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
