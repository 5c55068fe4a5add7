use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use specfield::fusion::SaPlacement;

mod commands;
mod config;

use config::RunConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "specfield", version, about = "Spectral radiance fields: data, training, rendering, fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run config; keys mirror the flags below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of wavelength bands.
    #[arg(long, global = true)]
    snum: Option<usize>,
    #[arg(long, global = true)]
    ncoarse: Option<usize>,
    #[arg(long, global = true)]
    nfine: Option<usize>,
    /// Learning rate of the model being trained.
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Exponential decay target for the field learning rate.
    #[arg(long, global = true)]
    lr_final: Option<f64>,
    /// Fusion network learning rate in joint mode.
    #[arg(long, global = true)]
    lr_fusion: Option<f64>,
    #[arg(long, global = true)]
    lambda_rgb: Option<f64>,
    /// Encoders with spectrum attention: none, E1, E1+E2, E1+E2+E3.
    #[arg(long, global = true)]
    sa_placement: Option<SaPlacement>,
    /// Train field and fusion network together.
    #[arg(long, global = true)]
    joint: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    batch_rays: Option<usize>,
    #[arg(long, global = true)]
    eval_every: Option<usize>,
    #[arg(long, global = true)]
    checkpoint_every: Option<usize>,
    /// Patch side for joint training.
    #[arg(long, global = true)]
    patch: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render an analytic scene into a spectral dataset.
    GenSynthetic {
        /// Explicit band centers in nm, comma separated.
        #[arg(long, value_delimiter = ',')]
        centers: Vec<f64>,
        /// Band width for explicit centers.
        #[arg(long)]
        band_width: Option<f64>,
        /// 8 bands at 400..750 nm, 50 nm apart.
        #[arg(long)]
        filter_bank: bool,
        /// Apply the illuminant in the RGB composite instead of the band maps.
        #[arg(long)]
        illuminant_at_fusion: bool,
        #[arg(long)]
        illuminant: Option<String>,
    },
    /// Train coarse and fine spectral fields on a dataset.
    TrainField {
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint written by this command.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render spectrum-map stacks and composites from a field checkpoint.
    RenderSpectra {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset providing the cameras.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Linear weights file from fit-weights.
        #[arg(long, conflicts_with = "fusion")]
        weights: Option<PathBuf>,
        /// Fusion network checkpoint from train-fusion.
        #[arg(long)]
        fusion: Option<PathBuf>,
        /// Also write PNG previews.
        #[arg(long)]
        png: bool,
    },
    /// Least-squares per-band fusion weights.
    FitWeights {
        /// Dataset providing the stacks.
        #[arg(long)]
        data: PathBuf,
        /// Dataset providing RGB targets (default: --data).
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Illuminant to correlate the weights with: a name or an SPD file.
        #[arg(long)]
        reference: Option<String>,
        #[arg(long)]
        per_channel: bool,
    },
    /// Train the fusion network (or, with --joint, field and network).
    TrainFusion {
        #[arg(long)]
        data: PathBuf,
        /// Dataset providing RGB targets (default: --data).
        #[arg(long)]
        targets: Option<PathBuf>,
        /// Field checkpoint to start joint training from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// PSNR / SSIM / L1 of predicted composites against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Finite-difference check of every differentiable building block.
    Gradcheck,
}

impl Cli {
    fn flags(&self) -> RunConfig {
        RunConfig {
            seed: self.seed,
            snum: self.snum,
            ncoarse: self.ncoarse,
            nfine: self.nfine,
            lr: self.lr,
            lr_final: self.lr_final,
            lr_fusion: self.lr_fusion,
            lambda_rgb: self.lambda_rgb,
            sa_placement: self.sa_placement,
            joint: self.joint.then_some(true),
            workers: self.workers,
            out: self.out.clone(),
            iterations: self.iterations,
            batch_rays: self.batch_rays,
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
            patch: self.patch,
            ..RunConfig::default()
        }
    }
}

/// 2 for numeric failures, 1 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<specfield::Error>() {
        Some(specfield::Error::Numeric(_) | specfield::Error::SingularSystem) => 2,
        _ if e.downcast_ref::<commands::CheckFailed>().is_some() => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let run = RunConfig::resolve(cli.config.as_deref(), &cli.flags())?;
    if let Some(n) = run.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::GenSynthetic {
            centers,
            band_width,
            filter_bank,
            illuminant_at_fusion,
            illuminant,
        } => commands::gen_synthetic(
            &run,
            commands::GenFlags { centers, band_width, filter_bank, illuminant_at_fusion, illuminant },
        ),
        Command::TrainField { data, resume } => commands::train_field(&run, &data, resume.as_deref()),
        Command::RenderSpectra { checkpoint, data, split, weights, fusion, png } => {
            commands::render_spectra(&run, &checkpoint, &data, split, weights.as_deref(), fusion.as_deref(), png)
        }
        Command::FitWeights { data, targets, split, reference, per_channel } => {
            commands::fit_weights(&run, &data, targets.as_deref(), split, reference.as_deref(), per_channel)
        }
        Command::TrainFusion { data, targets, checkpoint, split } => {
            commands::train_fusion(&run, &data, targets.as_deref(), checkpoint.as_deref(), split)
        }
        Command::Eval { pred, gt } => commands::eval(&run, &pred, &gt),
        Command::Gradcheck => commands::gradcheck(&run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
