mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "cmmd", version, about = "Train and inspect conditional multi-modal latent-variable models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration key, as `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory. The resolved configuration is written here.
    #[arg(long, short)]
    out: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.apply_env()?;
        cfg.echo(&self.out)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic multi-modal dataset (train/ and test/).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write checkpoint.ckpt, metrics.csv and history.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training dataset directory. With `train.stage = two_stage` its
        /// labels are ignored and it serves as the unlabeled set.
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset scored every `train.eval_every` epochs and after
        /// each sweep point.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Labeled dataset for the second stage of two-stage training.
        #[arg(long)]
        labeled: Option<PathBuf>,
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train once per ω in 0, 0.1, …, 1 and write sweep.csv.
        #[arg(long)]
        omega_sweep: bool,
    },
    /// Score a checkpoint on a dataset; writes eval.csv (metric,target,value).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate the missing modalities from the observed ones.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Latent collapse fractions; writes collapse.csv (pairing,epsilon,fraction).
    Collapse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of the full objective on a small seeded batch.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Corrupt the backward rule of one op kind (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Build a two-view digits dataset from IDX image and label files.
    TwoView {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { common } => commands::synth(&common.resolve()?, &common.out),
        Command::Train {
            common,
            data,
            eval,
            labeled,
            resume,
            omega_sweep,
        } => commands::train(
            &common.resolve()?,
            &commands::TrainArgs {
                data,
                eval,
                labeled,
                resume,
                omega_sweep,
                out: common.out,
            },
        ),
        Command::Eval { common, checkpoint, data } => commands::eval(&common.resolve()?, &checkpoint, &data, &common.out),
        Command::Generate { common, checkpoint, data } => {
            commands::generate(&common.resolve()?, &checkpoint, &data, &common.out)
        }
        Command::Collapse { common, checkpoint, data } => {
            commands::collapse(&common.resolve()?, &checkpoint, &data, &common.out)
        }
        Command::Gradcheck { common, inject_fault } => {
            commands::gradcheck(&common.resolve()?, inject_fault.as_deref(), &common.out)
        }
        Command::TwoView { common, images, labels } => {
            commands::two_view(&common.resolve()?, &images, &labels, &common.out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
