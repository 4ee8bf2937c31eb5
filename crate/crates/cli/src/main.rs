mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conres_core::masks::ResidualAxis;
use conres_core::model::Variant;
use conres_core::verify::Suite;

#[derive(Parser, Debug)]
#[command(name = "conres", version, about = "Context residual 3D segmentation toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Worker threads for evaluation and data preparation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Directory receiving every artifact of the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a phantom dataset with a manifest.
    GenData {
        #[arg(long)]
        count: u64,
        #[arg(long)]
        seed: u64,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Dataset scored at each evaluation interval.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        axis: Option<ResidualAxis>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from the checkpoint already in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop (and checkpoint) after this many iterations of the schedule.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Score a checkpoint, or stored prediction volumes, against labelled data.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of volumes whose labels are taken as the prediction.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Write segmentation and residual probability volumes.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A volume file or a dataset directory.
        #[arg(long)]
        input: PathBuf,
    },
    /// Compute inter-slice residual masks of a label volume.
    Resmask {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "axial")]
        axis: ResidualAxis,
        /// Re-read the written mask and rebuild the label from it by XOR.
        #[arg(long)]
        check: bool,
    },
    /// Shorthand for `verify gradcheck`.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a verification suite and emit a JSON report.
    Verify {
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training seeds for the ablation suite (1..=N).
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
