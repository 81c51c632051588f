//! `promptpfn` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "promptpfn",
    version,
    about = "Prior-data fitted networks with learned context prompts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed threaded through every random choice.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Name of the label column.
    #[arg(long, default_value = "label")]
    label: String,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Standard,
    Medium,
    Light,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    C,
    Nc,
    Best,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RowsArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SketchArg {
    Random,
    Kmeans,
    CoresetFps,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LabelModeArg {
    Proportional,
    Equal,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SelectArg {
    Random,
    Mi,
    Pca,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a PFN on synthetic tasks drawn from a prior.
    Pretrain {
        /// Prior configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Model configuration (JSON); defaults to the toy config sized to the prior.
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long, default_value_t = 3000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Tune prompts on a dataset: routed grid search, or one config with --config.
    Tune {
        /// Checkpoint directory.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "standard")]
        variant: VariantArg,
        /// Single tuning configuration (JSON); skips routing.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Predict with a tuned prompt, an ensemble, or zero-shot.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Prompt directory written by `tune`.
        #[arg(long, conflicts_with = "ensemble")]
        prompt: Option<PathBuf>,
        /// Ensemble directory written by `tune`.
        #[arg(long)]
        ensemble: Option<PathBuf>,
        /// Feature transform (JSON) applied before prediction.
        #[arg(long)]
        transform: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "nc")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "test")]
        rows: RowsArg,
        /// Real-context budget for C mode and zero-shot.
        #[arg(long, default_value_t = 3000)]
        context: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Compress the training split to a small context.
    Sketch {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "random")]
        method: SketchArg,
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value = "proportional")]
        label_mode: LabelModeArg,
        #[command(flatten)]
        common: Common,
    },
    /// Reduce the feature count.
    SelectFeatures {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "mi")]
        method: SelectArg,
        #[arg(long)]
        d_target: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Tune a prompt with the demographic-parity penalty.
    FairTune {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Fairness specification (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Tuning configuration (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run zero-shot and routed tuning over a suite of datasets.
    Bench {
        /// Suite description (JSON).
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "light")]
        variant: VariantArg,
        #[command(flatten)]
        common: Common,
    },
    /// Aggregate and test a JSON-lines results report.
    Stats {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Output directory; prints to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write class probabilities over a 2D lattice for plotting.
    GridExport {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Prompt directory; zero-shot when absent.
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        resolution: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
