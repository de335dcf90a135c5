use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use querytune_cli::commands::{self, Context, EvalSplit, Outcome};
use querytune_cli::config::ExperimentConfig;
use querytune_cli::runs::{runs_root, RUNS_ENV};

#[derive(Parser)]
#[command(name = "querytune", version, about = "Instruction-aware query transformer experiments on synthetic data")]
struct Cli {
    /// Experiment configuration (TOML). Defaults are used when absent.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.max_steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Root for run directories.
    #[arg(long, global = true, env = RUNS_ENV, default_value = "runs")]
    runs: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic protocol and write its dataset manifests.
    Prepare,
    /// Pretrain and freeze the toy language model.
    PretrainLm,
    /// Instruction-tune a Q-Former against a frozen language model.
    Train {
        /// Language-model checkpoint or pretrain-lm run directory.
        #[arg(long)]
        lm: PathBuf,
        /// Prepared protocol (prepare run directory). Built from the config when absent.
        #[arg(long)]
        protocol: Option<PathBuf>,
    },
    /// Score a training run on one split.
    Eval {
        /// Training run directory.
        run: PathBuf,
        #[arg(long, value_enum, default_value = "held-out")]
        split: Split,
        /// Evaluate on a different prepared protocol.
        #[arg(long)]
        protocol: Option<PathBuf>,
    },
    /// Train and evaluate the ablation grid over several seeds.
    Ablate {
        #[arg(long)]
        lm: PathBuf,
    },
    /// Print the dataset sampling table.
    Stats {
        /// Comma-separated dataset sizes to tabulate instead of the protocol.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    HeldIn,
    HeldOutData,
    HeldOutTask,
    HeldOut,
}

impl From<Split> for EvalSplit {
    fn from(s: Split) -> Self {
        match s {
            Split::HeldIn => EvalSplit::HeldIn,
            Split::HeldOutData => EvalSplit::HeldOutData,
            Split::HeldOutTask => EvalSplit::HeldOutTask,
            Split::HeldOut => EvalSplit::HeldOut,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = match &cli.config {
        Some(path) => ExperimentConfig::load(path, &cli.overrides)?,
        None => ExperimentConfig::parse("", &cli.overrides)?,
    };
    let ctx = Context { root: runs_root(Some(&cli.runs)), config, config_path: cli.config.clone() };
    let outcome: Outcome = match &cli.command {
        Command::Prepare => commands::cmd_prepare(&ctx)?,
        Command::PretrainLm => commands::cmd_pretrain_lm(&ctx)?,
        Command::Train { lm, protocol } => commands::cmd_train(&ctx, lm, protocol.as_deref())?,
        Command::Eval { run, split, protocol } => commands::cmd_eval(&ctx, run, (*split).into(), protocol.as_deref())?,
        Command::Ablate { lm } => commands::cmd_ablate(&ctx, lm, &mut |line| eprintln!("{line}"))?,
        Command::Stats { sizes } => {
            print!("{}", commands::cmd_stats(&ctx.config, sizes)?);
            return Ok(());
        }
    };
    if outcome.reused {
        eprintln!("identical run already finished; nothing rewritten");
    }
    print!("{}", outcome.summary);
    eprintln!("run directory: {}", outcome.dir.display());
    if let Command::Ablate { .. } = cli.command {
        let failed = commands::failed_directions(&outcome.dir)?;
        if !failed.is_empty() {
            anyhow::bail!("direction checks failed: {}", failed.join("; "));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
