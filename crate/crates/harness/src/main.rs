use std::path::PathBuf;
use std::process::ExitCode;

use bfm_adapt::runner::{self, RunOptions};
use bfm_adapt::{ExperimentConfig, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bfm-adapt", version, about = "Pre-train, query and adapt tabular behavioral foundation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the environment, features and BFM; write the model file.
    Pretrain(Args),
    /// Zero-shot inference for every task; writes inference.json.
    Infer(Args),
    /// Run the configured algorithm over tasks x seeds.
    Adapt(Args),
    /// Score zero-shot policies against the optimum; writes eval.csv.
    Eval(Args),
    /// Run the full ablation grid; writes ablation.csv.
    Ablate(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Independent runs executed in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Added to every configured seed.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

fn run(cli: Cli) -> Result<()> {
    let (Command::Pretrain(args)
    | Command::Infer(args)
    | Command::Adapt(args)
    | Command::Eval(args)
    | Command::Ablate(args)) = &cli.command;
    let config = ExperimentConfig::load(&args.config)?;
    let out = config.output_dir(args.out.as_deref())?;
    let opts = RunOptions { jobs: args.jobs, seed_offset: args.seed_offset };
    match cli.command {
        Command::Pretrain(_) => {
            let (_, report) = runner::cmd_pretrain(&config, &out)?;
            println!("{report}");
        }
        Command::Infer(_) => {
            let path = runner::cmd_infer(&config, &out)?;
            println!("{}", path.display());
        }
        Command::Adapt(_) => {
            let summary = runner::cmd_adapt(&config, &out, opts)?;
            for t in &summary.tasks {
                let f = t.final_point();
                println!(
                    "{} {}: final {:.4} +- {:.4}, zero-shot {:.4}, optimum {:.4}, improvement {:.1}%",
                    summary.algorithm,
                    t.task,
                    f.mean_return,
                    f.stderr_return,
                    t.zero_shot_return,
                    t.optimal_return,
                    f.mean_improvement_pct
                );
            }
        }
        Command::Eval(_) => {
            let path = runner::cmd_eval(&config, &out)?;
            println!("{}", path.display());
        }
        Command::Ablate(_) => {
            let rows = runner::cmd_ablate(&config, &out, opts)?;
            println!("{} runs written to {}", rows.len(), out.join("ablation.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BFM_ADAPT_LOG", "error")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bfm-adapt: {e}");
            e.exit_code()
        }
    }
}
