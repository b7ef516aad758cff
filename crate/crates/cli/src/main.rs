//! `attn-surgery`: run the conversion pipeline stage by stage.
//!
//! Exit codes: 0 success, 1 other failure, 2 bad config, 3 divergence,
//! 4 unwritable output, 5 infeasible budget, 6 missing checkpoint.

mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::PipelineConfig;
use error::{exit, CliError};

#[derive(Parser, Debug)]
#[command(name = "attn-surgery", version, about = "Convert softmax attention blocks to hybrid attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// FLOPs budget β; overrides the config.
    #[arg(long, global = true)]
    budget: Option<f64>,
    /// Candidate rates, comma separated; overrides the config.
    #[arg(long, global = true, value_delimiter = ',')]
    rates: Option<Vec<usize>>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed for teacher, distillation and finetuning; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the teacher, distill every (block, rate) pair, write the error table and φ checkpoints.
    Distill,
    /// Choose per-block rates under the budget and write the plan.
    Plan,
    /// Assemble the planned student, finetune it and write fidelity metrics.
    Finetune,
    /// Write fidelity metrics of the assembled or finetuned student.
    Eval,
    /// Print the FLOPs cost model: per-rate costs and the standard conversion grid.
    Flops,
}

fn load_config(common: &Common, needs_file: bool) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None if needs_file => return Err(CliError::Config("--config is required for this command".into())),
        None => PipelineConfig::defaults(),
    };
    if let Some(rates) = &common.rates {
        cfg.rates = rates.clone();
    }
    if let Some(seed) = common.seed {
        cfg.teacher.seed = seed;
        cfg.distill.seed = seed;
        cfg.finetune.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(b) = common.budget {
        if !(b > 0.0 && b.is_finite()) {
            return Err(CliError::Config(format!("--budget {b} must be positive")));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let jobs = match cli.common.jobs {
        Some(0) => return Err(CliError::Config("--jobs must be ≥ 1".into())),
        Some(j) => j,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| CliError::Core(attn_surgery::Error::Argument(e.to_string())))?;
    let needs_file = !matches!(cli.command, Command::Flops);
    let cfg = load_config(&cli.common, needs_file)?;
    match cli.command {
        Command::Distill => commands::distill(&cfg, jobs),
        Command::Plan => commands::plan(&cfg, cli.common.budget),
        Command::Finetune => commands::finetune(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Flops => commands::flops(&cfg),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(&cli) {
        Ok(stdout) => print!("{stdout}"),
        Err(e) => {
            eprintln!("attn-surgery: {e}");
            std::process::exit(e.code());
        }
    }
}
