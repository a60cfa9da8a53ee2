use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stepq_cli::commands::{self, Context};
use stepq_cli::{CliResult, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "stepq", version, about = "Timestep and mixed-precision search for a toy diffusion model")]
struct Cli {
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads for presample and search.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a Gaussian-mixture dataset to the configured dataset path.
    MakeData,
    Train,
    Calibrate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    Presample,
    Search {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Elite file (its best entry is used) or a bare candidate.
        #[arg(long)]
        candidate: PathBuf,
        #[arg(short, long, default_value_t = 1024)]
        n: usize,
        /// Also write a scatter plot of generated vs real points.
        #[arg(long)]
        plot: bool,
    },
    Report {
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        elite: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let ctx = Context::new(config, cli.out, cli.workers)?;
    match cli.command {
        Command::MakeData => {
            let path = commands::cmd_make_data(&ctx)?;
            println!("wrote {}", path.display());
        }
        Command::Train => {
            let s = commands::cmd_train(&ctx)?;
            println!(
                "trained {} steps: loss {:.4} -> {:.4}; wrote {}",
                s.steps,
                s.initial_loss,
                s.final_loss,
                s.path.display()
            );
        }
        Command::Calibrate { checkpoint } => {
            let file = commands::cmd_calibrate(&ctx, checkpoint.as_deref())?;
            for b in &file.blocks {
                let losses: Vec<String> =
                    b.final_loss.iter().map(|(bits, l)| format!("{bits}b {:.3e}->{l:.3e}", b.init_loss[bits])).collect();
                println!("block {}: {}", b.block, losses.join("  "));
            }
        }
        Command::Presample => {
            let pool = commands::cmd_presample(&ctx)?;
            println!("pooled {} policies under {}", pool.policies.len(), pool.budget.reference);
        }
        Command::Search { checkpoint, bank, pool } => {
            let s = commands::cmd_search(&ctx, checkpoint.as_deref(), bank.as_deref(), pool.as_deref())?;
            if s.resumed_epochs > 0 {
                println!("resumed after {} logged epochs", s.resumed_epochs);
            }
            print!("{}", commands::summary_table(&s.elite));
        }
        Command::Sample { checkpoint, bank, candidate, n, plot } => {
            let s = commands::cmd_sample(&ctx, checkpoint.as_deref(), bank.as_deref(), &candidate, n, plot)?;
            println!("wrote {} samples to {}", s.meta.n, s.csv.display());
            if let Some(fd) = s.frechet {
                println!("frechet distance to the dataset: {fd:.6}");
            }
        }
        Command::Report { log, elite } => {
            let r = commands::cmd_report(&ctx, log.as_deref(), elite.as_deref())?;
            println!("report over {} epochs, {} elites in {}", r.curve.len(), r.elite.len(), ctx.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
