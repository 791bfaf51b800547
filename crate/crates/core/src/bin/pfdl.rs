use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pfdl::cli::{self, CompareArgs, RunArgs};
use pfdl::federation::Mode;
use pfdl::{Error, Result};

#[derive(Parser)]
#[command(name = "pfdl", version, about = "Personalized federated domain-incremental learning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one mode on one seed and write metrics, events and checkpoints.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's mode; exactly one.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
        /// Directory written by `gen-data`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every mode on every seed, with summary tables.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "pfeddil,fedavg,source_only,disjoint,sharing")]
        modes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        lambda_sweep: bool,
    },
    /// Recompute and verify the metrics of a `run` directory from its checkpoints.
    Eval {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the task stream of a config to disk.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_modes(raw: &[String]) -> Result<Vec<Mode>> {
    raw.iter().map(|s| s.parse()).collect()
}

fn execute(command: Command) -> Result<()> {
    let threads = cli::threads_from_env()?;
    match command {
        Command::Run {
            config,
            out,
            seed,
            modes,
            data,
        } => {
            let modes = parse_modes(&modes)?;
            if modes.len() > 1 {
                return Err(Error::config("modes", "run takes one mode; use compare for several"));
            }
            let s = cli::cmd_run(&RunArgs {
                config,
                out,
                seed,
                mode: modes.first().copied(),
                data,
                threads,
            })?;
            println!(
                "{} seed {}: avg_final {:.4} forgetting {:.4} pool {:.2}",
                s.mode, s.seed, s.avg_final, s.mean_forgetting, s.pool_size_mean
            );
        }
        Command::Gradcheck { cases, seed, out } => {
            for r in cli::cmd_gradcheck(cases, seed, out.as_deref())? {
                println!(
                    "{}: {} cases, {} entries, max rel err {:.3e}",
                    r.suite, r.cases, r.entries, r.max_rel_err
                );
            }
        }
        Command::Compare {
            config,
            out,
            modes,
            seeds,
            lambda_sweep,
        } => {
            let modes = parse_modes(&modes)?;
            let rows = cli::cmd_compare(&CompareArgs {
                config,
                out,
                modes: modes.clone(),
                seeds,
                lambda_sweep,
                threads,
            })?;
            println!("{:<12} {:>10} {:>10}", "mode", "avg_final", "forgetting");
            for (m, acc, fgt) in cli::medians_by_mode(&rows, &modes) {
                println!("{:<12} {:>10.4} {:>10.4}", m.as_str(), acc, fgt);
            }
        }
        Command::Eval { out } => {
            let r = cli::cmd_eval(&out, threads)?;
            println!("avg_final {:.4}, matches recorded metrics", r.metrics.avg_final);
        }
        Command::GenData { config, out, seed } => {
            let hash = cli::cmd_gen_data(config.as_deref(), &out, seed)?;
            println!("dataset {hash}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match Cli::try_parse() {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: config: {first}");
            return ExitCode::from(2);
        }
    };
    match execute(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
