use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use metacoop_core::selftest::{run_all, SelftestOptions};
use metacoop_harness::compare::compare;
use metacoop_harness::sweep::sweep;
use metacoop_harness::{run, HarnessError, RunConfig};

#[derive(Parser)]
#[command(name = "metacoop", version, about = "Cooperative meta-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train and evaluate one configuration.
    Run { config: PathBuf },
    /// Align one metric across run directories and write a CSV table.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        metric: String,
        #[arg(long, default_value = "compare.csv")]
        out: PathBuf,
    },
    /// Run a configuration once per value of one key.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Run the gradient oracles and invariant checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn execute(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::Run { config } => {
            let outcome = run(RunConfig::load(&config)?)?;
            println!("{}", outcome.dir.display());
            println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
        }
        Command::Compare { dirs, metric, out } => {
            let cmp = compare(&dirs, &metric, &out)?;
            print!("{}", cmp.render());
        }
        Command::Sweep { config, axis, values } => {
            let result = sweep(&RunConfig::load(&config)?, &axis, &values)?;
            let (header, rows) = result.rows();
            println!("{}", header.join(","));
            for r in rows {
                println!("{}", r.join(","));
            }
            println!("table: {}", result.table.display());
            if result.any_diverged() {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Selftest { seed } => {
            let started = Instant::now();
            let outcomes = run_all(&SelftestOptions {
                seed,
                ..Default::default()
            });
            let mut ok = true;
            for o in &outcomes {
                println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
                ok &= o.passed;
            }
            println!("{:.1}s", started.elapsed().as_secs_f64());
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
