use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use plab::exp::{format_rows, resolve_out_dir, run_experiment, summarize, ExperimentConfig};
use plab::net::model::Fault;
use plab::verify::{verify, VerifyOptions};

#[derive(Parser)]
#[command(
    name = "plab",
    version,
    about = "Neuron activity metrics and reset experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Output directory (default: config `out`, then $PLAB_OUT, then ./plab-out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds, replacing the config's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Run the invariant battery.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_relu_sign_fault: bool,
    },
    /// Recompute median/IQR tables from the CSVs of a finished run.
    Summarize { dir: PathBuf },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> plab::Result<ExitCode> {
    match cli.command {
        Command::Run { config, out, seeds } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
            }
            let dir = resolve_out_dir(out.as_deref(), &cfg);
            let report = run_experiment(&cfg, &dir)?;
            print!("{}", format_rows(&report.summary.rows));
            for (k, v) in &report.summary.extra {
                println!("{k}: {v}");
            }
            println!(
                "wrote {} files to {}",
                report.files.len(),
                report.out_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            seed,
            inject_relu_sign_fault,
        } => {
            let opts = VerifyOptions {
                seed,
                fault: inject_relu_sign_fault.then_some(Fault::FlipReluBackwardSign),
            };
            let report = verify(&opts)?;
            print!("{report}");
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Summarize { dir } => {
            print!("{}", format_rows(&summarize(&dir)?));
            Ok(ExitCode::SUCCESS)
        }
    }
}
