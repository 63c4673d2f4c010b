use std::path::PathBuf;
use std::process::ExitCode;

use brownflow::cli::{echo, run, validate};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "brownflow", version, about = "Monte Carlo experiments for Brownian flows on the line")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment config and write its artifacts.
    Run {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
        /// Worker threads; falls back to BROWNFLOW_THREADS.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check a config and print it with all defaults filled in.
    Validate { config: PathBuf },
}

fn load(path: &PathBuf) -> Result<brownflow::cli::ExperimentConfig, ExitCode> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("cannot read {}: {e}", path.display());
        ExitCode::from(2)
    })?;
    validate(&text).map_err(|errs| {
        for e in errs {
            eprintln!("config error: {e}");
        }
        ExitCode::from(2)
    })
}

fn main() -> ExitCode {
    let args = Args::parse();
    match args.cmd {
        Cmd::Validate { config } => match load(&config) {
            Ok(c) => {
                print!("{}", echo(&c));
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Cmd::Run { config, output_dir, seed_override, threads } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            if let Some(s) = seed_override {
                cfg.seed = s;
            }
            let threads = match threads {
                Some(t) => Some(t),
                None => match std::env::var("BROWNFLOW_THREADS") {
                    Ok(v) => match v.parse() {
                        Ok(t) => Some(t),
                        Err(_) => {
                            eprintln!("config error: BROWNFLOW_THREADS must be a positive integer, got {v:?}");
                            return ExitCode::from(2);
                        }
                    },
                    Err(_) => None,
                },
            };
            match run(&cfg, threads) {
                Ok(out) => {
                    for r in &out.reports {
                        println!("{} {}: {} = {:.6e} (tolerance {:.6e})", if r.pass { "PASS" } else { "FAIL" }, r.name, r.statistic, r.value, r.tolerance);
                    }
                    ExitCode::from(out.exit_code() as u8)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(3)
                }
            }
        }
    }
}
