use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rdspde::config::ExperimentConfig;
use rdspde::harness::{exit_code, run, Command};

/// Stochastic reaction-diffusion laboratory.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides `run.seed`.
    #[arg(long, env = "RDSPDE_SEED")]
    seed: Option<u64>,
    /// Worker threads; never changes results.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory; overrides `run.out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    };
    let result = cfg.and_then(|mut cfg| {
        if let Some(s) = cli.seed {
            cfg.run.seed = s;
        }
        if let Some(t) = cli.threads {
            cfg.run.threads = t;
        }
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.run.out));
        run(cli.command, &cfg, &out)
    });
    match &result {
        Ok(o) => {
            for l in &o.summary {
                println!("{l}");
            }
            for f in &o.files {
                println!("wrote {}", f.display());
            }
            println!("{}: {}", cli.command.name(), if o.passed { "PASS" } else { "FAIL" });
        }
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(exit_code(&result) as u8)
}
