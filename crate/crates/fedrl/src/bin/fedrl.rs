//! Experiment CLI: run a config-driven multi-site benchmark and write
//! CSV results plus a JSON run manifest.

use std::path::PathBuf;

use clap::Parser;

use fedrl::experiment::{parse_config_file, run, ExperimentError};
use fedrl::transport::TransportKind;

/// Environment variable overriding the socket hub bind address.
const HUB_ADDR_ENV: &str = "FEDRL_HUB_ADDR";

#[derive(Parser, Debug)]
#[command(
    name = "fedrl",
    about = "Multi-site offline RL experiment runner",
    version
)]
struct Cli {
    /// Path to the experiment config file.
    #[arg(long)]
    config: PathBuf,

    /// Output directory (overrides the config's `output`).
    #[arg(long)]
    output_dir: Option<PathBuf>,

    /// Worker threads for the seed loop (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,

    /// Transport override: `inprocess` or `socket:ADDR`.
    #[arg(long)]
    transport: Option<String>,

    /// Seed override: comma-separated list replacing the config's seeds.
    #[arg(long)]
    seeds: Option<String>,
}

fn main() {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn execute(cli: Cli) -> Result<(), ExperimentError> {
    let mut config = parse_config_file(&cli.config)?;

    if let Some(dir) = cli.output_dir {
        config.output = dir;
    }
    if let Some(transport) = &cli.transport {
        config.transport = if transport == "inprocess" {
            TransportKind::InProcess
        } else if let Some(addr) = transport.strip_prefix("socket:") {
            TransportKind::Socket(addr.to_string())
        } else {
            return Err(ExperimentError::Config {
                line: 0,
                msg: format!("unknown transport override {transport:?}"),
            });
        };
    }
    // the environment can redirect the socket hub without touching configs
    if let Ok(addr) = std::env::var(HUB_ADDR_ENV) {
        if matches!(config.transport, TransportKind::Socket(_)) {
            config.transport = TransportKind::Socket(addr);
        }
    }
    if let Some(seeds) = &cli.seeds {
        config.seeds = seeds
            .split(',')
            .map(|t| {
                t.trim().parse::<u64>().map_err(|e| ExperimentError::Config {
                    line: 0,
                    msg: format!("bad --seeds entry {t:?}: {e}"),
                })
            })
            .collect::<Result<_, _>>()?;
    }
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| ExperimentError::Run(e.to_string()))?;
    }

    let report = run(&config)?;
    println!(
        "wrote {} rows to {} (config hash {}, {} federation rounds, {} bytes exchanged)",
        report.rows.len(),
        report.csv_path.display(),
        report.config_hash,
        report.rounds.len(),
        report.rounds.iter().map(|r| r.total_bytes).sum::<usize>()
    );
    Ok(())
}
