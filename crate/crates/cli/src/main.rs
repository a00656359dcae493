mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{config_err, Config, ConfigError};

/// Nonstationary Brown-Resnick dependence: simulate, fit, merge, diagnose.
#[derive(Parser)]
#[command(name = "fusedmax", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a panel of block maxima from a partitioned field.
    Simulate(Common),
    /// Fit a penalized pairwise likelihood on a fixed partition.
    Fit(Common),
    /// Tune the penalty and merge subregions.
    Merge(Common),
    /// Compare model and empirical extremal coefficients.
    Diagnose(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<fusedmax::Error>() {
            return match e {
                fusedmax::Error::InvalidArgument(_) => 1,
                fusedmax::Error::Data(_) | fusedmax::Error::Io(_) | fusedmax::Error::Csv(_) => 2,
                fusedmax::Error::Numeric(_) | fusedmax::Error::Contract(_) => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn run(name: &'static str, c: Common) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&c.config).map_err(|e| config_err(format!("reading {}: {e}", c.config.display())))?;
    let config = Config::parse(&text)?;
    let seed = c.seed.or(config.seed).ok_or_else(|| config_err("a seed is required (config `seed` or --seed)"))?;
    let base = c.config.parent().map(|p| p.to_path_buf()).unwrap_or_default();
    let job = commands::Run { command: name, config, config_text: text, base, out: c.out, seed };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(config_err("--threads must be positive"));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build()?;
    pool.install(|| match name {
        "simulate" => commands::simulate(&job),
        "fit" => commands::fit(&job),
        "merge" => commands::merge(&job),
        _ => commands::diagnose(&job),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(c) => run("simulate", c),
        Command::Fit(c) => run("fit", c),
        Command::Merge(c) => run("merge", c),
        Command::Diagnose(c) => run("diagnose", c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
