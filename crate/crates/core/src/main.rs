use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use netobs::experiment::Experiment;

#[derive(Parser)]
#[command(name = "netobs", version, about = "Observability condition numbers for coupled map networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output.dir` and NETOBS_OUTPUT_DIR.
        #[arg(long, short)]
        output_dir: Option<PathBuf>,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        threads: Option<usize>,
        /// Replace a seed, e.g. `--seed-override noise_master=7`.
        #[arg(long = "seed-override", value_name = "NAME=VALUE", value_parser = parse_seed)]
        seed_overrides: Vec<(String, u64)>,
    },
    /// Check a config and print it with all defaults filled in.
    Validate { config: PathBuf },
    /// Print the version.
    Version,
}

fn parse_seed(s: &str) -> Result<(String, u64), String> {
    let (name, value) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got `{s}`"))?;
    let value = value.trim().parse().map_err(|e| format!("seed `{name}`: {e}"))?;
    Ok((name.trim().to_string(), value))
}

fn output_dir(flag: Option<PathBuf>, config: Option<&str>) -> PathBuf {
    flag.or_else(|| config.map(PathBuf::from))
        .or_else(|| std::env::var_os("NETOBS_OUTPUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("netobs-output"))
}

fn run(cli: Cli) -> netobs::error::Result<ExitCode> {
    match cli.command {
        Command::Version => {
            println!("netobs {}", env!("CARGO_PKG_VERSION"));
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { config } => {
            let exp = Experiment::load(&config)?;
            print!("{}", exp.manifest());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            config,
            output_dir: flag,
            threads,
            seed_overrides,
        } => {
            if let Some(t) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build_global()
                    .map_err(|e| netobs::error::Error::InvalidArgument(format!("threads: {e}")))?;
            }
            let mut exp = Experiment::load(&config)?;
            for (name, value) in &seed_overrides {
                exp.override_seed(name, *value)?;
            }
            let dir = output_dir(flag, exp.config().output.dir.as_deref());
            let report = exp.run(&dir)?;
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            if report.problems.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for p in &report.problems {
                    eprintln!("warning: {p}");
                }
                eprintln!("{} problem(s); results in {} may be unusable", report.problems.len(), dir.display());
                Ok(ExitCode::from(2))
            }
        }
    }
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
