mod config;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ConfigError, ExperimentConfig, Loaded, Pipeline};

const DEFAULT_OUT: &str = "fockscan-out";

#[derive(Parser)]
#[command(name = "fockscan", version, about = "Simulation and analysis pipelines for the Fock-state haloscope")]
struct Cli {
    /// TOML experiment configuration; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Falls back to `output_dir`, then $FOCKSCAN_OUT,
    /// then ./fockscan-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the simulation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimal-control preparation pulses for a Fock state.
    Grape,
    /// Measurement records for the detector-characterization sweep.
    Sweep,
    /// Sweep plus detector efficiency and false-positive fits.
    Characterize,
    /// Background dataset without drive and its signal fit.
    Background,
    /// Mixing-angle limit, exclusion curve and scan rate.
    Limit,
    /// Wigner function of a Fock or coherent state.
    Wigner,
    /// The pipeline named by `pipeline` in the configuration.
    Run,
    /// Print every resolved parameter with its unit and origin.
    Validate,
}

fn load(cli: &Cli) -> Result<Loaded, ConfigError> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut loaded = ExperimentConfig::parse(&text)?;
    if let Some(seed) = cli.seed {
        loaded.config.seed = seed;
    }
    Ok(loaded)
}

fn output_dir(cli: &Cli, config: &ExperimentConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| config.output_dir.clone())
        .or_else(|| std::env::var_os("FOCKSCAN_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn print_report(loaded: &Loaded) {
    for e in loaded.config.report(&loaded.user) {
        println!("{:<42} {:<24} {:<9} {}", e.path, e.value, e.unit, e.source);
    }
}

fn execute(pipeline: Pipeline, config: &ExperimentConfig, out: &Path) -> ExitCode {
    match run::run(pipeline, config, out) {
        Ok(m) => {
            for f in &m.outputs {
                println!("{}  {}", f.sha256, out.join(&f.path).display());
            }
            println!("{} finished in {:.2} s", pipeline.name(), m.wall_time_s);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {} failed: {e:#}", pipeline.name());
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let loaded = match load(&cli) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let pipeline = match cli.command {
        Command::Validate => {
            print_report(&loaded);
            println!("config ok, sha256 {}", loaded.config.digest());
            return ExitCode::SUCCESS;
        }
        Command::Run => match loaded.config.pipeline {
            Some(p) => p,
            None => {
                eprintln!("config error: pipeline: `run` needs a pipeline in the configuration");
                return ExitCode::from(2);
            }
        },
        Command::Grape => Pipeline::Grape,
        Command::Sweep => Pipeline::Sweep,
        Command::Characterize => Pipeline::Characterize,
        Command::Background => Pipeline::Background,
        Command::Limit => Pipeline::Limit,
        Command::Wigner => Pipeline::Wigner,
    };
    let out = output_dir(&cli, &loaded.config);
    execute(pipeline, &loaded.config, &out)
}
