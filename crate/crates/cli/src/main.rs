use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coopcache::harness::{self, ExperimentConfig, RecordSet};
use coopcache::Error;

/// Cooperative cache placement experiments.
#[derive(Parser)]
#[command(name = "coopcache", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate each replica's topology and write its sites and cells.
    Topology(RunArgs),
    /// Run an experiment and write summary, series and aggregate CSVs.
    Run(RunArgs),
    /// Compare the summaries of one or more finished runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the replica count.
    #[arg(long)]
    replicas: Option<u32>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, each holding a summary.csv.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf), Error> {
    let mut config = ExperimentConfig::load(&args.config).map_err(|e| match e {
        Error::File { source, .. } => Error::Config {
            field: "--config".into(),
            message: format!("{}: {source}", args.config.display()),
        },
        other => other,
    })?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(replicas) = args.replicas {
        if replicas == 0 {
            return Err(Error::Config {
                field: "--replicas".into(),
                message: "must be at least 1".into(),
            });
        }
        config.replicas = replicas;
    }
    let out = args.out.clone().or_else(|| config.output.clone()).ok_or_else(|| Error::Config {
        field: "output".into(),
        message: "no output directory; set `output` or pass --out".into(),
    })?;
    Ok((config, out))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|source| Error::File {
        path: dir.to_path_buf(),
        source,
    })
}

fn create(path: PathBuf) -> Result<std::fs::File, Error> {
    std::fs::File::create(&path).map_err(|source| Error::File { path, source })
}

fn topology(args: &RunArgs) -> Result<(), Error> {
    let (config, out) = load(args)?;
    create_dir(&out)?;
    println!("replica,caches,cells,covered_fraction,topology_digest");
    for replica in 0..config.replicas {
        let topology = harness::build_topology(&config, replica)?;
        let cells = harness::build_cells(&config, &topology, replica)?;
        topology.write_csv(create(out.join(format!("sites-r{replica}.csv")))?)?;
        cells.write_csv(&topology, create(out.join(format!("cells-r{replica}.csv")))?)?;
        println!(
            "{replica},{},{},{},{}",
            topology.len(),
            cells.len(),
            cells.covered_fraction(),
            harness::topology_digest(&topology)
        );
    }
    Ok(())
}

fn run(args: &RunArgs) -> Result<(), Error> {
    let (config, out) = load(args)?;
    let records = harness::run_experiment(&config)?;
    harness::emit_series(&records, &out)?;
    for r in &records {
        eprintln!(
            "replica {} {:<28} hit {:.6} after {} iterations ({}, {:.2?})",
            r.replica, r.algorithm, r.terminal_hit, r.iterations, r.termination, r.wall_time
        );
    }
    Ok(())
}

fn report(args: &ReportArgs) -> Result<(), Error> {
    let sets = args
        .runs
        .iter()
        .map(|dir| {
            Ok(RecordSet {
                label: dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
                rows: harness::read_summary(&dir.join("summary.csv"))?,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let table = harness::compare_report(&sets)?.to_string();
    match &args.out {
        Some(path) => std::fs::write(path, table).map_err(|source| Error::File {
            path: path.clone(),
            source,
        }),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Topology(args) => topology(args),
        Command::Run(args) => run(args),
        Command::Report(args) => report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
