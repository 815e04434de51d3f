use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedsim::analysis::weight_divergence;
use fedsim::harness::{self, run::run_centralized, PlotKind};
use fedsim::model::ParamSet;
use fedsim::partition::{heterogeneity_report, shard_manifest};
use fedsim::{FedError, Result};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Deterministic federated-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated experiment for every configured seed.
    Run {
        config: PathBuf,
        /// Override a config field, e.g. `--set aggregator.kind=FedProx`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Run the seeds concurrently.
        #[arg(long)]
        parallel_seeds: bool,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Partition the training set and print the shard manifest.
    Partition {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Print the heterogeneity report instead of the manifest.
        #[arg(long)]
        report: bool,
    },
    /// Train the centralized arm and save its parameters.
    Baseline {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Weight divergence of one parameter file against a reference.
    Diverge { fed_params: PathBuf, cent_params: PathBuf },
    /// Write a long-format plot table from a run directory.
    Plotdata { run_dir: PathBuf, kind: String },
}

/// Prints to stdout, ignoring a closed pipe.
fn emit(text: impl std::fmt::Display) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn print_json(v: &impl serde::Serialize) {
    emit(serde_json::to_string_pretty(v).expect("output serializes"));
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("FEDSIM_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| FedError::Config(format!("FEDSIM_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| FedError::Runtime(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Run { config, set, parallel_seeds, out } => {
            let cfg = harness::load_config(&config, &set)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let result = harness::run_experiment(&cfg, parallel_seeds)?;
            for p in harness::write_results(&result, &dir)? {
                emit(p.display());
            }
        }
        Command::Partition { config, set, report } => {
            let cfg = harness::load_config(&config, &set)?;
            let (train, _) = harness::prepare_data(&cfg)?;
            let mut out = Vec::new();
            for &seed in &cfg.seeds {
                let shards = harness::run::build_shards(&cfg.split, &train, seed)?;
                if report {
                    out.push(serde_json::json!({"seed": seed, "report": heterogeneity_report(&shards, &train)?}));
                } else {
                    out.push(shard_manifest(&shards, seed));
                }
            }
            print_json(&out);
        }
        Command::Baseline { config, set, out } => {
            let cfg = harness::load_config(&config, &set)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let (train, test) = harness::prepare_data(&cfg)?;
            let mut rows = Vec::new();
            for &seed in &cfg.seeds {
                let run = run_centralized(&cfg, &train, &test, seed, false)?;
                let path = dir.join(format!("centralized_seed{seed}.bin"));
                run.params.save(&path)?;
                rows.push(serde_json::json!({"seed": seed, "test_accuracy": run.test_accuracy, "params": path}));
            }
            let summary = serde_json::to_vec_pretty(&rows).expect("summary serializes");
            harness::write_atomic(&dir.join("baseline.json"), &summary)?;
            print_json(&rows);
        }
        Command::Diverge { fed_params, cent_params } => {
            let fed = ParamSet::load(&fed_params)?;
            let cent = ParamSet::load(&cent_params)?;
            print_json(&weight_divergence(&fed, &cent, 0)?);
        }
        Command::Plotdata { run_dir, kind } => {
            let kind: PlotKind = kind.parse()?;
            emit(harness::emit_plot_data(Path::new(&run_dir), kind)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {line}", e.kind());
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
