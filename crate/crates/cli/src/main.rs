//! `simlab` command-line front end.
//!
//! Exit codes: 0 on success, 1 on configuration or input errors, 2 when the
//! run completed but some rows failed (see `<out>.errors.csv`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use simlab_core::pipeline::{self, CsvRow, Measure, RunConfig, RunOutput};
use simlab_core::probe::ProbeConfig;
use simlab_core::synth;

#[derive(Parser)]
#[command(
    name = "simlab",
    version,
    about = "Representational and functional similarity of trained models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every model pair of each manifest on every measure.
    Compare(Shared),
    /// Correlate pair similarity with robustness level across manifests.
    Sweep(Shared),
    /// Representational similarity on agreeing vs disagreeing inputs.
    Subgroup(Shared),
    /// Retrain linear probes and compare their predictions.
    Probe(ProbeArgs),
    /// Agreement limits from each pair's clean accuracies.
    Bounds(Shared),
    /// Write synthetic fixtures for trying the other commands.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Shared {
    /// Experiment manifest; repeat for several robustness levels.
    #[arg(long = "manifest", required = true)]
    manifests: Vec<PathBuf>,
    /// Comma-separated measures.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "cka,procrustes,jaccard,rtd,agreement,jsdsim"
    )]
    measures: Vec<Measure>,
    /// Neighborhood sizes for jaccard.
    #[arg(long = "k", value_delimiter = ',', default_value = "10")]
    ks: Vec<usize>,
    /// Permutations for sweep p-values.
    #[arg(long, default_value_t = 10_000)]
    permutations: usize,
    /// Seed for topology-divergence batching, permutations and probe training.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Also write a JSON copy of the rows next to the CSV.
    #[arg(long)]
    json: bool,
}

impl Shared {
    fn config(&self) -> RunConfig {
        RunConfig {
            manifests: self.manifests.clone(),
            measures: self.measures.clone(),
            ks: self.ks.clone(),
            seed: self.seed,
            permutations: self.permutations,
            jobs: self.jobs,
            ..RunConfig::default()
        }
    }
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    shared: Shared,
    /// Manifest of the training split; models are matched by name.
    #[arg(long)]
    train_manifest: PathBuf,
    /// Directory for the trained probe weights.
    #[arg(long)]
    weights_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.005)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1024)]
    batch_size: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Destination directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Models per robustness level in the sweep fixture.
    #[arg(long, default_value_t = 4)]
    models: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(failed) => {
            eprintln!("{failed} row(s) failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn emit<T: CsvRow + Serialize>(out: &Path, output: &RunOutput<T>, json: bool) -> Result<usize> {
    pipeline::write_report(out, output, json).with_context(|| format!("writing {}", out.display()))?;
    if !output.failures.is_empty() {
        eprintln!("failures written to {}", pipeline::errors_path(out).display());
    }
    Ok(output.failures.len())
}

/// Runs one command and returns the number of failed rows.
fn run(command: Command) -> Result<usize> {
    match command {
        Command::Compare(a) => emit(&a.out, &pipeline::run_compare(&a.config())?, a.json),
        Command::Subgroup(a) => emit(&a.out, &pipeline::run_subgroup(&a.config())?, a.json),
        Command::Bounds(a) => emit(&a.out, &pipeline::run_bounds(&a.config())?, a.json),
        Command::Sweep(a) => {
            let out = pipeline::run_sweep(&a.config())?;
            let pairs_path = a.out.with_file_name(format!(
                "{}.pairs.csv",
                a.out.file_stem().unwrap_or_default().to_string_lossy()
            ));
            let failed = emit(&pairs_path, &out.scores, false)?;
            Ok(failed + emit(&a.out, &out.correlations, a.json)?)
        }
        Command::Probe(p) => {
            let cfg = RunConfig {
                train_manifest: Some(p.train_manifest.clone()),
                weights_dir: p.weights_dir.clone(),
                probe: ProbeConfig {
                    epochs: p.epochs,
                    base_learning_rate: p.learning_rate,
                    batch_size: p.batch_size,
                    seed: p.shared.seed,
                    ..ProbeConfig::default()
                },
                ..p.shared.config()
            };
            emit(&p.shared.out, &pipeline::run_probe(&cfg)?, p.shared.json)
        }
        Command::Synth(s) => {
            std::fs::create_dir_all(&s.out)?;
            let compare_dir = s.out.join("compare");
            std::fs::create_dir_all(&compare_dir)?;
            let compare = synth::compare_fixture(&compare_dir, s.seed)?;
            let sweep = synth::sweep_fixture(&s.out.join("sweep"), s.models, s.seed)?;
            let probe = synth::probe_fixture(&s.out.join("probe"), s.models, s.seed)?;
            println!("compare: {}", compare.display());
            for p in sweep {
                println!("sweep:   {}", p.display());
            }
            println!(
                "probe:   {} (train {})",
                probe.eval_manifest.display(),
                probe.train_manifest.display()
            );
            Ok(0)
        }
    }
}
