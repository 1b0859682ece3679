use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use twin_harness::report::{summarize, write_json};
use twin_harness::workers::worker_count;
use twin_harness::{parse_seeds, run, Command, ExperimentConfig, HarnessError, Result};

/// Desk-scale experiments for two-stage target attention over long behavior sequences.
#[derive(Parser)]
#[command(name = "twin", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Seeds, e.g. `1,2,3` or `1-5`; overrides the config's list.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Split-vs-dense attention parity on random instances.
    Equivalence(RunArgs),
    /// Hit-rate curves of every GSU against the oracle under serving staleness.
    Consistency(RunArgs),
    /// AUC/GAUC table over GSU kinds.
    Train(RunArgs),
    /// Analytic and measured multiply-adds of raw and split scoring, with timing.
    Bench(RunArgs),
    /// Serving simulation swept over cache refresh periods.
    ServeSim(RunArgs),
    /// GAUC against the GSU's input length.
    LengthSweep(RunArgs),
    /// TWIN against raw MHTA and against no cross-feature bias.
    Ablation(RunArgs),
    /// Check a configuration without running anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Mean and standard deviation over the seeds of one or more reports.
    Summarize {
        /// Directory for summary.csv and summary.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn load(config: &Path, seeds: Option<&str>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    Ok(cfg)
}

fn execute(cmd: Cmd) -> Result<()> {
    let (command, args) = match cmd {
        Cmd::Validate { config, seeds } => {
            load(&config, seeds.as_deref())?.validate()?;
            println!("{}: ok", config.display());
            return Ok(());
        }
        Cmd::Summarize { out, reports } => {
            let summary = summarize(&reports)?;
            print!("{}", summary.text());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| HarnessError::Io { path: dir.clone(), source: e })?;
                summary.table().write_csv(&dir.join("summary.csv"))?;
                let path = dir.join("summary.txt");
                std::fs::write(&path, summary.text()).map_err(|e| HarnessError::Io { path, source: e })?;
                write_json(&dir.join("summary.json"), &summary.rows)?;
            }
            return Ok(());
        }
        Cmd::Equivalence(a) => (Command::Equivalence, a),
        Cmd::Consistency(a) => (Command::Consistency, a),
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Bench(a) => (Command::Bench, a),
        Cmd::ServeSim(a) => (Command::ServeSim, a),
        Cmd::LengthSweep(a) => (Command::LengthSweep, a),
        Cmd::Ablation(a) => (Command::Ablation, a),
    };
    let cfg = load(&args.config, args.seeds.as_deref())?;
    let report = run(command, &cfg, &args.config, &args.out, worker_count())?;
    println!(
        "{} over seeds {:?} in {:.1}s -> {}",
        report.command,
        report.seeds,
        report.wall_clock_seconds,
        args.out.display()
    );
    for a in &report.aggregate {
        println!("  {}/{}: {:.6} ± {:.6}", a.method, a.metric, a.mean, a.stderr);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
