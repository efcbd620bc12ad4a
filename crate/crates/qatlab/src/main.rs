use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qatlab::config::ExperimentConfig;
use qatlab::experiment::{export_plotdata, run_ablation, run_experiment, run_verify};

#[derive(Parser)]
#[command(name = "qatlab", about = "Quantization-aware training laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML); defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Replace the config seed for this invocation.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configured run and write its artifacts.
    Run(RunArgs),
    /// Run every cell of the config's ablate grid.
    Ablate {
        #[command(flatten)]
        common: RunArgs,
        /// Maximum concurrent grid cells.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Export down-sampled plot series from a finished or partial run.
    ExportPlotdata {
        /// Run directory holding trace.csv (and optionally spectra.json).
        #[arg(long)]
        out: PathBuf,
        /// Second run directory to join on the step grid for comparison.
        paired: Option<PathBuf>,
    },
    /// Integer-path equivalence suite and convergence-bound check.
    Verify {
        #[arg(long)]
        seed_override: Option<u64>,
    },
}

fn load_config(args: &RunArgs) -> qatlab::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed_override {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> qatlab::Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let summary = run_experiment(&cfg, &args.out)?;
            println!(
                "run {}: {} steps, final loss {}, phase log {:?}",
                summary.status,
                summary.steps,
                summary.final_loss.map(|l| format!("{l:.6}")).unwrap_or_else(|| "-".into()),
                summary.phase_log
            );
            Ok(())
        }
        Command::Ablate { common, parallel } => {
            let cfg = load_config(&common)?;
            let cells = run_ablation(&cfg, &common.out, parallel)?;
            println!("{}", std::fs::read_to_string(common.out.join("ablation.txt"))?);
            println!("{} cells complete", cells.len());
            Ok(())
        }
        Command::ExportPlotdata { out, paired } => {
            let path = export_plotdata(&out, paired.as_deref())?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Verify { seed_override } => {
            let report = run_verify(seed_override.unwrap_or(0))?;
            println!(
                "integer-path equivalence: {} layers, max |diff| = {:e}",
                report.equivalence_layers, report.max_abs_diff
            );
            println!(
                "packed payload: {} B vs {} B dense-16 ({:.2}%)",
                report.packed_payload_bytes,
                report.dense16_payload_bytes,
                100.0 * report.size_ratio
            );
            println!(
                "regret bound: {}/{} runs hold, worst slack {:.3e}",
                report.regret_holds, report.regret_runs, report.worst_regret_slack
            );
            if report.ok {
                println!("verify: PASS");
                Ok(())
            } else {
                Err(qatlab::Error::invalid("verification failed"))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
