//! `mtsim`: command-line front end for the Mutual-Taught simulator.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error,
//! 3 verification failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mutual_taught::experiment::{run_ablation, run_experiment, AblationAxis, ExperimentConfig, Method};
use mutual_taught::gradcheck::{run_gradcheck, GradcheckOptions};
use mutual_taught::SimError;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFICATION: u8 = 3;

#[derive(Parser)]
#[command(name = "mtsim", version, about = "Tabular Mutual-Taught policy/reward co-training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Experiment configuration (JSON); absent keys take defaults.
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the generated environment(s) as JSON.
    #[arg(long)]
    write_env: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Filter,
    RmData,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    OfflineDpo,
    IterDpo,
}

#[derive(Subcommand)]
enum Command {
    /// Run the method named in the configuration.
    Run(Overrides),
    /// Check analytic DPO and BT gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 25)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb every analytic gradient entry (detector sanity check).
        #[arg(long, default_value_t = 0.0, hide = true)]
        corrupt: f64,
    },
    /// Run every variant along one axis on shared environments.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a fixed-reward-model baseline.
    Baseline {
        #[arg(long, value_enum)]
        method: Baseline,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn load(o: &Overrides) -> Result<ExperimentConfig, SimError> {
    let mut cfg = ExperimentConfig::from_file(&o.config)?;
    if let Some(seed) = o.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &o.out {
        cfg.out_dir = out.clone();
    }
    cfg.write_env |= o.write_env;
    Ok(cfg)
}

fn fail(err: SimError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(if err.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
}

fn experiment(cfg: ExperimentConfig) -> ExitCode {
    match run_experiment(&cfg) {
        Ok(out) if out.status.failed.is_empty() => {
            println!(
                "{}: {} seed(s) written to {}",
                cfg.method.name(),
                out.status.completed_seeds.len(),
                cfg.out_dir.display()
            );
            ExitCode::SUCCESS
        }
        Ok(out) => {
            for f in &out.status.failed {
                eprintln!("error: seed {}: {}", f.seed, f.error);
            }
            eprintln!("partial results written; see {}", cfg.out_dir.join("status.json").display());
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(e) => fail(e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(o) => match load(&o) {
            Ok(cfg) => experiment(cfg),
            Err(e) => fail(e),
        },
        Command::Baseline { method, overrides } => match load(&overrides) {
            Ok(mut cfg) => {
                cfg.method = match method {
                    Baseline::OfflineDpo => Method::OfflineDpo,
                    Baseline::IterDpo => Method::IterDpoFixedRm,
                };
                experiment(cfg)
            }
            Err(e) => fail(e),
        },
        Command::Ablate { axis, overrides } => {
            let axis = match axis {
                Axis::Filter => AblationAxis::Filter,
                Axis::RmData => AblationAxis::RmData,
            };
            let result = load(&overrides).and_then(|cfg| run_ablation(&cfg, axis).map(|runs| (cfg, runs)));
            match result {
                Ok((cfg, runs)) => {
                    println!(
                        "ablation {}: {} run(s) written to {}",
                        axis.name(),
                        runs.len(),
                        cfg.out_dir.join(format!("ablation-{}.csv", axis.name())).display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Gradcheck {
            instances,
            seed,
            corrupt,
        } => {
            let opts = GradcheckOptions {
                instances,
                seed,
                corruption: corrupt,
            };
            match run_gradcheck(&opts) {
                Ok(report) => {
                    println!(
                        "gradcheck: {} instances, dpo max rel error {:.3e}, bt max rel error {:.3e}, tolerance {:.0e}: {}",
                        report.instances,
                        report.dpo_max_rel_error,
                        report.bt_max_rel_error,
                        report.tolerance,
                        if report.passed { "PASS" } else { "FAIL" }
                    );
                    if report.passed {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_VERIFICATION)
                    }
                }
                Err(e) => fail(e),
            }
        }
    }
}
