//! Experiment configuration, method dispatch and artifact output.
//!
//! A run directory contains:
//!
//! - `config.echo.json`: the fully-defaulted configuration
//! - `iterations.jsonl`: one record per (seed, policy iteration)
//! - `summary.csv`: `seed,method,iteration,metric,value`
//! - `env.json` (single seed) or `env-<seed>.json`: optional
//! - `status.json`: completed and failed seeds

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::em::{run_schedule, FilterStrategy, IterationReport, LoopConfig, RmData, RunOutcome, Schedule};
use crate::env::{build_environment, EnvConfig, Environment};
use crate::error::{Result, SimError};
use crate::eval::{transfer_eval, IterationMetrics, TransferConfig, TransferRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    MutualTaught,
    OfflineDpo,
    IterDpoFixedRm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::MutualTaught => "mutual-taught",
            Self::OfflineDpo => "offline-dpo",
            Self::IterDpoFixedRm => "iter-dpo-fixed-rm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub write_env: bool,
    /// Run the reward-model transfer experiment after each seed.
    pub transfer: bool,
    pub transfer_cfg: TransferConfig,
    /// Worker threads for independent seeds; 0 picks the machine's parallelism.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let loop_cfg = LoopConfig::default();
        let transfer_cfg = TransferConfig {
            dpo: loop_cfg.dpo.clone(),
            ..TransferConfig::default()
        };
        Self {
            env: EnvConfig::default(),
            loop_cfg,
            method: Method::MutualTaught,
            seeds: vec![0],
            out_dir: PathBuf::from("out"),
            write_env: false,
            transfer: false,
            transfer_cfg,
            threads: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| SimError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| SimError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(SimError::config("at least one seed is required"));
        }
        self.env.validate()?;
        self.loop_cfg.validate()?;
        self.transfer_cfg.dpo.validate()
    }

    fn env_for(&self, seed: u64) -> EnvConfig {
        EnvConfig {
            seed,
            ..self.env.clone()
        }
    }
}

/// Policy-update prompt sets for a baseline method.
pub fn schedule_for(method: Method, env: &Environment) -> Schedule {
    let p = &env.partitions;
    match method {
        Method::MutualTaught => Schedule::MutualTaught,
        Method::IterDpoFixedRm => Schedule::FixedRm(vec![
            p.policy_split_1.clone(),
            p.policy_split_2.clone(),
            p.rm_split.clone(),
        ]),
        Method::OfflineDpo => {
            let mut all: Vec<usize> = p
                .policy_split_1
                .iter()
                .chain(&p.policy_split_2)
                .chain(&p.rm_split)
                .copied()
                .collect();
            all.sort_unstable();
            Schedule::FixedRm(vec![all])
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub method: Method,
    pub env_fingerprint: String,
    pub outcome: RunOutcome,
    pub transfer: Option<TransferRecord>,
    pub env: Option<Environment>,
}

/// Builds the environment for `seed` and runs `method` on it.
pub fn run_seed(cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<SeedResult> {
    let env = build_environment(&cfg.env_for(seed))?;
    run_on_env(cfg, method, seed, env)
}

fn run_on_env(cfg: &ExperimentConfig, method: Method, seed: u64, env: Environment) -> Result<SeedResult> {
    let schedule = schedule_for(method, &env);
    let mut outcome = run_schedule(&env, &cfg.loop_cfg, &schedule, seed)?;
    let transfer = if cfg.transfer {
        let iterated = outcome.rm_history.first().unwrap_or(&outcome.final_rm);
        let tcfg = TransferConfig {
            seed,
            ..cfg.transfer_cfg.clone()
        };
        Some(transfer_eval(iterated, &env.base_rm, &env, &tcfg)?)
    } else {
        None
    };
    outcome.metrics.transfer = transfer.clone();
    Ok(SeedResult {
        seed,
        method,
        env_fingerprint: env.fingerprint()?,
        outcome,
        transfer,
        env: cfg.write_env.then_some(env),
    })
}

fn worker_count(requested: usize, jobs: usize) -> usize {
    let n = if requested == 0 {
        thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        requested
    };
    n.clamp(1, jobs.max(1))
}

/// Runs `job` over `items` on scoped threads, keeping input order.
pub fn parallel_map<T: Sync, U: Send>(items: &[T], threads: usize, job: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = worker_count(threads, items.len());
    if workers <= 1 {
        return items.iter().map(&job).collect();
    }
    let chunk = items.len().div_ceil(workers);
    thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let job = &job;
                scope.spawn(move || part.iter().map(job).collect::<Vec<U>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

#[derive(Debug, Serialize)]
struct IterationRecord<'a> {
    seed: u64,
    method: &'static str,
    #[serde(flatten)]
    report: &'a IterationReport,
    metrics: Option<&'a IterationMetrics>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RunStatus {
    pub completed_seeds: Vec<u64>,
    pub failed: Vec<FailedSeed>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct FailedSeed {
    pub seed: u64,
    pub error: String,
}

pub fn summary_rows(results: &[SeedResult]) -> Vec<[String; 5]> {
    let mut rows = Vec::new();
    for r in results {
        for m in &r.outcome.metrics.series {
            for (name, value) in IterationMetrics::NAMES.iter().zip(m.values()) {
                rows.push([
                    r.seed.to_string(),
                    r.method.name().to_string(),
                    m.iteration.to_string(),
                    name.to_string(),
                    value.to_string(),
                ]);
            }
        }
        if let Some(t) = &r.transfer {
            let last = r.outcome.metrics.last().map_or(0, |m| m.iteration).to_string();
            for (name, value) in [
                ("transfer_base_rm_expected_true_reward", t.base_rm_expected_true_reward),
                ("transfer_iterated_rm_expected_true_reward", t.iterated_rm_expected_true_reward),
                ("transfer_reward_delta", t.reward_delta),
                ("transfer_win_delta", t.win_delta),
            ] {
                rows.push([
                    r.seed.to_string(),
                    r.method.name().to_string(),
                    last.clone(),
                    name.to_string(),
                    value.to_string(),
                ]);
            }
        }
    }
    rows
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub results: Vec<SeedResult>,
    pub status: RunStatus,
}

/// Runs every seed of `cfg` and writes the run directory.
///
/// Seeds that fail are listed in `status.json`; the outputs of the others
/// are still written.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.echo.json"), cfg.to_json_pretty()?)?;

    let outcomes = parallel_map(&cfg.seeds, cfg.threads, |&seed| (seed, run_seed(cfg, cfg.method, seed)));
    let mut results = Vec::new();
    let mut status = RunStatus {
        completed_seeds: Vec::new(),
        failed: Vec::new(),
    };
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(r) => {
                status.completed_seeds.push(seed);
                results.push(r);
            }
            Err(e) => status.failed.push(FailedSeed {
                seed,
                error: e.to_string(),
            }),
        }
    }

    let mut jsonl = String::new();
    for r in &results {
        for report in &r.outcome.reports {
            let record = IterationRecord {
                seed: r.seed,
                method: r.method.name(),
                report,
                metrics: r.outcome.metrics.series.get(report.iteration),
            };
            jsonl.push_str(&serde_json::to_string(&record)?);
            jsonl.push('\n');
        }
        if let Some(env) = &r.env {
            let name = if cfg.seeds.len() == 1 {
                "env.json".to_string()
            } else {
                format!("env-{}.json", r.seed)
            };
            fs::write(cfg.out_dir.join(name), env.to_json()?)?;
        }
    }
    fs::write(cfg.out_dir.join("iterations.jsonl"), jsonl)?;
    let rows: Vec<Vec<String>> = summary_rows(&results).into_iter().map(Vec::from).collect();
    write_csv(
        &cfg.out_dir.join("summary.csv"),
        &["seed", "method", "iteration", "metric", "value"],
        &rows,
    )?;
    fs::write(cfg.out_dir.join("status.json"), serde_json::to_string_pretty(&status)?)?;
    Ok(ExperimentOutput { results, status })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Filter,
    RmData,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Filter => "filter",
            Self::RmData => "rm-data",
        }
    }

    /// Variant names and the loop configuration each one runs.
    pub fn variants(self, base: &LoopConfig) -> Vec<(&'static str, LoopConfig)> {
        match self {
            Self::Filter => FilterStrategy::ALL
                .iter()
                .map(|&f| {
                    (
                        f.name(),
                        LoopConfig {
                            filter: f,
                            ..base.clone()
                        },
                    )
                })
                .collect(),
            Self::RmData => RmData::ALL
                .iter()
                .map(|&d| {
                    (
                        d.name(),
                        LoopConfig {
                            rm_data: d,
                            ..base.clone()
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub seed: u64,
    pub variant: &'static str,
    pub env_fingerprint: String,
    pub outcome: RunOutcome,
}

pub const ABLATION_HEADER: [&str; 13] = [
    "seed",
    "axis",
    "variant",
    "iteration",
    "expected_true_reward",
    "kl_to_pistar",
    "true_win_vs_base",
    "true_win_vs_base_length_matched",
    "rm_accuracy_id",
    "rm_accuracy_ood",
    "pseudo_built",
    "pseudo_kept",
    "filter_nesting_holds",
];

/// Runs every variant of `axis` on each seed's shared environment and
/// writes `ablation-<axis>.csv` (one row per seed, variant and iteration).
pub fn run_ablation(cfg: &ExperimentConfig, axis: AblationAxis) -> Result<Vec<AblationRun>> {
    cfg.validate()?;
    if cfg.seeds.len() < 10 {
        eprintln!(
            "warning: {} seed(s); paired comparisons need at least 10 to be meaningful",
            cfg.seeds.len()
        );
    }
    let variants = axis.variants(&cfg.loop_cfg);
    let per_seed = parallel_map(&cfg.seeds, cfg.threads, |&seed| -> Result<Vec<AblationRun>> {
        let mut runs = Vec::new();
        let mut fingerprint: Option<String> = None;
        for (name, loop_cfg) in &variants {
            // Rebuilt per variant so the fingerprint check witnesses a shared world.
            let env = build_environment(&cfg.env_for(seed))?;
            let fp = env.fingerprint()?;
            match &fingerprint {
                Some(first) if *first != fp => {
                    return Err(SimError::invalid(format!("environment for seed {seed} is not reproducible")))
                }
                None => fingerprint = Some(fp.clone()),
                _ => {}
            }
            let outcome = run_schedule(&env, loop_cfg, &Schedule::MutualTaught, seed)?;
            runs.push(AblationRun {
                seed,
                variant: name,
                env_fingerprint: fp,
                outcome,
            });
        }
        Ok(runs)
    });
    let mut runs = Vec::new();
    for r in per_seed {
        runs.extend(r?);
    }

    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.echo.json"), cfg.to_json_pretty()?)?;
    let mut rows = Vec::new();
    for run in &runs {
        for m in &run.outcome.metrics.series {
            let report = m
                .iteration
                .checked_sub(1)
                .and_then(|i| run.outcome.reports.get(i));
            let update = report.and_then(|r| r.rm_update.as_ref());
            let mut row = vec![run.seed.to_string(), axis.name().to_string(), run.variant.to_string(), m.iteration.to_string()];
            row.extend(m.values().iter().map(|v| v.to_string()));
            row.push(update.map_or(0, |u| u.pseudo_built).to_string());
            row.push(update.map_or(0, |u| u.pseudo_kept).to_string());
            row.push(update.is_none_or(|u| u.filter_nesting_holds).to_string());
            rows.push(row);
        }
    }
    write_csv(
        &cfg.out_dir.join(format!("ablation-{}.csv", axis.name())),
        &ABLATION_HEADER,
        &rows,
    )?;
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_round_trip_through_echo() {
        let cfg = ExperimentConfig::default();
        let echo = cfg.to_json_pretty().unwrap();
        assert_eq!(ExperimentConfig::from_json(&echo).unwrap(), cfg);
        // absent keys take defaults
        let partial = ExperimentConfig::from_json(r#"{"seeds":[3,4],"method":"offline-dpo"}"#).unwrap();
        assert_eq!(partial.seeds, vec![3, 4]);
        assert_eq!(partial.env, EnvConfig::default());
    }

    #[test]
    fn config_errors_are_reported_as_config() {
        for bad in [
            r#"{"seeds":[]}"#,
            r#"{"unknown_key":1}"#,
            r#"{"loop":{"tau":0.4}}"#,
            r#"{"env":{"partition_fractions":[0.5,0.5,0.5,0.0]}}"#,
        ] {
            let err = ExperimentConfig::from_json(bad).unwrap_err();
            assert!(err.is_config(), "{bad}: {err}");
        }
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..17).collect();
        assert_eq!(parallel_map(&items, 4, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
