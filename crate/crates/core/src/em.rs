//! The co-training loop.
//!
//! Each policy iteration runs an E-step (DPO on pairs sampled from
//! `π_{t-1}` and ranked by `r_{t-1}`), then validation-based checkpoint
//! selection with the `τ` halt. At the designated point of each round the
//! M-step retrains the reward model from the base model on filtered
//! pseudo-pairs `(y_t ≻ y_{t-1})`, optionally mixed with self-training pairs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Result, SimError};
use crate::eval::{measure, rm_accuracy_exact, PairDistribution, RunMetrics};
use crate::pair::{PairSource, PreferencePair};
use crate::policy::{build_estep_pairs, sample_from, train_dpo, Checkpoint, DpoConfig, Policy};
use crate::reward::{bt_nll, reward_std, train_bt, BtConfig, RewardModel};
use crate::rng::{label, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterStrategy {
    /// Drop pairs with `Δr ≤ -ε`.
    Lqf,
    /// Keep pairs with `Δr ≥ ε`.
    Hqs,
    /// Relabel so the higher-scored response is chosen; drop ties.
    Dst,
    None,
}

impl FilterStrategy {
    pub const ALL: [FilterStrategy; 4] = [Self::Lqf, Self::Hqs, Self::Dst, Self::None];

    pub fn name(self) -> &'static str {
        match self {
            Self::Lqf => "lqf",
            Self::Hqs => "hqs",
            Self::Dst => "dst",
            Self::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RmData {
    PolicyComparison,
    SelfTraining,
    Mixed,
}

impl RmData {
    pub const ALL: [RmData; 3] = [Self::PolicyComparison, Self::SelfTraining, Self::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            Self::PolicyComparison => "policy-comparison",
            Self::SelfTraining => "self-training",
            Self::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundInit {
    Continue,
    RestartFromBase,
}

/// Replaces the DPO learning rate for one global policy iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrOverride {
    pub iteration: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Policy iterations per round (T).
    pub iterations_per_round: usize,
    pub rounds: usize,
    pub tau: f64,
    pub filter: FilterStrategy,
    pub rm_data: RmData,
    pub round_init: RoundInit,
    /// The M-step runs once per round, after this policy iteration.
    pub rm_update_after: usize,
    /// Draws per validation prompt when estimating checkpoint win rates.
    pub validation_draws: usize,
    pub lr_overrides: Vec<LrOverride>,
    pub dpo: DpoConfig,
    pub bt: BtConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            iterations_per_round: 2,
            rounds: 1,
            tau: 0.6,
            filter: FilterStrategy::Lqf,
            rm_data: RmData::Mixed,
            round_init: RoundInit::Continue,
            rm_update_after: 1,
            validation_draws: 16,
            lr_overrides: Vec::new(),
            dpo: DpoConfig::default(),
            bt: BtConfig {
                learning_rate: 0.5,
                steps: 100,
                response_coupling: 1.0,
                ..BtConfig::default()
            },
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..1.0).contains(&self.tau) {
            return Err(SimError::config("tau must satisfy 0.5 <= tau < 1"));
        }
        if self.iterations_per_round == 0 || self.rounds == 0 || self.validation_draws == 0 {
            return Err(SimError::config(
                "iterations_per_round, rounds and validation_draws must be positive",
            ));
        }
        if self.rm_update_after == 0 || self.rm_update_after > self.iterations_per_round {
            return Err(SimError::config("rm_update_after must lie in 1..=iterations_per_round"));
        }
        if let Some(o) = self
            .lr_overrides
            .iter()
            .find(|o| !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()))
        {
            return Err(SimError::config(format!("invalid lr override {o:?}")));
        }
        self.dpo.validate()?;
        self.bt.validate()
    }

    fn dpo_for(&self, global_iteration: usize) -> DpoConfig {
        let mut dpo = self.dpo.clone();
        if let Some(o) = self.lr_overrides.iter().find(|o| o.iteration == global_iteration) {
            dpo.learning_rate = o.learning_rate;
        }
        dpo
    }
}

/// Runs one E-step: samples and ranks pairs, then trains DPO referenced to `pi_prev`.
///
/// Returns the checkpoints and the pairs used, tagged [`PairSource::EStep`].
pub fn e_step<R: Rng + ?Sized>(
    pi_prev: &Policy,
    rm_prev: &RewardModel,
    prompts: &[usize],
    dpo: &DpoConfig,
    env: &Environment,
    rng: &mut R,
) -> Result<(Vec<Checkpoint>, Vec<PreferencePair>)> {
    e_step_from(pi_prev, pi_prev, rm_prev, prompts, dpo, env, rng)
}

/// E-step whose pairs come from `generator` while training starts from `reference`.
fn e_step_from<R: Rng + ?Sized>(
    generator: &Policy,
    reference: &Policy,
    rm: &RewardModel,
    prompts: &[usize],
    dpo: &DpoConfig,
    env: &Environment,
    rng: &mut R,
) -> Result<(Vec<Checkpoint>, Vec<PreferencePair>)> {
    if prompts.is_empty() {
        return Err(SimError::invalid("E-step needs at least one prompt"));
    }
    let pairs = build_estep_pairs(generator, rm, prompts, dpo, env, rng);
    if pairs.is_empty() {
        return Err(SimError::EmptyPairs("E-step"));
    }
    let checkpoints = train_dpo(reference, &pairs, dpo)?;
    Ok((checkpoints, pairs))
}

/// Fraction of validation draws where the candidate's response strictly
/// outscores the previous policy's response under `rm_prev`.
pub fn checkpoint_win_rate<R: Rng + ?Sized>(
    candidate: &Policy,
    pi_prev: &Policy,
    rm_prev: &RewardModel,
    validation: &[usize],
    temperature: f64,
    draws_per_prompt: usize,
    rng: &mut R,
) -> Result<f64> {
    if validation.is_empty() || draws_per_prompt == 0 {
        return Err(SimError::invalid("win rate needs validation prompts and draws"));
    }
    let mut wins = 0usize;
    for &x in validation {
        let cand = candidate.tempered_probs(x, temperature);
        let prev = pi_prev.tempered_probs(x, temperature);
        for _ in 0..draws_per_prompt {
            let y_k = sample_from(&cand, rng);
            let y_prev = sample_from(&prev, rng);
            if rm_prev.score(x, y_k) > rm_prev.score(x, y_prev) {
                wins += 1;
            }
        }
    }
    Ok(wins as f64 / (validation.len() * draws_per_prompt) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub policy: Policy,
    pub halted: bool,
    /// Best checkpoint win rate.
    pub win: f64,
    /// Step of the selected checkpoint; `None` when halted.
    pub step: Option<usize>,
    pub win_rates: Vec<f64>,
}

/// Picks the checkpoint with the highest validation win rate (latest on
/// ties), or keeps `pi_prev` when that rate is below `tau`.
pub fn select_from_win_rates(checkpoints: &[Checkpoint], win_rates: Vec<f64>, pi_prev: &Policy, tau: f64) -> Selection {
    let best = win_rates
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("at least one checkpoint");
    let win = win_rates[best];
    if win < tau {
        Selection {
            policy: pi_prev.clone(),
            halted: true,
            win,
            step: None,
            win_rates,
        }
    } else {
        Selection {
            policy: checkpoints[best].policy.clone(),
            halted: false,
            win,
            step: Some(checkpoints[best].step),
            win_rates,
        }
    }
}

/// Scores every checkpoint against `pi_prev` on the validation prompts and
/// applies the selection rule. Checkpoint `k` uses substream `k` of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn select_model(
    checkpoints: &[Checkpoint],
    pi_prev: &Policy,
    rm_prev: &RewardModel,
    validation: &[usize],
    tau: f64,
    temperature: f64,
    draws_per_prompt: usize,
    seed: u64,
) -> Result<Selection> {
    if checkpoints.is_empty() {
        return Err(SimError::invalid("model selection needs at least one checkpoint"));
    }
    let win_rates = checkpoints
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let mut rng = stream(seed, &[k as u64]);
            checkpoint_win_rate(&c.policy, pi_prev, rm_prev, validation, temperature, draws_per_prompt, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(select_from_win_rates(checkpoints, win_rates, pi_prev, tau))
}

/// One `(y_t, y_{t-1})` draw per prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PseudoDraw {
    pub prompt: usize,
    pub y_t: usize,
    pub y_prev: usize,
}

pub fn draw_pseudo_samples<R: Rng + ?Sized>(
    pi_t: &Policy,
    pi_prev: &Policy,
    prompts: &[usize],
    temperature: f64,
    rng: &mut R,
) -> Vec<PseudoDraw> {
    prompts
        .iter()
        .map(|&x| PseudoDraw {
            prompt: x,
            y_t: sample_from(&pi_t.tempered_probs(x, temperature), rng),
            y_prev: sample_from(&pi_prev.tempered_probs(x, temperature), rng),
        })
        .collect()
}

fn pairs_from_draws(draws: &[PseudoDraw]) -> Vec<PreferencePair> {
    draws
        .iter()
        .filter(|d| d.y_t != d.y_prev)
        .map(|d| PreferencePair::new(d.prompt, d.y_t, d.y_prev, PairSource::PolicyComparison))
        .collect()
}

/// Pseudo-pairs with the post-update response chosen; collisions are dropped.
pub fn build_pseudo_pairs<R: Rng + ?Sized>(
    pi_t: &Policy,
    pi_prev: &Policy,
    prompts_r: &[usize],
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<PreferencePair>> {
    if prompts_r.is_empty() {
        return Err(SimError::invalid("pseudo-pair construction needs RM prompts"));
    }
    Ok(pairs_from_draws(&draw_pseudo_samples(pi_t, pi_prev, prompts_r, temperature, rng)))
}

/// Annotates each pair with `Δr = r(chosen) - r(rejected)`.
pub fn compute_margins(pairs: &[PreferencePair], rm_prev: &RewardModel) -> Vec<PreferencePair> {
    pairs
        .iter()
        .map(|p| PreferencePair {
            margin: Some(rm_prev.margin(p)),
            ..p.clone()
        })
        .collect()
}

pub fn filter_pairs(pairs: &[PreferencePair], epsilon: f64, strategy: FilterStrategy) -> Result<Vec<PreferencePair>> {
    if !(epsilon >= 0.0) {
        return Err(SimError::invalid("epsilon must be non-negative"));
    }
    let margin = |p: &PreferencePair| {
        p.margin
            .ok_or_else(|| SimError::invalid("filter_pairs needs margins; call compute_margins first"))
    };
    let mut kept = Vec::with_capacity(pairs.len());
    for p in pairs {
        let m = margin(p)?;
        match strategy {
            FilterStrategy::Lqf if m > -epsilon => kept.push(p.clone()),
            FilterStrategy::Hqs if m >= epsilon => kept.push(p.clone()),
            FilterStrategy::Dst if m > 0.0 => kept.push(p.clone()),
            FilterStrategy::Dst if m < 0.0 => kept.push(p.swapped()),
            FilterStrategy::None => kept.push(p.clone()),
            _ => {}
        }
    }
    Ok(kept)
}

pub fn assemble_rm_data(
    policy_comparison: &[PreferencePair],
    self_training: &[PreferencePair],
    mode: RmData,
) -> Result<Vec<PreferencePair>> {
    let data: Vec<PreferencePair> = match mode {
        RmData::PolicyComparison => policy_comparison.to_vec(),
        RmData::SelfTraining => self_training.to_vec(),
        RmData::Mixed => policy_comparison.iter().chain(self_training).cloned().collect(),
    };
    if data.is_empty() {
        return Err(SimError::EmptyPairs("reward model update"));
    }
    Ok(data)
}

/// Retrains the reward model from `base_rm`, never from the previous iterate.
pub fn m_step(base_rm: &RewardModel, rm_data: &[PreferencePair], bt: &BtConfig) -> Result<RewardModel> {
    train_bt(base_rm, rm_data, bt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmUpdateReport {
    pub pseudo_built: usize,
    pub pseudo_kept: usize,
    pub self_training_pairs: usize,
    pub epsilon: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    /// ID accuracy on pairs from the updated policy, before and after.
    pub rm_accuracy_id_before: f64,
    pub rm_accuracy_id_after: f64,
    /// Pairs each strategy would keep on the same pseudo-pairs and threshold.
    pub kept_by_filter: FilterCounts,
    /// `hqs-kept ⊆ lqf-kept ⊆ none-kept` on those pairs.
    pub filter_nesting_holds: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub lqf: usize,
    pub hqs: usize,
    pub dst: usize,
    pub none: usize,
}

/// Whether every pair kept by `inner` is also kept by `outer` (same prompt, same orientation).
pub fn is_subset(inner: &[PreferencePair], outer: &[PreferencePair]) -> bool {
    use std::collections::HashMap;
    let mut available: HashMap<(usize, usize, usize), usize> = HashMap::new();
    for p in outer {
        *available.entry((p.prompt, p.chosen, p.rejected)).or_default() += 1;
    }
    inner.iter().all(|p| match available.get_mut(&(p.prompt, p.chosen, p.rejected)) {
        Some(n) if *n > 0 => {
            *n -= 1;
            true
        }
        _ => false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    /// Global policy-iteration index, starting at 1.
    pub iteration: usize,
    pub round: usize,
    /// Iteration index within the round, starting at 1.
    pub t: usize,
    pub estep_pairs: usize,
    pub win_rates: Vec<f64>,
    pub max_win_rate: f64,
    pub selected_step: Option<usize>,
    pub halted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rm_update: Option<RmUpdateReport>,
}

impl IterationReport {
    pub fn pseudo_built(&self) -> usize {
        self.rm_update.as_ref().map_or(0, |u| u.pseudo_built)
    }

    pub fn pseudo_kept(&self) -> usize {
        self.rm_update.as_ref().map_or(0, |u| u.pseudo_kept)
    }
}

/// Which prompts each policy iteration trains on and whether the reward
/// model is ever updated.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    /// The full co-training loop over the environment's partitions.
    MutualTaught,
    /// Policy iterations only, one per prompt set, judged and ranked by the base RM.
    FixedRm(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub final_policy: Policy,
    pub final_rm: RewardModel,
    pub reports: Vec<IterationReport>,
    pub metrics: RunMetrics,
    /// Reward model after each M-step, in order.
    pub rm_history: Vec<RewardModel>,
    /// Selected policy after each policy iteration (the previous one when halted).
    pub policy_history: Vec<Policy>,
}

struct RoundStart {
    generator: Option<Policy>,
    generator_rm: Option<RewardModel>,
}

/// Runs the co-training loop.
pub fn run(env: &Environment, cfg: &LoopConfig, seed: u64) -> Result<RunOutcome> {
    run_schedule(env, cfg, &Schedule::MutualTaught, seed)
}

pub fn run_schedule(env: &Environment, cfg: &LoopConfig, schedule: &Schedule, seed: u64) -> Result<RunOutcome> {
    cfg.validate()?;
    let temperature = cfg.dpo.sample_temperature;
    let mut policy = env.base_policy.clone();
    let mut rm = env.base_rm.clone();
    let mut reports = Vec::new();
    let mut metrics = RunMetrics::default();
    metrics.series.push(measure(env, 0, &policy, &rm, temperature)?);
    let mut rm_history = Vec::new();
    let mut policy_history = Vec::new();

    let (rounds, per_round) = match schedule {
        Schedule::MutualTaught => (cfg.rounds, cfg.iterations_per_round),
        Schedule::FixedRm(sets) => (1, sets.len()),
    };
    let mut global = 0usize;
    let mut start = RoundStart {
        generator: None,
        generator_rm: None,
    };

    'rounds: for round in 1..=rounds {
        let mut self_training: Vec<PreferencePair> = Vec::new();
        // Under restart-from-base, models from the previous round only generate data.
        let mut rm_updated_this_round = false;
        for t in 1..=per_round {
            global += 1;
            let prompts: &[usize] = match schedule {
                Schedule::MutualTaught => env.partitions.policy_split(t),
                Schedule::FixedRm(sets) => &sets[t - 1],
            };
            let generator = match (&start.generator, t) {
                (Some(g), 1) => g,
                _ => &policy,
            };
            let ranker = match &start.generator_rm {
                Some(g) if !rm_updated_this_round => g,
                _ => &rm,
            };
            let dpo = cfg.dpo_for(global);
            let mut rng = stream(seed, &[label::ESTEP, global as u64]);
            let outcome = e_step_from(generator, &policy, ranker, prompts, &dpo, env, &mut rng);
            let (checkpoints, estep_pairs) = match outcome {
                Ok(v) => v,
                // Every prompt degenerate: nothing left to learn, treat as a halt.
                Err(SimError::EmptyPairs(_)) => {
                    reports.push(IterationReport {
                        iteration: global,
                        round,
                        t,
                        estep_pairs: 0,
                        win_rates: Vec::new(),
                        max_win_rate: 0.0,
                        selected_step: None,
                        halted: true,
                        rm_update: None,
                    });
                    policy_history.push(policy.clone());
                    metrics.series.push(measure(env, global, &policy, &rm, temperature)?);
                    break 'rounds;
                }
                Err(e) => return Err(e),
            };
            if t == 1 {
                self_training = estep_pairs
                    .iter()
                    .map(|p| p.clone().with_source(PairSource::SelfTraining))
                    .collect();
            }
            let selection = select_model(
                &checkpoints,
                &policy,
                ranker,
                &env.partitions.validation_split,
                cfg.tau,
                temperature,
                cfg.validation_draws,
                crate::rng::derive_seed(seed, &[label::WIN_RATE, global as u64]),
            )?;
            let mut report = IterationReport {
                iteration: global,
                round,
                t,
                estep_pairs: estep_pairs.len(),
                win_rates: selection.win_rates.clone(),
                max_win_rate: selection.win,
                selected_step: selection.step,
                halted: selection.halted,
                rm_update: None,
            };
            if selection.halted {
                reports.push(report);
                policy_history.push(policy.clone());
                metrics.series.push(measure(env, global, &policy, &rm, temperature)?);
                break 'rounds;
            }
            let pi_prev = std::mem::replace(&mut policy, selection.policy);
            policy_history.push(policy.clone());

            if matches!(schedule, Schedule::MutualTaught) && t == cfg.rm_update_after {
                let (new_rm, update) = update_reward_model(env, cfg, &policy, &pi_prev, ranker, &self_training, seed, global)?;
                rm = new_rm;
                rm_history.push(rm.clone());
                rm_updated_this_round = true;
                report.rm_update = Some(update);
            }
            reports.push(report);
            metrics.series.push(measure(env, global, &policy, &rm, temperature)?);
        }
        if cfg.round_init == RoundInit::RestartFromBase && round < rounds {
            start = RoundStart {
                generator: Some(policy.clone()),
                generator_rm: Some(rm.clone()),
            };
            policy = env.base_policy.clone();
            rm = env.base_rm.clone();
        }
    }

    let scheduled = rounds * per_round;
    while metrics.series.len() <= scheduled {
        let mut carried = metrics.series.last().expect("series starts with iteration 0").clone();
        carried.iteration += 1;
        metrics.series.push(carried);
    }

    Ok(RunOutcome {
        final_policy: policy,
        final_rm: rm,
        reports,
        metrics,
        rm_history,
        policy_history,
    })
}

#[allow(clippy::too_many_arguments)]
fn update_reward_model(
    env: &Environment,
    cfg: &LoopConfig,
    pi_t: &Policy,
    pi_prev: &Policy,
    rm_prev: &RewardModel,
    self_training: &[PreferencePair],
    seed: u64,
    global: usize,
) -> Result<(RewardModel, RmUpdateReport)> {
    let temperature = cfg.dpo.sample_temperature;
    let rm_prompts = &env.partitions.rm_split;
    let mut rng = stream(seed, &[label::PSEUDO, global as u64]);
    let draws = draw_pseudo_samples(pi_t, pi_prev, rm_prompts, temperature, &mut rng);
    let prev_samples: Vec<(usize, usize)> = draws.iter().map(|d| (d.prompt, d.y_prev)).collect();
    let epsilon = reward_std(rm_prev, &prev_samples)?;
    let pseudo = compute_margins(&pairs_from_draws(&draws), rm_prev);
    let kept = filter_pairs(&pseudo, epsilon, cfg.filter)?;
    let lqf = filter_pairs(&pseudo, epsilon, FilterStrategy::Lqf)?;
    let hqs = filter_pairs(&pseudo, epsilon, FilterStrategy::Hqs)?;
    let dst = filter_pairs(&pseudo, epsilon, FilterStrategy::Dst)?;
    let none = filter_pairs(&pseudo, epsilon, FilterStrategy::None)?;
    let data = assemble_rm_data(&kept, self_training, cfg.rm_data)?;
    let new_rm = m_step(&env.base_rm, &data, &cfg.bt)?;
    let all = env.all_prompts();
    let id = PairDistribution::Policy(pi_t, temperature);
    let report = RmUpdateReport {
        pseudo_built: pseudo.len(),
        pseudo_kept: kept.len(),
        self_training_pairs: self_training.len(),
        epsilon,
        nll_before: bt_nll(&env.base_rm, &data)?,
        nll_after: bt_nll(&new_rm, &data)?,
        rm_accuracy_id_before: rm_accuracy_exact(rm_prev, env, &all, id)?,
        rm_accuracy_id_after: rm_accuracy_exact(&new_rm, env, &all, id)?,
        kept_by_filter: FilterCounts {
            lqf: lqf.len(),
            hqs: hqs.len(),
            dst: dst.len(),
            none: none.len(),
        },
        filter_nesting_holds: is_subset(&hqs, &lqf) && is_subset(&lqf, &none),
    };
    Ok((new_rm, report))
}

/// Writes one JSON object per report.
pub fn reports_to_jsonl(reports: &[IterationReport]) -> Result<String> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
