//! Evaluation oracles.
//!
//! Exact evaluators enumerate responses and need no randomness. The
//! ground-truth table `r*` plays the role of the external judge.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{pistar, Environment};
use crate::error::{Result, SimError};
use crate::math::kl_divergence;
use crate::policy::{build_estep_pairs, sample_from, train_dpo, DpoConfig, Policy};
use crate::reward::RewardModel;
use crate::rng::{label, stream};
use crate::table::Table;

fn require_prompts(prompts: &[usize], n: usize) -> Result<()> {
    if prompts.is_empty() {
        return Err(SimError::invalid("evaluation needs at least one prompt"));
    }
    if let Some(&x) = prompts.iter().find(|&&x| x >= n) {
        return Err(SimError::invalid(format!("prompt {x} out of range")));
    }
    Ok(())
}

/// `mean_x Σ_y π(y|x)·r(x, y)`, computed exactly.
pub fn expected_reward(policy: &Policy, reward: &Table, prompts: &[usize]) -> Result<f64> {
    require_prompts(prompts, policy.num_prompts())?;
    let total: f64 = prompts
        .iter()
        .map(|&x| policy.probs(x).iter().zip(reward.row(x)).map(|(p, r)| p * r).sum::<f64>())
        .sum();
    Ok(total / prompts.len() as f64)
}

fn pairwise_win(pa: &[f64], pb: &[f64], rstar: &[f64], include: impl Fn(usize, usize) -> bool) -> (f64, f64) {
    let (mut win, mut mass) = (0.0, 0.0);
    for (y, &a) in pa.iter().enumerate() {
        for (z, &b) in pb.iter().enumerate() {
            if !include(y, z) {
                continue;
            }
            let w = a * b;
            mass += w;
            if rstar[y] > rstar[z] {
                win += w;
            } else if rstar[y] == rstar[z] {
                win += 0.5 * w;
            }
        }
    }
    (win, mass)
}

/// Probability that a draw from `pi_a` beats a draw from `pi_b` under `r*`,
/// ties counted as half, averaged over prompts.
pub fn true_win_rate_exact(pi_a: &Policy, pi_b: &Policy, env: &Environment, prompts: &[usize]) -> Result<f64> {
    require_prompts(prompts, env.num_prompts())?;
    let total: f64 = prompts
        .iter()
        .map(|&x| pairwise_win(&pi_a.probs(x), &pi_b.probs(x), env.rstar.row(x), |_, _| true).0)
        .sum();
    Ok(total / prompts.len() as f64)
}

/// Length bucket of a response; lengths are split into `buckets` equal bands.
pub fn length_bucket(env: &Environment, length: u32, buckets: u32) -> u32 {
    let span = (env.config.length_max - env.config.length_min + 1) as u64;
    (((length - env.config.length_min) as u64 * buckets as u64) / span) as u32
}

/// Win rate restricted to comparisons whose two responses share a length
/// bucket, renormalized over that restricted mass. Prompts with no
/// same-bucket mass are skipped.
pub fn true_win_rate_length_matched(
    pi_a: &Policy,
    pi_b: &Policy,
    env: &Environment,
    prompts: &[usize],
    buckets: u32,
) -> Result<f64> {
    require_prompts(prompts, env.num_prompts())?;
    let (mut win, mut mass) = (0.0, 0.0);
    for &x in prompts {
        let lens = env.lengths_row(x);
        let (w, m) = pairwise_win(&pi_a.probs(x), &pi_b.probs(x), env.rstar.row(x), |y, z| {
            length_bucket(env, lens[y], buckets) == length_bucket(env, lens[z], buckets)
        });
        win += w;
        mass += m;
    }
    Ok(if mass > 0.0 { win / mass } else { 0.5 })
}

/// `mean_x KL(π_a(·|x) ‖ π_b(·|x))`.
pub fn kl_between(pi_a: &Policy, pi_b: &Policy, prompts: &[usize]) -> Result<f64> {
    if pi_a.num_responses() != pi_b.num_responses() {
        return Err(SimError::invalid("policies disagree on the number of responses"));
    }
    require_prompts(prompts, pi_a.num_prompts().min(pi_b.num_prompts()))?;
    let total: f64 = prompts
        .iter()
        .map(|&x| kl_divergence(&pi_a.log_probs(x), &pi_b.log_probs(x)))
        .sum();
    Ok((total / prompts.len() as f64).max(0.0))
}

/// `mean_x KL(π(·|x) ‖ π*(·|x))`.
pub fn kl_to_pistar(policy: &Policy, env: &Environment, prompts: &[usize]) -> Result<f64> {
    require_prompts(prompts, env.num_prompts())?;
    let mut total = 0.0;
    for &x in prompts {
        let target: Vec<f64> = pistar(env, x)?.iter().map(|q| q.ln()).collect();
        total += kl_divergence(&policy.log_probs(x), &target);
    }
    Ok((total / prompts.len() as f64).max(0.0))
}

/// Response distribution that RM accuracy pairs are drawn from.
#[derive(Debug, Clone, Copy)]
pub enum PairDistribution<'a> {
    /// Both responses drawn from a policy at the given sampling temperature.
    Policy(&'a Policy, f64),
    Uniform,
}

impl PairDistribution<'_> {
    fn probs(&self, prompt: usize, responses: usize) -> Vec<f64> {
        match *self {
            PairDistribution::Policy(p, temperature) => p.tempered_probs(prompt, temperature),
            PairDistribution::Uniform => vec![1.0 / responses as f64; responses],
        }
    }
}

fn sign_matches(rm: &RewardModel, rstar: &[f64], x: usize, a: usize, b: usize) -> bool {
    let truth = rstar[a] - rstar[b];
    let pred = rm.score(x, a) - rm.score(x, b);
    // A zero RM margin never matches.
    (truth > 0.0 && pred > 0.0) || (truth < 0.0 && pred < 0.0)
}

/// Sampled pairwise accuracy of `rm` against `r*`. Each draw picks a prompt
/// uniformly then two responses from `dist`; pairs tied under `r*` are
/// redrawn.
pub fn rm_accuracy<R: Rng + ?Sized>(
    rm: &RewardModel,
    env: &Environment,
    prompts: &[usize],
    dist: PairDistribution<'_>,
    rng: &mut R,
    num_pairs: usize,
) -> Result<f64> {
    require_prompts(prompts, env.num_prompts())?;
    if num_pairs == 0 {
        return Err(SimError::invalid("rm_accuracy needs num_pairs >= 1"));
    }
    let r = env.num_responses();
    let rows: Vec<Vec<f64>> = prompts.iter().map(|&x| dist.probs(x, r)).collect();
    let (mut correct, mut valid, mut attempts) = (0usize, 0usize, 0usize);
    while valid < num_pairs {
        attempts += 1;
        if attempts > 1000 * num_pairs {
            return Err(SimError::invalid("no comparable (non-tied) response pairs under this distribution"));
        }
        let i = rng.gen_range(0..prompts.len());
        let x = prompts[i];
        let a = sample_from(&rows[i], rng);
        let b = sample_from(&rows[i], rng);
        let rstar = env.rstar.row(x);
        if rstar[a] == rstar[b] {
            continue;
        }
        valid += 1;
        if sign_matches(rm, rstar, x, a, b) {
            correct += 1;
        }
    }
    Ok(correct as f64 / valid as f64)
}

/// Exact counterpart of [`rm_accuracy`]: the probability of a sign match
/// given that the drawn pair is not tied under `r*`.
pub fn rm_accuracy_exact(
    rm: &RewardModel,
    env: &Environment,
    prompts: &[usize],
    dist: PairDistribution<'_>,
) -> Result<f64> {
    require_prompts(prompts, env.num_prompts())?;
    let r = env.num_responses();
    let (mut correct, mut mass) = (0.0, 0.0);
    for &x in prompts {
        let p = dist.probs(x, r);
        let rstar = env.rstar.row(x);
        let (mut c, mut m) = (0.0, 0.0);
        for a in 0..r {
            for b in 0..r {
                if rstar[a] == rstar[b] {
                    continue;
                }
                let w = p[a] * p[b];
                m += w;
                if sign_matches(rm, rstar, x, a, b) {
                    c += w;
                }
            }
        }
        if m > 0.0 {
            correct += c / m;
            mass += 1.0;
        }
    }
    if mass == 0.0 {
        return Err(SimError::invalid("no comparable (non-tied) response pairs under this distribution"));
    }
    Ok(correct / mass)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    /// 0 for the starting models, then one entry per policy iteration.
    pub iteration: usize,
    pub expected_true_reward: f64,
    pub kl_to_pistar: f64,
    pub true_win_vs_base: f64,
    pub true_win_vs_base_length_matched: f64,
    pub rm_accuracy_id: f64,
    pub rm_accuracy_ood: f64,
}

impl IterationMetrics {
    pub const NAMES: [&'static str; 6] = [
        "expected_true_reward",
        "kl_to_pistar",
        "true_win_vs_base",
        "true_win_vs_base_length_matched",
        "rm_accuracy_id",
        "rm_accuracy_ood",
    ];

    pub fn values(&self) -> [f64; 6] {
        [
            self.expected_true_reward,
            self.kl_to_pistar,
            self.true_win_vs_base,
            self.true_win_vs_base_length_matched,
            self.rm_accuracy_id,
            self.rm_accuracy_ood,
        ]
    }
}

pub const LENGTH_BUCKETS: u32 = 4;

/// Exact metrics of a (policy, reward model) state over all prompts.
///
/// ID accuracy uses pairs from `policy` at `temperature`; OOD accuracy uses
/// uniform pairs.
pub fn measure(
    env: &Environment,
    iteration: usize,
    policy: &Policy,
    rm: &RewardModel,
    temperature: f64,
) -> Result<IterationMetrics> {
    let all = env.all_prompts();
    Ok(IterationMetrics {
        iteration,
        expected_true_reward: expected_reward(policy, &env.rstar, &all)?,
        kl_to_pistar: kl_to_pistar(policy, env, &all)?,
        true_win_vs_base: true_win_rate_exact(policy, &env.base_policy, env, &all)?,
        true_win_vs_base_length_matched: true_win_rate_length_matched(
            policy,
            &env.base_policy,
            env,
            &all,
            LENGTH_BUCKETS,
        )?,
        rm_accuracy_id: rm_accuracy_exact(rm, env, &all, PairDistribution::Policy(policy, temperature))
            .unwrap_or(f64::NAN),
        rm_accuracy_ood: rm_accuracy_exact(rm, env, &all, PairDistribution::Uniform).unwrap_or(f64::NAN),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunMetrics {
    pub series: Vec<IterationMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferRecord>,
}

impl RunMetrics {
    pub fn last(&self) -> Option<&IterationMetrics> {
        self.series.last()
    }
}

/// How the fresh policy of the transfer experiment is built and trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// Fresh logits are `alignment·r* + noise_std·N(0,1)` from an independent stream.
    pub alignment: f64,
    pub noise_std: f64,
    pub dpo: DpoConfig,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            alignment: 0.5,
            noise_std: 1.0,
            dpo: DpoConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub fresh_expected_true_reward: f64,
    pub base_rm_expected_true_reward: f64,
    pub iterated_rm_expected_true_reward: f64,
    pub base_rm_win_vs_fresh: f64,
    pub iterated_rm_win_vs_fresh: f64,
    /// iterated minus base expected true reward.
    pub reward_delta: f64,
    pub win_delta: f64,
}

pub fn fresh_policy(env: &Environment, alignment: f64, noise_std: f64, seed: u64) -> Policy {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = stream(seed, &[label::TRANSFER, 0]);
    Policy::new(Table::from_fn(env.num_prompts(), env.num_responses(), |x, y| {
        let z: f64 = StandardNormal.sample(&mut rng);
        alignment * env.rstar.get(x, y) + noise_std * z
    }))
}

fn train_with(env: &Environment, fresh: &Policy, rm: &RewardModel, cfg: &TransferConfig) -> Result<Policy> {
    let prompts: Vec<usize> = env
        .partitions
        .policy_split_1
        .iter()
        .chain(&env.partitions.policy_split_2)
        .copied()
        .collect();
    // Identical sampling stream for both reward models.
    let mut rng = stream(cfg.seed, &[label::TRANSFER, 1]);
    let pairs = build_estep_pairs(fresh, rm, &prompts, &cfg.dpo, env, &mut rng);
    let checkpoints = train_dpo(fresh, &pairs, &cfg.dpo)?;
    Ok(checkpoints.last().expect("train_dpo yields a final checkpoint").policy.clone())
}

/// Trains one fresh policy per reward model with a single DPO pass and
/// compares the outcomes under the ground truth.
pub fn transfer_eval(
    rm_iterated: &RewardModel,
    rm_base: &RewardModel,
    env: &Environment,
    cfg: &TransferConfig,
) -> Result<TransferRecord> {
    let fresh = fresh_policy(env, cfg.alignment, cfg.noise_std, cfg.seed);
    let with_base = train_with(env, &fresh, rm_base, cfg)?;
    let with_iter = train_with(env, &fresh, rm_iterated, cfg)?;
    let all = env.all_prompts();
    let base_reward = expected_reward(&with_base, &env.rstar, &all)?;
    let iter_reward = expected_reward(&with_iter, &env.rstar, &all)?;
    let base_win = true_win_rate_exact(&with_base, &fresh, env, &all)?;
    let iter_win = true_win_rate_exact(&with_iter, &fresh, env, &all)?;
    Ok(TransferRecord {
        fresh_expected_true_reward: expected_reward(&fresh, &env.rstar, &all)?,
        base_rm_expected_true_reward: base_reward,
        iterated_rm_expected_true_reward: iter_reward,
        base_rm_win_vs_fresh: base_win,
        iterated_rm_win_vs_fresh: iter_win,
        reward_delta: iter_reward - base_reward,
        win_delta: iter_win - base_win,
    })
}
