//! The synthetic alignment world.
//!
//! An [`Environment`] holds the ground-truth reward table `r*`, response
//! lengths, the four prompt partitions, a weakly aligned base policy and a
//! base reward model pretrained only on that policy's samples.
//!
//! Ground truth has a per-response component shared by all prompts plus a
//! per-prompt idiosyncratic component:
//!
//! ```text
//! r*[x][y] = scale · (√ρ · q[y] + √(1-ρ) · u[x][y]),   q, u ~ N(0, 1)
//! ```

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SimError};
use crate::math::{sigmoid, tempered_softmax};
use crate::pair::{PairSource, PreferencePair};
use crate::policy::{sample_response, Policy};
use crate::reward::{train_bt, BtConfig, RewardModel};
use crate::rng::{label, stream};
use crate::table::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Annotation {
    /// The better response wins with probability `σ(r*_a - r*_b)`.
    BtNoise,
    /// The higher-`r*` response always wins; ties go to the smaller id.
    NoiseFree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub num_prompts: usize,
    pub num_responses: usize,
    /// Standard deviation of `r*` entries.
    pub reward_scale: f64,
    /// Fraction ρ of `r*` variance carried by the per-response component.
    pub shared_reward_fraction: f64,
    /// Boltzmann temperature β* of the latent optimal distribution.
    pub pistar_temperature: f64,
    /// α: base policy logits are `α·r* + noise`.
    pub base_alignment: f64,
    pub base_noise_std: f64,
    pub length_min: u32,
    pub length_max: u32,
    pub length_reward_correlation: f64,
    /// N0: annotated pairs per prompt used to pretrain the base RM.
    pub init_rm_pairs_per_prompt: usize,
    pub annotation: Annotation,
    /// Fractions for (policy split 1, policy split 2, RM split, validation split).
    pub partition_fractions: [f64; 4],
    /// Put every prompt in every partition instead of splitting; only meant
    /// for single-prompt instances.
    pub shared_partitions: bool,
    pub base_rm: BtConfig,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_prompts: 64,
            num_responses: 32,
            reward_scale: 1.0,
            shared_reward_fraction: 0.8,
            pistar_temperature: 0.5,
            base_alignment: 0.3,
            base_noise_std: 0.3,
            length_min: 10,
            length_max: 200,
            length_reward_correlation: 0.0,
            init_rm_pairs_per_prompt: 8,
            annotation: Annotation::BtNoise,
            partition_fractions: [0.3, 0.3, 0.2, 0.2],
            shared_partitions: false,
            // weakly coupled: the initial judge generalises little across prompts
            base_rm: BtConfig {
                response_coupling: 0.03,
                ..BtConfig::default()
            },
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_prompts == 0 || self.num_responses == 0 {
            return Err(SimError::config("num_prompts and num_responses must be positive"));
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.reward_scale) || !positive(self.pistar_temperature) {
            return Err(SimError::config("reward_scale and pistar_temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.shared_reward_fraction) {
            return Err(SimError::config("shared_reward_fraction must lie in [0, 1]"));
        }
        if !(self.base_alignment >= 0.0) || !(self.base_noise_std >= 0.0) {
            return Err(SimError::config("base_alignment and base_noise_std must be non-negative"));
        }
        if self.length_min == 0 || self.length_min > self.length_max {
            return Err(SimError::config("lengths require 1 <= length_min <= length_max"));
        }
        if !(-1.0..=1.0).contains(&self.length_reward_correlation) {
            return Err(SimError::config("length_reward_correlation must lie in [-1, 1]"));
        }
        if self.partition_fractions.iter().any(|f| !(*f >= 0.0)) {
            return Err(SimError::config("partition fractions must be non-negative"));
        }
        let total: f64 = self.partition_fractions.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(SimError::config(format!("partition fractions sum to {total}, not 1")));
        }
        self.base_rm.validate()
    }
}

/// Disjoint prompt-id sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partitions {
    pub policy_split_1: Vec<usize>,
    pub policy_split_2: Vec<usize>,
    pub rm_split: Vec<usize>,
    pub validation_split: Vec<usize>,
}

impl Partitions {
    pub fn all(&self) -> [&[usize]; 4] {
        [
            &self.policy_split_1,
            &self.policy_split_2,
            &self.rm_split,
            &self.validation_split,
        ]
    }

    /// Policy-update prompts for iteration `t` (1-based); splits alternate.
    pub fn policy_split(&self, t: usize) -> &[usize] {
        if t % 2 == 1 {
            &self.policy_split_1
        } else {
            &self.policy_split_2
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub config: EnvConfig,
    pub rstar: Table,
    pub lengths: Vec<Vec<u32>>,
    pub partitions: Partitions,
    pub base_policy: Policy,
    pub base_rm: RewardModel,
}

impl Environment {
    pub fn num_prompts(&self) -> usize {
        self.rstar.rows()
    }

    pub fn num_responses(&self) -> usize {
        self.rstar.cols()
    }

    pub fn all_prompts(&self) -> Vec<usize> {
        (0..self.num_prompts()).collect()
    }

    pub fn lengths_row(&self, prompt: usize) -> &[u32] {
        &self.lengths[prompt]
    }

    /// The ground-truth reward as a reward model, for oracle comparisons.
    pub fn oracle_rm(&self) -> RewardModel {
        RewardModel::from_scores(self.rstar.clone(), 0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// SHA-256 of the serialized environment, hex encoded.
    pub fn fingerprint(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_json()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Largest-remainder apportionment of `total` items; ties go to the lower index.
pub fn apportion(total: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

fn build_partitions<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> Result<Partitions> {
    let p = cfg.num_prompts;
    if cfg.shared_partitions {
        let all: Vec<usize> = (0..p).collect();
        return Ok(Partitions {
            policy_split_1: all.clone(),
            policy_split_2: all.clone(),
            rm_split: all.clone(),
            validation_split: all,
        });
    }
    let sizes = apportion(p, &cfg.partition_fractions);
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(SimError::config(format!(
            "partition {i} is empty with {p} prompts and fractions {:?}",
            cfg.partition_fractions
        )));
    }
    let mut ids: Vec<usize> = (0..p).collect();
    ids.shuffle(rng);
    let mut parts = Vec::with_capacity(4);
    let mut start = 0;
    for size in sizes {
        let mut part = ids[start..start + size].to_vec();
        part.sort_unstable();
        parts.push(part);
        start += size;
    }
    let mut it = parts.into_iter();
    Ok(Partitions {
        policy_split_1: it.next().unwrap(),
        policy_split_2: it.next().unwrap(),
        rm_split: it.next().unwrap(),
        validation_split: it.next().unwrap(),
    })
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn build_rstar<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> Table {
    let shared: Vec<f64> = (0..cfg.num_responses).map(|_| normal(rng)).collect();
    let (ws, wl) = (cfg.shared_reward_fraction.sqrt(), (1.0 - cfg.shared_reward_fraction).sqrt());
    Table::from_fn(cfg.num_prompts, cfg.num_responses, |_, y| {
        cfg.reward_scale * (ws * shared[y] + wl * normal(rng))
    })
}

/// Lengths follow a Gaussian copula: a latent `c·z(r*) + √(1-c²)·ε` is
/// ranked within each prompt and the ranks spread evenly over
/// `[length_min, length_max]`.
fn build_lengths<R: Rng + ?Sized>(cfg: &EnvConfig, rstar: &Table, rng: &mut R) -> Vec<Vec<u32>> {
    let c = cfg.length_reward_correlation;
    let span = (cfg.length_max - cfg.length_min) as f64;
    (0..rstar.rows())
        .map(|x| {
            let row = rstar.row(x);
            let n = row.len();
            let mean = row.iter().sum::<f64>() / n as f64;
            let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            let latent: Vec<f64> = row
                .iter()
                .map(|v| {
                    let z = if sd > 0.0 { (v - mean) / sd } else { 0.0 };
                    c * z + (1.0 - c * c).sqrt() * normal(rng)
                })
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| latent[a].total_cmp(&latent[b]).then(a.cmp(&b)));
            let mut lengths = vec![cfg.length_min; n];
            for (rank, &y) in order.iter().enumerate() {
                let frac = if n > 1 { rank as f64 / (n - 1) as f64 } else { 0.0 };
                lengths[y] = cfg.length_min + (frac * span).round() as u32;
            }
            lengths
        })
        .collect()
}

/// Labels a comparison of two distinct responses with the simulated annotator.
pub fn annotate_row<R: Rng + ?Sized>(
    rstar_row: &[f64],
    mode: Annotation,
    prompt: usize,
    y_a: usize,
    y_b: usize,
    rng: &mut R,
) -> Result<PreferencePair> {
    if y_a == y_b {
        return Err(SimError::invalid("cannot annotate a response against itself"));
    }
    let (ra, rb) = (rstar_row[y_a], rstar_row[y_b]);
    let a_wins = match mode {
        Annotation::BtNoise => rng.gen::<f64>() < sigmoid(ra - rb),
        Annotation::NoiseFree => ra > rb || (ra == rb && y_a < y_b),
    };
    let (chosen, rejected) = if a_wins { (y_a, y_b) } else { (y_b, y_a) };
    Ok(PreferencePair::new(prompt, chosen, rejected, PairSource::Annotation))
}

pub fn annotate<R: Rng + ?Sized>(
    env: &Environment,
    prompt: usize,
    y_a: usize,
    y_b: usize,
    rng: &mut R,
) -> Result<PreferencePair> {
    if prompt >= env.num_prompts() || y_a >= env.num_responses() || y_b >= env.num_responses() {
        return Err(SimError::invalid("annotation ids out of range"));
    }
    annotate_row(env.rstar.row(prompt), env.config.annotation, prompt, y_a, y_b, rng)
}

/// Fits the base reward model on annotated pairs sampled from `base_policy`.
///
/// Draws that land on the same response twice are discarded, so a prompt
/// may contribute fewer than N0 pairs. Cells never touched by a pair stay
/// at the regularizer's fixed point.
pub fn pretrain_base_rm<R: Rng + ?Sized>(
    rstar: &Table,
    base_policy: &Policy,
    cfg: &EnvConfig,
    rng: &mut R,
) -> Result<RewardModel> {
    let mut pairs = Vec::new();
    for x in 0..rstar.rows() {
        for _ in 0..cfg.init_rm_pairs_per_prompt {
            let a = sample_response(base_policy, x, 1.0, rng);
            let b = sample_response(base_policy, x, 1.0, rng);
            if a != b {
                pairs.push(annotate_row(rstar.row(x), cfg.annotation, x, a, b, rng)?);
            }
        }
    }
    let init = RewardModel::zeros(rstar.rows(), rstar.cols(), cfg.base_rm.l2_lambda);
    if pairs.is_empty() {
        return Ok(init);
    }
    train_bt(&init, &pairs, &cfg.base_rm)
}

pub fn build_environment(cfg: &EnvConfig) -> Result<Environment> {
    cfg.validate()?;
    let rstar = build_rstar(cfg, &mut stream(cfg.seed, &[label::ENV_REWARD]));
    let lengths = build_lengths(cfg, &rstar, &mut stream(cfg.seed, &[label::ENV_LENGTH]));
    let partitions = build_partitions(cfg, &mut stream(cfg.seed, &[label::ENV_PARTITION]))?;

    let mut noise_rng = stream(cfg.seed, &[label::ENV_POLICY]);
    let base_logits = Table::from_fn(rstar.rows(), rstar.cols(), |x, y| {
        let noise = if cfg.base_noise_std > 0.0 {
            cfg.base_noise_std * normal(&mut noise_rng)
        } else {
            0.0
        };
        cfg.base_alignment * rstar.get(x, y) + noise
    });
    let base_policy = Policy::new(base_logits);
    let base_rm = pretrain_base_rm(
        &rstar,
        &base_policy,
        cfg,
        &mut stream(cfg.seed, &[label::ENV_PRETRAIN]),
    )?;
    Ok(Environment {
        config: cfg.clone(),
        rstar,
        lengths,
        partitions,
        base_policy,
        base_rm,
    })
}

/// Latent optimal distribution `softmax(r*[x] / β*)`.
pub fn pistar(env: &Environment, prompt: usize) -> Result<Vec<f64>> {
    if prompt >= env.num_prompts() {
        return Err(SimError::invalid(format!("prompt {prompt} out of range")));
    }
    Ok(tempered_softmax(env.rstar.row(prompt), env.config.pistar_temperature))
}
