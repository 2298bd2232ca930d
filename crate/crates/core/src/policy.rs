//! Tabular softmax policy, the DPO objective and its trainer.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Result, SimError};
use crate::math::{log_softmax, neg_log_sigmoid, sigmoid, softmax, tempered_softmax};
use crate::pair::{PairSource, PreferencePair};
use crate::reward::{coupled_direction, RewardModel};
use crate::table::Table;

/// `π(y|x) = softmax(logits[x])[y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub logits: Table,
}

impl Policy {
    pub fn new(logits: Table) -> Self {
        Self { logits }
    }

    pub fn uniform(prompts: usize, responses: usize) -> Self {
        Self::new(Table::zeros(prompts, responses))
    }

    pub fn num_prompts(&self) -> usize {
        self.logits.rows()
    }

    pub fn num_responses(&self) -> usize {
        self.logits.cols()
    }

    pub fn probs(&self, prompt: usize) -> Vec<f64> {
        softmax(self.logits.row(prompt))
    }

    pub fn tempered_probs(&self, prompt: usize, temperature: f64) -> Vec<f64> {
        tempered_softmax(self.logits.row(prompt), temperature)
    }

    pub fn log_probs(&self, prompt: usize) -> Vec<f64> {
        log_softmax(self.logits.row(prompt))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairSelection {
    /// Shortest above-mean sample is chosen, lowest-scored is rejected.
    LengthControlled,
    BestVsWorst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub checkpoint_every: usize,
    pub sample_temperature: f64,
    /// Number of sampled candidates per prompt (M).
    pub samples_per_prompt: usize,
    pub pair_selection: PairSelection,
    /// Strength of the tied per-response component in the descent update.
    pub response_coupling: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.2,
            learning_rate: 0.5,
            steps: 200,
            checkpoint_every: 50,
            sample_temperature: 0.8,
            samples_per_prompt: 5,
            pair_selection: PairSelection::LengthControlled,
            response_coupling: 2.0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(SimError::config("dpo.beta must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(SimError::config("dpo.learning_rate must be finite and non-negative"));
        }
        if self.steps == 0 || self.checkpoint_every == 0 || self.checkpoint_every > self.steps {
            return Err(SimError::config("dpo requires 1 <= checkpoint_every <= steps"));
        }
        if !(self.sample_temperature > 0.0) {
            return Err(SimError::config("dpo.sample_temperature must be positive"));
        }
        if self.samples_per_prompt < 2 {
            return Err(SimError::config("dpo.samples_per_prompt must be at least 2"));
        }
        if !(self.response_coupling >= 0.0) {
            return Err(SimError::config("dpo.response_coupling must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub policy: Policy,
    pub step: usize,
}

/// Draws a response from `softmax(logits[x] / temperature)`.
pub fn sample_response<R: Rng + ?Sized>(policy: &Policy, prompt: usize, temperature: f64, rng: &mut R) -> usize {
    sample_from(&policy.tempered_probs(prompt, temperature), rng)
}

pub(crate) fn sample_from<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    WeightedIndex::new(probs)
        .expect("softmax rows are positive and finite")
        .sample(rng)
}

pub fn log_prob(policy: &Policy, prompt: usize, response: usize) -> f64 {
    policy.log_probs(prompt)[response]
}

fn dpo_margin(policy: &Policy, reference: &Policy, pair: &PreferencePair, beta: f64) -> f64 {
    let lp = policy.log_probs(pair.prompt);
    let lr = reference.log_probs(pair.prompt);
    beta * ((lp[pair.chosen] - lr[pair.chosen]) - (lp[pair.rejected] - lr[pair.rejected]))
}

/// `-ln σ(β[(log π(y_w) - log π_ref(y_w)) - (log π(y_l) - log π_ref(y_l))])`.
pub fn dpo_loss(policy: &Policy, reference: &Policy, pair: &PreferencePair, beta: f64) -> f64 {
    neg_log_sigmoid(dpo_margin(policy, reference, pair, beta))
}

pub fn mean_dpo_loss(policy: &Policy, reference: &Policy, pairs: &[PreferencePair], beta: f64) -> f64 {
    pairs.iter().map(|p| dpo_loss(policy, reference, p, beta)).sum::<f64>() / pairs.len() as f64
}

/// Gradient of the mean DPO loss over `pairs` with respect to every logit.
pub fn dpo_grad(policy: &Policy, reference: &Policy, pairs: &[PreferencePair], beta: f64) -> Result<Table> {
    if pairs.is_empty() {
        return Err(SimError::EmptyPairs("DPO gradient"));
    }
    let (p, r) = (policy.num_prompts(), policy.num_responses());
    let mut grad = Table::zeros(p, r);
    let inv_n = 1.0 / pairs.len() as f64;
    for pair in pairs {
        if pair.prompt >= p || pair.chosen >= r || pair.rejected >= r {
            return Err(SimError::invalid(format!("pair {pair:?} outside a {p}x{r} policy")));
        }
        let z = dpo_margin(policy, reference, pair, beta);
        // d(-ln σ(z))/dz = -σ(-z). With ∂log π(y)/∂logit[y'] = 1{y'=y} - π(y'),
        // the π(y') terms of chosen and rejected cancel, leaving β(e_w - e_l).
        let coeff = -sigmoid(-z) * beta * inv_n;
        grad.add_at(pair.prompt, pair.chosen, coeff);
        grad.add_at(pair.prompt, pair.rejected, -coeff);
    }
    Ok(grad)
}

/// Picks `(chosen, rejected)` among sampled responses, or `None` for a degenerate prompt.
///
/// `samples` may contain duplicates; each occurrence counts toward the mean.
pub fn select_pair(
    samples: &[usize],
    scores: &[f64],
    lengths: &[u32],
    selection: PairSelection,
) -> Option<(usize, usize)> {
    let first = *samples.first()?;
    if samples.iter().all(|&y| y == first) {
        return None;
    }
    let score = |y: usize| scores[y];
    // Lowest score; equal scores resolve to the smaller response id.
    let rejected = samples
        .iter()
        .copied()
        .min_by(|&a, &b| score(a).total_cmp(&score(b)).then(a.cmp(&b)))?;
    let chosen = match selection {
        PairSelection::BestVsWorst => samples
            .iter()
            .copied()
            .min_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)))?,
        PairSelection::LengthControlled => {
            let mean = samples.iter().map(|&y| score(y)).sum::<f64>() / samples.len() as f64;
            samples
                .iter()
                .copied()
                .filter(|&y| score(y) > mean)
                .min_by(|&a, &b| lengths[a].cmp(&lengths[b]).then(a.cmp(&b)))?
        }
    };
    (chosen != rejected).then_some((chosen, rejected))
}

/// Samples M responses per prompt from `policy`, ranks them with `rm` and
/// emits one E-step pair per non-degenerate prompt.
pub fn build_estep_pairs<R: Rng + ?Sized>(
    policy: &Policy,
    rm: &RewardModel,
    prompts: &[usize],
    cfg: &DpoConfig,
    env: &Environment,
    rng: &mut R,
) -> Vec<PreferencePair> {
    let mut pairs = Vec::new();
    for &x in prompts {
        let probs = policy.tempered_probs(x, cfg.sample_temperature);
        let samples: Vec<usize> = (0..cfg.samples_per_prompt).map(|_| sample_from(&probs, rng)).collect();
        if let Some((chosen, rejected)) =
            select_pair(&samples, rm.scores.row(x), env.lengths_row(x), cfg.pair_selection)
        {
            pairs.push(PreferencePair::new(x, chosen, rejected, PairSource::EStep));
        }
    }
    pairs
}

/// Full-batch gradient descent on the mean DPO loss, starting from and
/// referenced to `reference`. Emits a checkpoint every `checkpoint_every`
/// steps and at the final step.
pub fn train_dpo(reference: &Policy, pairs: &[PreferencePair], cfg: &DpoConfig) -> Result<Vec<Checkpoint>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(SimError::EmptyPairs("DPO training"));
    }
    let mut theta = reference.clone();
    let mut checkpoints = Vec::with_capacity(cfg.steps / cfg.checkpoint_every + 1);
    for step in 1..=cfg.steps {
        if cfg.learning_rate > 0.0 {
            let grad = dpo_grad(&theta, reference, pairs, cfg.beta)?;
            let dir = coupled_direction(&grad, cfg.response_coupling);
            theta.logits.axpy(-cfg.learning_rate, &dir);
        }
        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            let loss = mean_dpo_loss(&theta, reference, pairs, cfg.beta);
            if !loss.is_finite() || !theta.logits.is_finite() {
                return Err(SimError::NonFiniteLoss {
                    trainer: "dpo",
                    step,
                    loss,
                });
            }
            checkpoints.push(Checkpoint {
                policy: theta.clone(),
                step,
            });
        }
    }
    Ok(checkpoints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(x: usize, w: usize, l: usize) -> PreferencePair {
        PreferencePair::new(x, w, l, PairSource::EStep)
    }

    fn row_policy(row: Vec<f64>) -> Policy {
        Policy::new(Table::from_rows(vec![row]).unwrap())
    }

    #[test]
    fn log_prob_examples() {
        let p = Policy::uniform(1, 4);
        assert!((log_prob(&p, 0, 2) - (-1.386_294)).abs() < 1e-6);
        assert!((log_prob(&p, 0, 2) - 0.25f64.ln()).abs() < 1e-12);

        let p = row_policy(vec![0.0, 3f64.ln()]);
        assert!((log_prob(&p, 0, 0) - 0.25f64.ln()).abs() < 1e-12);
        assert!((log_prob(&p, 0, 1) - 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sampling_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let uniform = Policy::uniform(1, 4);
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_response(&uniform, 0, 1.0, &mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() <= 0.02);
        }

        let peaked = row_policy(vec![0.0, 50.0, 0.0, 0.0]);
        let hits = (0..n).filter(|_| sample_response(&peaked, 0, 1.0, &mut rng) == 1).count();
        assert!(hits as f64 / n as f64 >= 0.999);

        let skewed = row_policy(vec![0.0, 3.0, -2.0, 1.0]);
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_response(&skewed, 0, 1000.0, &mut rng)] += 1;
        }
        let tv: f64 = counts.iter().map(|&c| (c as f64 / n as f64 - 0.25).abs()).sum::<f64>() / 2.0;
        assert!(tv <= 0.05, "tv = {tv}");
    }

    #[test]
    fn dpo_loss_anchors() {
        let p = row_policy(vec![0.3, -1.0, 2.0]);
        for beta in [0.01, 0.1, 1.0, 7.0] {
            assert!((dpo_loss(&p, &p, &pair(0, 0, 2), beta) - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let reference = Policy::uniform(1, 2);
        // log-ratio margin 20
        let p = row_policy(vec![10.0, -10.0]);
        assert!(dpo_loss(&p, &reference, &pair(0, 0, 1), 1.0) <= 1e-8);
        // log-ratio margin exactly 1
        let p = row_policy(vec![0.5, -0.5]);
        assert!((dpo_loss(&p, &reference, &pair(0, 0, 1), 1.0) - 0.313_262).abs() < 1e-6);
        assert!((dpo_loss(&p, &reference, &pair(0, 0, 1), 1.0) - 0.313_261_687_518_223).abs() < 1e-9);
    }

    #[test]
    fn dpo_grad_sign_and_row_sums() {
        let p = Policy::uniform(3, 4);
        let g = dpo_grad(&p, &p, &[pair(1, 2, 0)], 0.5).unwrap();
        assert!(-g.get(1, 2) > 0.0);
        assert!(-g.get(1, 0) < 0.0);
        assert!(g.row(0).iter().chain(g.row(2)).all(|&v| v == 0.0));
        for x in 0..3 {
            assert!(g.row(x).iter().sum::<f64>().abs() < 1e-10);
        }
        assert!(dpo_grad(&p, &p, &[], 0.5).is_err());
    }

    #[test]
    fn length_controlled_selection() {
        // samples 0..5 with scores 1..5; response 3 is the short one.
        let samples = [0, 1, 2, 3, 4];
        let scores = [1.0, 2.0, 3.0, 4.0, 5.0];
        let lengths = [9, 9, 9, 2, 9];
        assert_eq!(
            select_pair(&samples, &scores, &lengths, PairSelection::LengthControlled),
            Some((3, 0))
        );
        assert_eq!(
            select_pair(&[2, 2, 2, 2, 2], &scores, &lengths, PairSelection::LengthControlled),
            None
        );
        // all scores equal: nothing strictly above the mean
        assert_eq!(
            select_pair(&[0, 1], &[1.0, 1.0], &[1, 1], PairSelection::LengthControlled),
            None
        );
        // equal lengths among above-mean samples resolve to the smaller id
        assert_eq!(
            select_pair(&[0, 1, 2], &[0.0, 5.0, 5.0], &[3, 3, 3], PairSelection::LengthControlled),
            Some((1, 0))
        );
    }

    #[test]
    fn best_vs_worst_selection() {
        assert_eq!(
            select_pair(&[0, 1], &[0.1, 0.9], &[1, 1], PairSelection::BestVsWorst),
            Some((1, 0))
        );
        assert_eq!(select_pair(&[1, 1], &[0.1, 0.9], &[1, 1], PairSelection::BestVsWorst), None);
    }

    #[test]
    fn checkpoint_schedule_and_zero_lr() {
        let reference = row_policy(vec![0.2, -0.4, 0.9]);
        let cfg = DpoConfig::default();
        let cps = train_dpo(&reference, &[pair(0, 0, 2)], &cfg).unwrap();
        assert_eq!(cps.iter().map(|c| c.step).collect::<Vec<_>>(), vec![50, 100, 150, 200]);

        let cfg = DpoConfig {
            learning_rate: 0.0,
            steps: 120,
            ..DpoConfig::default()
        };
        let cps = train_dpo(&reference, &[pair(0, 0, 2)], &cfg).unwrap();
        assert_eq!(cps.iter().map(|c| c.step).collect::<Vec<_>>(), vec![50, 100, 120]);
        assert!(cps.iter().all(|c| c.policy == reference));
    }

    #[test]
    fn single_pair_training_moves_mass_to_chosen() {
        let reference = row_policy(vec![0.0, 0.5, -0.3]);
        let cfg = DpoConfig {
            beta: 1.0,
            learning_rate: 0.5,
            steps: 500,
            checkpoint_every: 100,
            ..DpoConfig::default()
        };
        let pairs = [pair(0, 0, 1)];
        let cps = train_dpo(&reference, &pairs, &cfg).unwrap();
        let last = &cps.last().unwrap().policy;
        assert!(last.probs(0)[0] > reference.probs(0)[0]);
        assert!(mean_dpo_loss(last, &reference, &pairs, 1.0) < std::f64::consts::LN_2);
    }
}
