//! Tabular Bradley–Terry reward model.
//!
//! The score table `s[x][y]` is fit by full-batch gradient descent on the
//! mean pairwise logistic loss plus an L2 penalty on the whole table. The
//! penalty anchors entries that never appear in a training pair at zero,
//! which is what makes a reward model trained on one policy's samples
//! unreliable on another policy's samples.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::math::{neg_log_sigmoid, sigmoid};
use crate::pair::PreferencePair;
use crate::table::Table;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub scores: Table,
    pub l2_lambda: f64,
}

impl RewardModel {
    pub fn zeros(prompts: usize, responses: usize, l2_lambda: f64) -> Self {
        Self {
            scores: Table::zeros(prompts, responses),
            l2_lambda,
        }
    }

    pub fn from_scores(scores: Table, l2_lambda: f64) -> Self {
        Self { scores, l2_lambda }
    }

    pub fn score(&self, prompt: usize, response: usize) -> f64 {
        self.scores.get(prompt, response)
    }

    /// Score difference `s(chosen) - s(rejected)` for a pair.
    pub fn margin(&self, pair: &PreferencePair) -> f64 {
        self.score(pair.prompt, pair.chosen) - self.score(pair.prompt, pair.rejected)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BtConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub l2_lambda: f64,
    /// Strength of the tied per-response component in the descent update.
    /// Zero gives independent per-prompt cells.
    pub response_coupling: f64,
}

impl Default for BtConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            steps: 300,
            l2_lambda: 1e-3,
            response_coupling: 0.0,
        }
    }
}

impl BtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(SimError::config("bt.learning_rate must be finite and non-negative"));
        }
        if self.steps == 0 {
            return Err(SimError::config("bt.steps must be at least 1"));
        }
        if !(self.l2_lambda >= 0.0) || !(self.response_coupling >= 0.0) {
            return Err(SimError::config("bt.l2_lambda and bt.response_coupling must be non-negative"));
        }
        Ok(())
    }
}

/// Bradley–Terry probability that the first response beats the second.
pub fn bt_prob(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

fn check_pairs(rm: &RewardModel, pairs: &[PreferencePair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(SimError::EmptyPairs("reward model objective"));
    }
    let (p, r) = (rm.scores.rows(), rm.scores.cols());
    if let Some(bad) = pairs.iter().find(|q| q.prompt >= p || q.chosen >= r || q.rejected >= r) {
        return Err(SimError::invalid(format!("pair {bad:?} outside a {p}x{r} table")));
    }
    Ok(())
}

/// Mean negative BT log-likelihood plus `λ‖s‖²/(P·R)`.
pub fn bt_nll(rm: &RewardModel, pairs: &[PreferencePair]) -> Result<f64> {
    check_pairs(rm, pairs)?;
    let data = pairs.iter().map(|q| neg_log_sigmoid(rm.margin(q))).sum::<f64>() / pairs.len() as f64;
    let cells = (rm.scores.rows() * rm.scores.cols()) as f64;
    Ok(data + rm.l2_lambda * rm.scores.squared_norm() / cells)
}

/// Exact gradient of [`bt_nll`] with respect to every score cell.
pub fn bt_grad(rm: &RewardModel, pairs: &[PreferencePair]) -> Result<Table> {
    check_pairs(rm, pairs)?;
    let (p, r) = (rm.scores.rows(), rm.scores.cols());
    let mut grad = Table::zeros(p, r);
    let inv_n = 1.0 / pairs.len() as f64;
    for q in pairs {
        // d/dm of -ln σ(m) is -(1 - σ(m)) = -σ(-m).
        let w = sigmoid(-rm.margin(q)) * inv_n;
        grad.add_at(q.prompt, q.chosen, -w);
        grad.add_at(q.prompt, q.rejected, w);
    }
    if rm.l2_lambda > 0.0 {
        let scale = 2.0 * rm.l2_lambda / (p * r) as f64;
        grad.axpy(scale, &rm.scores);
    }
    Ok(grad)
}

/// Adds the tied per-response direction to a cell gradient:
/// `step[x][y] = g[x][y] + κ Σ_x' g[x'][y]`.
pub(crate) fn coupled_direction(grad: &Table, coupling: f64) -> Table {
    if coupling == 0.0 {
        return grad.clone();
    }
    let sums = grad.column_sums();
    let mut step = grad.clone();
    for x in 0..step.rows() {
        for (cell, s) in step.row_mut(x).iter_mut().zip(&sums) {
            *cell += coupling * s;
        }
    }
    step
}

/// Full-batch gradient descent on [`bt_nll`] starting from `init`.
///
/// The returned model carries `cfg.l2_lambda`.
pub fn train_bt(init: &RewardModel, pairs: &[PreferencePair], cfg: &BtConfig) -> Result<RewardModel> {
    cfg.validate()?;
    let mut rm = RewardModel {
        scores: init.scores.clone(),
        l2_lambda: cfg.l2_lambda,
    };
    check_pairs(&rm, pairs)?;
    if cfg.learning_rate == 0.0 {
        return Ok(rm);
    }
    for step in 0..cfg.steps {
        let grad = bt_grad(&rm, pairs)?;
        let dir = coupled_direction(&grad, cfg.response_coupling);
        rm.scores.axpy(-cfg.learning_rate, &dir);
        if !rm.scores.is_finite() {
            return Err(SimError::NonFiniteLoss {
                trainer: "bt",
                step: step + 1,
                loss: f64::NAN,
            });
        }
    }
    let loss = bt_nll(&rm, pairs)?;
    if !loss.is_finite() {
        return Err(SimError::NonFiniteLoss {
            trainer: "bt",
            step: cfg.steps,
            loss,
        });
    }
    Ok(rm)
}

/// Population standard deviation of RM scores over `(prompt, response)` samples.
pub fn reward_std(rm: &RewardModel, samples: &[(usize, usize)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(SimError::invalid("reward_std needs at least one sample"));
    }
    let scores: Vec<f64> = samples.iter().map(|&(x, y)| rm.score(x, y)).collect();
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pair::PairSource;

    fn pair(x: usize, w: usize, l: usize) -> PreferencePair {
        PreferencePair::new(x, w, l, PairSource::Annotation)
    }

    #[test]
    fn bt_prob_anchors() {
        assert!((bt_prob(0.3, 0.3) - 0.5).abs() < 1e-12);
        assert!((bt_prob(1.0, 0.0) - 0.731_058).abs() < 1e-6);
        assert!((bt_prob(1.0, 0.0) - 0.731_058_578_630_005).abs() < 1e-9);
        assert!((bt_prob(700.0, -700.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nll_anchors() {
        let rm = RewardModel::zeros(2, 3, 0.0);
        let pairs = [pair(0, 0, 1), pair(1, 2, 0)];
        assert!((bt_nll(&rm, &pairs).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let mut rm = RewardModel::zeros(1, 2, 0.0);
        rm.scores.set(0, 0, 1.0);
        // -ln σ(1) to 12 digits, evaluated independently with arbitrary precision.
        assert!((bt_nll(&rm, &[pair(0, 0, 1)]).unwrap() - 0.313_261_687_518).abs() < 1e-9);

        rm.scores.set(0, 0, 30.0);
        assert!(bt_nll(&rm, &[pair(0, 0, 1)]).unwrap() <= 1e-12);
    }

    #[test]
    fn grad_is_antisymmetric_without_l2_and_vanishes_when_saturated() {
        let mut rm = RewardModel::zeros(1, 3, 0.0);
        rm.scores.set(0, 1, 0.4);
        let g = bt_grad(&rm, &[pair(0, 1, 2)]).unwrap();
        assert!((g.get(0, 1) + g.get(0, 2)).abs() < 1e-12);
        assert_eq!(g.get(0, 0), 0.0);

        rm.scores.set(0, 1, 30.0);
        let g = bt_grad(&rm, &[pair(0, 1, 2)]).unwrap();
        assert!(g.get(0, 1).abs() <= 1e-12 && g.get(0, 2).abs() <= 1e-12);
    }

    #[test]
    fn empty_pairs_rejected() {
        let rm = RewardModel::zeros(1, 2, 0.0);
        assert!(bt_nll(&rm, &[]).is_err());
        assert!(bt_grad(&rm, &[]).is_err());
        assert!(train_bt(&rm, &[], &BtConfig::default()).is_err());
    }

    #[test]
    fn zero_learning_rate_returns_init() {
        let mut init = RewardModel::zeros(1, 3, 1e-3);
        init.scores.set(0, 2, 0.7);
        let cfg = BtConfig {
            learning_rate: 0.0,
            ..BtConfig::default()
        };
        assert_eq!(train_bt(&init, &[pair(0, 0, 1)], &cfg).unwrap(), init);
    }

    #[test]
    fn unregularized_single_pair_separates() {
        let init = RewardModel::zeros(1, 2, 0.0);
        let pairs = [pair(0, 0, 1)];
        let mut rm = init.clone();
        let mut last_margin = 0.0;
        let cfg = BtConfig {
            learning_rate: 1.0,
            steps: 1000,
            l2_lambda: 0.0,
            response_coupling: 0.0,
        };
        for _ in 0..10 {
            rm = train_bt(&rm, &pairs, &cfg).unwrap();
            let m = rm.margin(&pairs[0]);
            assert!(m > last_margin);
            last_margin = m;
        }
        assert!(bt_nll(&rm, &pairs).unwrap() <= 1e-3);
    }

    #[test]
    fn nll_is_nonincreasing_under_default_descent() {
        let pairs = [pair(0, 0, 1), pair(0, 1, 2), pair(0, 2, 0), pair(0, 0, 2), pair(1, 1, 0)];
        let mut rm = RewardModel::zeros(2, 3, 1e-3);
        let cfg = BtConfig {
            steps: 1,
            response_coupling: 0.5,
            ..BtConfig::default()
        };
        let mut prev = bt_nll(&rm, &pairs).unwrap();
        for _ in 0..500 {
            rm = train_bt(&rm, &pairs, &cfg).unwrap();
            let cur = bt_nll(&rm, &pairs).unwrap();
            assert!(cur <= prev + 1e-10, "{cur} > {prev}");
            prev = cur;
        }
    }

    #[test]
    fn reward_std_examples() {
        let rm = RewardModel::from_scores(Table::from_rows(vec![vec![0.0, 2.0, 1.0, 3.0, 4.0]]).unwrap(), 0.0);
        assert_eq!(reward_std(&rm, &[(0, 0), (0, 1)]).unwrap(), 1.0);
        assert_eq!(reward_std(&rm, &[(0, 1), (0, 1), (0, 1)]).unwrap(), 0.0);
        let v = reward_std(&rm, &[(0, 2), (0, 1), (0, 3), (0, 4)]).unwrap();
        assert!((v - 1.118_034).abs() < 1e-6);
        assert!((v - 1.25f64.sqrt()).abs() < 1e-12);
        assert!(reward_std(&rm, &[]).is_err());
    }
}
