//! Finite-difference verification of the DPO and BT gradients.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::pair::{PairSource, PreferencePair};
use crate::policy::{dpo_grad, mean_dpo_loss, Policy};
use crate::reward::{bt_grad, bt_nll, RewardModel};
use crate::rng::{stream, SimRng};
use crate::table::Table;
use crate::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Gradient entries smaller than this are compared on an absolute scale.
pub const MAGNITUDE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub seed: u64,
    /// Added to every analytic gradient entry; used to confirm the checker
    /// detects a wrong gradient.
    pub corruption: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 25,
            seed: 0,
            corruption: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub instances: usize,
    pub dpo_max_rel_error: f64,
    pub bt_max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Largest relative error between `analytic` and a central difference of `f`
/// taken at every cell of `point`.
pub fn max_rel_error(point: &Table, analytic: &Table, mut f: impl FnMut(&Table) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.as_slice().len() {
        let orig = point.as_slice()[i];
        probe.as_mut_slice()[i] = orig + STEP;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - STEP;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic.as_slice()[i], numeric));
    }
    worst
}

fn random_table(rng: &mut SimRng, rows: usize, cols: usize) -> Table {
    Table::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng))
}

fn random_pairs(rng: &mut SimRng, prompts: usize, responses: usize) -> Vec<PreferencePair> {
    let n = rng.gen_range(1..=3 * prompts);
    // Leave one prompt untouched so zero rows are exercised too.
    let active = prompts.saturating_sub(1).max(1);
    (0..n)
        .map(|_| {
            let ids: Vec<usize> = (0..responses).collect();
            let picked: Vec<usize> = ids.choose_multiple(rng, 2).copied().collect();
            PreferencePair::new(rng.gen_range(0..active), picked[0], picked[1], PairSource::EStep)
        })
        .collect()
}

fn add_constant(t: &mut Table, c: f64) {
    t.as_mut_slice().iter_mut().for_each(|v| *v += c);
}

fn check_dpo(rng: &mut SimRng, corruption: f64) -> Result<f64> {
    let (p, r) = (rng.gen_range(2..=5), rng.gen_range(2..=6));
    let reference = Policy::new(random_table(rng, p, r));
    let policy = Policy::new(random_table(rng, p, r));
    let beta = rng.gen_range(0.05..2.0);
    let pairs = random_pairs(rng, p, r);
    let mut analytic = dpo_grad(&policy, &reference, &pairs, beta)?;
    add_constant(&mut analytic, corruption);
    Ok(max_rel_error(&policy.logits, &analytic, |logits| {
        mean_dpo_loss(&Policy::new(logits.clone()), &reference, &pairs, beta)
    }))
}

fn check_bt(rng: &mut SimRng, corruption: f64) -> Result<f64> {
    let (p, r) = (rng.gen_range(2..=5), rng.gen_range(2..=6));
    let lambda = if rng.gen_bool(0.25) { 0.0 } else { rng.gen_range(1e-4..0.5) };
    let rm = RewardModel::from_scores(random_table(rng, p, r), lambda);
    let pairs = random_pairs(rng, p, r);
    let mut analytic = bt_grad(&rm, &pairs)?;
    add_constant(&mut analytic, corruption);
    let mut probe = rm.clone();
    Ok(max_rel_error(&rm.scores, &analytic, |scores| {
        probe.scores = scores.clone();
        bt_nll(&probe, &pairs).expect("pairs are non-empty")
    }))
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut dpo_worst: f64 = 0.0;
    let mut bt_worst: f64 = 0.0;
    for i in 0..opts.instances {
        dpo_worst = dpo_worst.max(check_dpo(&mut stream(opts.seed, &[1, i as u64]), opts.corruption)?);
        bt_worst = bt_worst.max(check_bt(&mut stream(opts.seed, &[2, i as u64]), opts.corruption)?);
    }
    Ok(GradcheckReport {
        instances: opts.instances,
        dpo_max_rel_error: dpo_worst,
        bt_max_rel_error: bt_worst,
        tolerance: TOLERANCE,
        passed: dpo_worst <= TOLERANCE && bt_worst <= TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_check_passes_and_is_reproducible() {
        let report = run_gradcheck(&GradcheckOptions::default()).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report, run_gradcheck(&GradcheckOptions::default()).unwrap());
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let report = run_gradcheck(&GradcheckOptions {
            corruption: 1e-3,
            ..GradcheckOptions::default()
        })
        .unwrap();
        assert!(!report.passed);
    }
}
