//! Paired-comparison statistics for multi-seed experiments.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Exact two-sided binomial p-value over the non-tied pairs.
    pub p_value: f64,
}

impl SignTest {
    /// Fraction of all pairs (ties included) where the first arm wins.
    pub fn win_fraction(&self) -> f64 {
        let n = self.wins + self.losses + self.ties;
        if n == 0 {
            0.0
        } else {
            self.wins as f64 / n as f64
        }
    }
}

fn ln_choose(n: usize, k: usize) -> f64 {
    let ln_fact = |m: usize| (1..=m).map(|i| (i as f64).ln()).sum::<f64>();
    ln_fact(n) - ln_fact(k) - ln_fact(n - k)
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    (k..=n)
        .map(|i| (ln_choose(n, i) - n as f64 * std::f64::consts::LN_2).exp())
        .sum::<f64>()
        .min(1.0)
}

/// Sign test on paired differences `a[i] - b[i]`; exact zeros are ties.
pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Greater) => wins += 1,
            Some(std::cmp::Ordering::Less) => losses += 1,
            _ => ties += 1,
        }
    }
    let n = wins + losses;
    let p_value = if n == 0 {
        1.0
    } else {
        (2.0 * binomial_upper_tail(n, wins.max(losses))).min(1.0)
    };
    SignTest {
        wins,
        losses,
        ties,
        p_value,
    }
}

/// Fraction of paired entries where `a[i] >= b[i]`.
pub fn fraction_at_least(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x >= y).count() as f64 / a.len() as f64
}
