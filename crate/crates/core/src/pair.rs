//! Preference pairs, the unit of all training data.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Where a pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairSource {
    /// Labelled by the ground-truth annotator (base RM pretraining).
    Annotation,
    /// Sampled from `π_{t-1}` and ranked by `r_{t-1}` for a policy update.
    EStep,
    /// `(y_t, y_{t-1})` drawn from the post- and pre-update policies.
    PolicyComparison,
    /// E-step pairs reused as reward-model training data.
    SelfTraining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: usize,
    pub chosen: usize,
    pub rejected: usize,
    pub source: PairSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
}

impl PreferencePair {
    pub fn new(prompt: usize, chosen: usize, rejected: usize, source: PairSource) -> Self {
        Self {
            prompt,
            chosen,
            rejected,
            source,
            margin: None,
        }
    }

    pub fn with_source(mut self, source: PairSource) -> Self {
        self.source = source;
        self
    }

    /// Swaps chosen and rejected; a stored margin flips sign.
    pub fn swapped(&self) -> Self {
        Self {
            prompt: self.prompt,
            chosen: self.rejected,
            rejected: self.chosen,
            source: self.source,
            margin: self.margin.map(|m| -m),
        }
    }
}

/// Serializes pairs as JSON Lines, one record per pair.
pub fn to_jsonl(pairs: &[PreferencePair]) -> Result<String> {
    let mut out = String::new();
    for pair in pairs {
        out.push_str(&serde_json::to_string(pair)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<PreferencePair>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(SimError::from))
        .collect()
}
