//! Group-relative advantages, the two-phase token mask and group filtering.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::types::mean_and_pop_std;

/// `(r_i - mean) / (population std + std_eps)` within one group.
pub fn group_advantages_grpo(rewards: &[f64], std_eps: f64) -> Vec<f64> {
    let (mean, std) = mean_and_pop_std(rewards);
    rewards.iter().map(|r| (r - mean) / (std + std_eps)).collect()
}

/// Advantages for one multi-answer group of `K` thoughts with `M` answers each.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiAnswerAdvantages {
    /// `S_j`: mean reward of the answers sampled under thought `j`.
    pub thinking_scores: Vec<f64>,
    /// Applied to every thinking token of thought `j`.
    pub thinking: Vec<f64>,
    /// `answer[j][k]`, applied to the answer tokens of sample `(j, k)`.
    pub answer: Vec<Vec<f64>>,
}

/// Thought-level advantages normalize `S_j` across thoughts; answer-level
/// advantages normalize each reward against all `K * M` rewards.
pub fn advantages_grpo_ma(rewards: &[Vec<f64>], std_eps: f64) -> Result<MultiAnswerAdvantages> {
    let m = rewards.first().map(Vec::len).unwrap_or(0);
    if rewards.is_empty() || m == 0 {
        return Err(LabError::Shape(
            "multi-answer rewards must be a non-empty K x M matrix".into(),
        ));
    }
    if let Some(row) = rewards.iter().find(|r| r.len() != m) {
        return Err(LabError::Shape(format!(
            "ragged multi-answer rewards: row of length {} where {m} expected",
            row.len()
        )));
    }
    let thinking_scores: Vec<f64> = rewards.iter().map(|row| row.iter().sum::<f64>() / m as f64).collect();
    let thinking = group_advantages_grpo(&thinking_scores, std_eps);
    let flat: Vec<f64> = rewards.iter().flatten().copied().collect();
    let (mean, std) = mean_and_pop_std(&flat);
    let answer = rewards
        .iter()
        .map(|row| row.iter().map(|r| (r - mean) / (std + std_eps)).collect())
        .collect();
    Ok(MultiAnswerAdvantages {
        thinking_scores,
        thinking,
        answer,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    /// Answer tokens masked out of the gradient.
    #[serde(rename = "I")]
    One,
    #[serde(rename = "II")]
    Two,
    #[serde(rename = "joint")]
    Joint,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::One => "I",
            Phase::Two => "II",
            Phase::Joint => "joint",
        }
    }

    /// Label used in checkpoint file names.
    pub fn file_label(self) -> &'static str {
        match self {
            Phase::One => "phase1",
            Phase::Two => "phase2",
            Phase::Joint => "joint",
        }
    }
}

/// Per-token mask: phase I keeps thinking tokens only, other phases keep everything.
pub fn start_mask(thinking_len: usize, answer_len: usize, phase: Phase) -> Vec<bool> {
    let answer_on = phase != Phase::One;
    std::iter::repeat_n(true, thinking_len)
        .chain(std::iter::repeat_n(answer_on, answer_len))
        .collect()
}

/// Drop groups whose rewards are all equal; no resampling. Identity when disabled.
pub fn dapo_filter_groups<G>(groups: Vec<G>, enabled: bool, rewards_of: impl Fn(&G) -> Vec<f64>) -> Vec<G> {
    if !enabled {
        return groups;
    }
    groups
        .into_iter()
        .filter(|g| {
            let r = rewards_of(g);
            r.iter().any(|v| *v != r[0])
        })
        .collect()
}
