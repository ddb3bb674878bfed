//! Nested thought/answer sampling and the coupling statistics built on it:
//! thinking scores, minority outcome ratio, answering and thinking
//! fluctuation, and their ratio.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::TaskSpec;
use crate::error::{LabError, Result};
use crate::policy::{sample_answer_given, sample_thinking, PolicyParams};
use crate::rng::RngStream;
use crate::types::{mean_and_pop_std, to_csv, InstructionId, Trace};

/// Rewards `R[j][k]` of answer `k` under thought `j` for one instruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NestedRewardMatrix {
    pub instruction: InstructionId,
    rewards: Vec<Vec<f64>>,
    buckets: Vec<usize>,
}

impl NestedRewardMatrix {
    /// Rows must be non-empty and of equal length; one bucket per row.
    pub fn new(instruction: InstructionId, rewards: Vec<Vec<f64>>, buckets: Vec<usize>) -> Result<Self> {
        if rewards.is_empty() {
            return Err(LabError::Shape("nested matrix has no thoughts".into()));
        }
        let n = rewards[0].len();
        if n == 0 {
            return Err(LabError::Shape("nested matrix has no answers".into()));
        }
        if let Some(row) = rewards.iter().find(|r| r.len() != n) {
            return Err(LabError::LengthMismatch {
                what: "nested matrix row",
                expected: n,
                actual: row.len(),
            });
        }
        if buckets.len() != rewards.len() {
            return Err(LabError::LengthMismatch {
                what: "bucket record",
                expected: rewards.len(),
                actual: buckets.len(),
            });
        }
        Ok(Self {
            instruction,
            rewards,
            buckets,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.len();
        Self::new(InstructionId(0), rows, vec![0; m])
    }

    pub fn m(&self) -> usize {
        self.rewards.len()
    }

    pub fn n(&self) -> usize {
        self.rewards[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rewards
    }

    pub fn buckets(&self) -> &[usize] {
        &self.buckets
    }

    pub fn is_binary(&self) -> bool {
        self.rewards.iter().flatten().all(|&r| r == 0.0 || r == 1.0)
    }
}

/// `m` thoughts, each followed by `n` answers sampled for its bucket. Thought
/// `j` draws from `rng/"thought"/j`, its answer `k` from `…/j/k`, and the
/// reward noise from `…/j/k/"noise"`.
pub fn nested_sample(
    params: &PolicyParams,
    spec: &TaskSpec,
    x: InstructionId,
    m: usize,
    n: usize,
    rng: &RngStream,
) -> Result<NestedRewardMatrix> {
    if m < 2 || n < 2 {
        return Err(LabError::Invalid(format!(
            "nested sampling needs m >= 2 and n >= 2, got m = {m}, n = {n}"
        )));
    }
    let mut rewards = Vec::with_capacity(m);
    let mut buckets = Vec::with_capacity(m);
    for j in 0..m {
        let thought = rng.derive("thought").derive(j);
        let thinking = sample_thinking(params, spec, x, &thought.derive("thinking"))?;
        let bucket = spec.bucket_for_count(spec.good_thinking_count(x, &thinking.tokens));
        let mut row = Vec::with_capacity(n);
        for k in 0..n {
            let stream = thought.derive(k);
            let answer = sample_answer_given(params, spec, x, bucket, &stream)?;
            let trace = Trace {
                thinking: thinking.tokens.clone(),
                answer: answer.tokens,
            };
            row.push(spec.reward(x, &trace, &stream.derive("noise"))?);
        }
        rewards.push(row);
        buckets.push(bucket);
    }
    NestedRewardMatrix::new(x, rewards, buckets)
}

/// Row means `S_j`.
pub fn thinking_scores(matrix: &NestedRewardMatrix) -> Vec<f64> {
    matrix
        .rows()
        .iter()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .collect()
}

/// Per-row `min(#1, #0) / n`, one entry per thought.
pub fn minority_outcome_rows(matrix: &NestedRewardMatrix) -> Result<Vec<f64>> {
    let n = matrix.n();
    matrix
        .rows()
        .iter()
        .map(|row| {
            let mut ones = 0usize;
            for &r in row {
                if r == 1.0 {
                    ones += 1;
                } else if r != 0.0 {
                    return Err(LabError::NonBinary(r));
                }
            }
            Ok(ones.min(n - ones) as f64 / n as f64)
        })
        .collect()
}

/// Mean over thoughts of the minority outcome fraction; rewards must be 0 or 1.
pub fn minority_outcome_ratio(matrix: &NestedRewardMatrix) -> Result<f64> {
    let rows = minority_outcome_rows(matrix)?;
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

/// Minority outcome ratio averaged uniformly over every (instruction, thought) row.
pub fn dataset_minority_outcome_ratio(matrices: &[NestedRewardMatrix]) -> Result<f64> {
    let mut total = 0.0;
    let mut rows = 0usize;
    for m in matrices {
        let r = minority_outcome_rows(m)?;
        rows += r.len();
        total += r.iter().sum::<f64>();
    }
    if rows == 0 {
        return Err(LabError::Invalid("no rows to average".into()));
    }
    Ok(total / rows as f64)
}

/// `(sigma_answer, sigma_thinking)`: mean within-row population std, and
/// population std of the row means.
pub fn fluctuations(matrix: &NestedRewardMatrix) -> (f64, f64) {
    let sigma_answer = matrix.rows().iter().map(|r| mean_and_pop_std(r).1).sum::<f64>() / matrix.m() as f64;
    let (_, sigma_thinking) = mean_and_pop_std(&thinking_scores(matrix));
    (sigma_answer, sigma_thinking)
}

/// `sigma_thinking / sigma_answer`, undefined when answers never vary.
pub fn coupling_ratio(sigma_answer: f64, sigma_thinking: f64) -> Option<f64> {
    (sigma_answer > 0.0).then(|| sigma_thinking / sigma_answer)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingStats {
    pub instruction: InstructionId,
    pub m: usize,
    pub n: usize,
    pub thinking_scores: Vec<f64>,
    pub sigma_answer: f64,
    pub sigma_thinking: f64,
    pub rho: Option<f64>,
    /// Only for 0/1 rewards.
    pub gamma: Option<f64>,
}

impl CouplingStats {
    pub fn of(matrix: &NestedRewardMatrix) -> Self {
        let (sigma_answer, sigma_thinking) = fluctuations(matrix);
        Self {
            instruction: matrix.instruction,
            m: matrix.m(),
            n: matrix.n(),
            thinking_scores: thinking_scores(matrix),
            sigma_answer,
            sigma_thinking,
            rho: coupling_ratio(sigma_answer, sigma_thinking),
            gamma: minority_outcome_ratio(matrix).ok(),
        }
    }
}

pub const HIST_BIN_WIDTH: f64 = 0.1;
/// Regular bins covering `[0, 3)`, followed by one overflow bin.
pub const HIST_BINS: usize = 30;

/// Bin index of a defined ratio; `HIST_BINS` is the overflow bin.
pub fn histogram_bin(rho: f64) -> usize {
    ((rho * 10.0).floor() as usize).min(HIST_BINS)
}

/// Median of the values, averaging the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoDistribution {
    pub stats: Vec<CouplingStats>,
    /// `HIST_BINS` regular bins plus the overflow bin.
    pub histogram: Vec<u64>,
    pub undefined_count: usize,
    pub median_rho: Option<f64>,
    /// Dataset-level minority outcome ratio for 0/1 rewards.
    pub gamma: Option<f64>,
}

impl RhoDistribution {
    pub fn from_matrices(matrices: &[NestedRewardMatrix]) -> Self {
        let stats: Vec<CouplingStats> = matrices.iter().map(CouplingStats::of).collect();
        let mut histogram = vec![0u64; HIST_BINS + 1];
        let defined: Vec<f64> = stats.iter().filter_map(|s| s.rho).collect();
        for &rho in &defined {
            histogram[histogram_bin(rho)] += 1;
        }
        Self {
            undefined_count: stats.len() - defined.len(),
            median_rho: median(&defined),
            gamma: dataset_minority_outcome_ratio(matrices).ok(),
            histogram,
            stats,
        }
    }

    pub fn coupling_csv(&self) -> String {
        let header = [
            "instruction",
            "sigma_answer",
            "sigma_thinking",
            "rho_or_empty",
            "gamma_or_empty",
            "m",
            "n",
        ];
        to_csv(
            &header,
            self.stats.iter().map(|s| {
                (
                    s.instruction.0,
                    s.sigma_answer,
                    s.sigma_thinking,
                    s.rho,
                    s.gamma,
                    s.m,
                    s.n,
                )
            }),
        )
    }

    /// The last row is the overflow bin, with an infinite upper edge.
    pub fn histogram_csv(&self) -> String {
        to_csv(
            &["bin_low", "bin_high", "count"],
            self.histogram.iter().enumerate().map(|(i, count)| {
                let low = i as f64 / 10.0;
                let high = if i < HIST_BINS {
                    (i + 1) as f64 / 10.0
                } else {
                    f64::INFINITY
                };
                (low.to_string(), high.to_string(), count)
            }),
        )
    }
}

/// Nested sampling for each instruction (stream `rng/"instruction"/x`) and
/// the resulting ratio distribution.
pub fn rho_distribution(
    params: &PolicyParams,
    spec: &TaskSpec,
    instructions: &[InstructionId],
    m: usize,
    n: usize,
    rng: &RngStream,
) -> Result<RhoDistribution> {
    if instructions.is_empty() {
        return Err(LabError::Invalid(
            "ratio distribution needs at least one instruction".into(),
        ));
    }
    let matrices: Vec<NestedRewardMatrix> = instructions
        .par_iter()
        .map(|&x| nested_sample(params, spec, x, m, n, &rng.derive("instruction").derive(x.index())))
        .collect::<Result<_>>()?;
    Ok(RhoDistribution::from_matrices(&matrices))
}
