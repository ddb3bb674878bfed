//! Synthetic two-segment generation environment.
//!
//! Each instruction `x` owns a set of good thinking tokens `G_T(x)` and, per
//! thinking-quality bucket `b`, a set of good answer tokens `G_A(x, b)`. A
//! single instruction-independent style set `S` scores the answer regardless
//! of the thought. In general mode the reward is
//!
//! ```text
//! r = beta * q_T * q_A + (1 - beta) * style + eps,  eps = clamp(N(0, sigma^2), -3 sigma, 3 sigma)
//! ```
//!
//! so `beta` moves the environment from style-dominated (small `beta`) to
//! thinking-gated (`beta = 1`). Verifiable mode pays 1 iff both `q_T >= tau_T`
//! and `q_A >= tau_A`.

mod oracle;

pub use oracle::{answer_count_distribution, expected_reward_oracle, good_thinking_count_distribution};

use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::RngStream;
use crate::types::{InstructionId, TokenId, Trace};

/// Tolerance used when comparing a count-derived quality against a threshold.
const THRESHOLD_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    General,
    Verifiable,
}

/// Knobs for building a [`TaskSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub vocab_size: usize,
    pub instruction_count: usize,
    pub thinking_len: usize,
    pub answer_len: usize,
    pub bucket_count: usize,
    pub good_thinking_size: usize,
    pub style_size: usize,
    pub good_answer_size: usize,
    pub coupling: f64,
    pub noise_sigma: f64,
    pub mode: RewardMode,
    pub tau_thinking: f64,
    pub tau_answer: f64,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            instruction_count: 8,
            thinking_len: 6,
            answer_len: 3,
            bucket_count: 4,
            good_thinking_size: 4,
            style_size: 4,
            good_answer_size: 4,
            coupling: 0.25,
            noise_sigma: 0.02,
            mode: RewardMode::General,
            tau_thinking: 2.0 / 3.0,
            tau_answer: 2.0 / 3.0,
            seed: 0,
        }
    }
}

impl EnvConfig {
    /// The task drawn from this config's own seed.
    pub fn build(&self) -> Result<TaskSpec> {
        generate_task(self, &RngStream::new(self.seed))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LabError::Config(msg));
        if self.vocab_size == 0 {
            return bad("vocab_size must be >= 1".into());
        }
        if self.instruction_count == 0 {
            return bad("instruction_count must be >= 1".into());
        }
        if self.thinking_len == 0 {
            return bad("thinking_len must be >= 1".into());
        }
        if self.bucket_count == 0 {
            return bad("bucket_count must be >= 1".into());
        }
        for (name, size) in [
            ("good_thinking_size", self.good_thinking_size),
            ("style_size", self.style_size),
            ("good_answer_size", self.good_answer_size),
        ] {
            if size > self.vocab_size {
                return bad(format!("{name} = {size} exceeds vocab_size = {}", self.vocab_size));
            }
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return bad(format!("coupling = {} outside [0, 1]", self.coupling));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma = {} must be finite and >= 0", self.noise_sigma));
        }
        for (name, tau) in [("tau_thinking", self.tau_thinking), ("tau_answer", self.tau_answer)] {
            if !(tau > 0.0 && tau <= 1.0) {
                return bad(format!("{name} = {tau} outside (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Sorted, duplicate-free set of tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSet(Vec<u32>);

impl TokenSet {
    pub fn new(mut tokens: Vec<u32>) -> Self {
        tokens.sort_unstable();
        tokens.dedup();
        TokenSet(tokens)
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.0.binary_search(&token.0).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }
}

/// A generated environment instance. Immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub instruction_count: usize,
    pub thinking_len: usize,
    pub answer_len: usize,
    pub bucket_count: usize,
    /// `good_thinking[x]`
    pub good_thinking: Vec<TokenSet>,
    pub style: TokenSet,
    /// `good_answer[x][bucket]`
    pub good_answer: Vec<Vec<TokenSet>>,
    pub coupling: f64,
    pub noise_sigma: f64,
    pub mode: RewardMode,
    pub tau_thinking: f64,
    pub tau_answer: f64,
    pub seed: u64,
}

/// Everything that went into one reward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityBreakdown {
    pub thinking_quality: f64,
    pub bucket: usize,
    pub answer_quality: f64,
    pub style: f64,
    pub noise: f64,
    pub reward: f64,
}

fn sample_set(rng: &mut impl rand::Rng, vocab: usize, size: usize) -> TokenSet {
    TokenSet::new(index::sample(rng, vocab, size).into_iter().map(|t| t as u32).collect())
}

/// Build a task from `config`, drawing every set from `rng`.
pub fn generate_task(config: &EnvConfig, rng: &RngStream) -> Result<TaskSpec> {
    config.validate()?;
    let v = config.vocab_size;
    let good_thinking = (0..config.instruction_count)
        .map(|x| {
            let mut r = rng.derive_path(["thinking".into(), crate::rng::Label::from(x)]).rng();
            sample_set(&mut r, v, config.good_thinking_size)
        })
        .collect();
    let style = sample_set(&mut rng.derive("style").rng(), v, config.style_size);
    let good_answer = (0..config.instruction_count)
        .map(|x| {
            (0..config.bucket_count)
                .map(|b| {
                    let mut r = rng.derive("answer").derive(x).derive(b).rng();
                    sample_set(&mut r, v, config.good_answer_size)
                })
                .collect()
        })
        .collect();
    Ok(TaskSpec {
        vocab_size: v,
        instruction_count: config.instruction_count,
        thinking_len: config.thinking_len,
        answer_len: config.answer_len,
        bucket_count: config.bucket_count,
        good_thinking,
        style,
        good_answer,
        coupling: config.coupling,
        noise_sigma: config.noise_sigma,
        mode: config.mode,
        tau_thinking: config.tau_thinking,
        tau_answer: config.tau_answer,
        seed: rng.root_seed(),
    })
}

fn fraction(count: usize, len: usize) -> f64 {
    // An empty segment scores 0.
    if len == 0 {
        0.0
    } else {
        count as f64 / len as f64
    }
}

impl TaskSpec {
    pub fn sequence_len(&self) -> usize {
        self.thinking_len + self.answer_len
    }

    pub fn check_instruction(&self, x: InstructionId) -> Result<()> {
        if x.index() >= self.instruction_count {
            return Err(LabError::OutOfRange {
                what: "instruction",
                value: x.index(),
                bound: self.instruction_count,
            });
        }
        Ok(())
    }

    pub fn check_bucket(&self, bucket: usize) -> Result<()> {
        if bucket >= self.bucket_count {
            return Err(LabError::OutOfRange {
                what: "bucket",
                value: bucket,
                bound: self.bucket_count,
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|t| t.index() >= self.vocab_size) {
            Some(t) => Err(LabError::OutOfRange {
                what: "token",
                value: t.index(),
                bound: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn check_segment(&self, what: &'static str, tokens: &[TokenId], expected: usize) -> Result<()> {
        if tokens.len() != expected {
            return Err(LabError::LengthMismatch {
                what,
                expected,
                actual: tokens.len(),
            });
        }
        self.check_tokens(tokens)
    }

    pub fn validate_trace(&self, trace: &Trace) -> Result<()> {
        self.check_segment("thinking segment", &trace.thinking, self.thinking_len)?;
        self.check_segment("answer segment", &trace.answer, self.answer_len)
    }

    pub fn good_thinking_count(&self, x: InstructionId, thinking: &[TokenId]) -> usize {
        let set = &self.good_thinking[x.index()];
        thinking.iter().filter(|t| set.contains(**t)).count()
    }

    pub fn good_answer_count(&self, x: InstructionId, bucket: usize, answer: &[TokenId]) -> usize {
        let set = &self.good_answer[x.index()][bucket];
        answer.iter().filter(|t| set.contains(**t)).count()
    }

    pub fn style_count(&self, answer: &[TokenId]) -> usize {
        answer.iter().filter(|t| self.style.contains(**t)).count()
    }

    /// Bucket for a thinking trace with `count` good tokens, in exact integer arithmetic.
    pub fn bucket_for_count(&self, count: usize) -> usize {
        ((count * self.bucket_count) / self.thinking_len).min(self.bucket_count - 1)
    }

    /// Fraction of thinking tokens in `G_T(x)`.
    pub fn thinking_quality(&self, x: InstructionId, thinking: &[TokenId]) -> Result<f64> {
        self.check_instruction(x)?;
        self.check_segment("thinking segment", thinking, self.thinking_len)?;
        Ok(fraction(self.good_thinking_count(x, thinking), self.thinking_len))
    }

    /// `floor(q_T * B)`, clamped to `B - 1`.
    pub fn bucket_of(&self, thinking_quality: f64) -> usize {
        let b = (thinking_quality.clamp(0.0, 1.0) * self.bucket_count as f64).floor() as usize;
        b.min(self.bucket_count - 1)
    }

    /// Fraction of answer tokens in `G_A(x, bucket)`.
    pub fn answer_quality(&self, x: InstructionId, bucket: usize, answer: &[TokenId]) -> Result<f64> {
        self.check_instruction(x)?;
        self.check_bucket(bucket)?;
        self.check_segment("answer segment", answer, self.answer_len)?;
        Ok(fraction(self.good_answer_count(x, bucket, answer), self.answer_len))
    }

    /// Fraction of answer tokens in the style set.
    pub fn style_score(&self, answer: &[TokenId]) -> Result<f64> {
        self.check_segment("answer segment", answer, self.answer_len)?;
        Ok(fraction(self.style_count(answer), self.answer_len))
    }

    /// Reward of `(q_T, q_A, style)` before noise.
    pub fn noiseless_reward(&self, thinking_quality: f64, answer_quality: f64, style: f64) -> f64 {
        match self.mode {
            RewardMode::General => self.coupling * thinking_quality * answer_quality + (1.0 - self.coupling) * style,
            RewardMode::Verifiable => {
                let pass = thinking_quality + THRESHOLD_SLACK >= self.tau_thinking
                    && answer_quality + THRESHOLD_SLACK >= self.tau_answer;
                if pass {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Clipped Gaussian reward noise; always 0 in verifiable mode.
    pub fn draw_noise(&self, rng: &RngStream) -> f64 {
        if self.mode == RewardMode::Verifiable || self.noise_sigma == 0.0 {
            return 0.0;
        }
        let sigma = self.noise_sigma;
        let normal = Normal::new(0.0, sigma).expect("validated sigma");
        let eps: f64 = normal.sample(&mut rng.rng());
        eps.clamp(-3.0 * sigma, 3.0 * sigma)
    }

    /// Score a trace; the noise is drawn from `rng`.
    pub fn score(&self, x: InstructionId, trace: &Trace, rng: &RngStream) -> Result<QualityBreakdown> {
        self.check_instruction(x)?;
        self.validate_trace(trace)?;
        let count = self.good_thinking_count(x, &trace.thinking);
        let thinking_quality = fraction(count, self.thinking_len);
        let bucket = self.bucket_for_count(count);
        let answer_quality = fraction(self.good_answer_count(x, bucket, &trace.answer), self.answer_len);
        let style = fraction(self.style_count(&trace.answer), self.answer_len);
        let noise = self.draw_noise(rng);
        let reward = self.noiseless_reward(thinking_quality, answer_quality, style) + noise;
        Ok(QualityBreakdown {
            thinking_quality,
            bucket,
            answer_quality,
            style,
            noise,
            reward,
        })
    }

    pub fn reward(&self, x: InstructionId, trace: &Trace, rng: &RngStream) -> Result<f64> {
        Ok(self.score(x, trace, rng)?.reward)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("task serializes");
        s.push('\n');
        s
    }
}
