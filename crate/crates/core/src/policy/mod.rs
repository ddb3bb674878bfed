//! Tabular two-head softmax policy.
//!
//! The thinking head holds one logit row per `(instruction, position)`; the
//! answer head holds one per `(instruction, bucket, position)`. Positions are
//! conditionally independent given the instruction (and, for the answer, the
//! bucket of the realized thought), which keeps the expected reward exactly
//! computable.

mod gradcheck;
mod surrogate;

pub use gradcheck::{grad_check, grad_check_against, random_gradcheck_case, GradCheckCase};
pub use surrogate::{surrogate_loss_and_grad, Aggregation, ClipConfig, KlConfig, SurrogateSample};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::TaskSpec;
use crate::error::{LabError, Result};
use crate::rng::RngStream;
use crate::types::{InstructionId, TokenId, Trace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub instruction_count: usize,
    pub thinking_len: usize,
    pub answer_len: usize,
    pub bucket_count: usize,
    pub vocab_size: usize,
}

impl PolicyShape {
    pub fn of(spec: &TaskSpec) -> Self {
        Self {
            instruction_count: spec.instruction_count,
            thinking_len: spec.thinking_len,
            answer_len: spec.answer_len,
            bucket_count: spec.bucket_count,
            vocab_size: spec.vocab_size,
        }
    }

    pub fn thinking_size(&self) -> usize {
        self.instruction_count * self.thinking_len * self.vocab_size
    }

    pub fn answer_size(&self) -> usize {
        self.instruction_count * self.bucket_count * self.answer_len * self.vocab_size
    }

    #[inline]
    pub fn thinking_offset(&self, x: usize, pos: usize) -> usize {
        (x * self.thinking_len + pos) * self.vocab_size
    }

    #[inline]
    pub fn answer_offset(&self, x: usize, bucket: usize, pos: usize) -> usize {
        ((x * self.bucket_count + bucket) * self.answer_len + pos) * self.vocab_size
    }
}

/// Logits of both heads, stored flat in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub shape: PolicyShape,
    /// `[instruction][position][token]`
    pub thinking: Vec<f64>,
    /// `[instruction][bucket][position][token]`
    pub answer: Vec<f64>,
}

/// Gradient with the same layout as [`PolicyParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    pub shape: PolicyShape,
    pub thinking: Vec<f64>,
    pub answer: Vec<f64>,
}

impl GradBuffer {
    pub fn zeros(shape: PolicyShape) -> Self {
        Self {
            shape,
            thinking: vec![0.0; shape.thinking_size()],
            answer: vec![0.0; shape.answer_size()],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.thinking.iter().chain(self.answer.iter())
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|g| *g == 0.0)
    }

    pub fn add_assign(&mut self, other: &GradBuffer) {
        for (a, b) in self.thinking.iter_mut().zip(&other.thinking) {
            *a += b;
        }
        for (a, b) in self.answer.iter_mut().zip(&other.answer) {
            *a += b;
        }
    }
}

/// Numerically stable log-softmax of one logit row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|z| z - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

/// Inverse-CDF draw from a log-probability row.
fn draw_token(logprobs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (v, lp) in logprobs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last_positive = v;
        }
        cum += p;
        if u < cum {
            return v;
        }
    }
    last_positive
}

fn sample_row(row: &[f64], rng: &mut crate::rng::PhiloxRng) -> (TokenId, f64) {
    let lp = log_softmax(row);
    let v = draw_token(&lp, rng.next_f64());
    (TokenId(v as u32), lp[v])
}

/// Initial parameters: all-zero logits, plus `N(0, scale^2)` noise when `scale > 0`.
pub fn init_params(spec: &TaskSpec, scale: f64, rng: &RngStream) -> Result<PolicyParams> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(LabError::Config(format!("init scale {scale} must be finite and >= 0")));
    }
    let shape = PolicyShape::of(spec);
    let mut params = PolicyParams::uniform(shape);
    if scale > 0.0 {
        let mut r = rng.derive("thinking").rng();
        for z in &mut params.thinking {
            let n: f64 = StandardNormal.sample(&mut r);
            *z = scale * n;
        }
        let mut r = rng.derive("answer").rng();
        for z in &mut params.answer {
            let n: f64 = StandardNormal.sample(&mut r);
            *z = scale * n;
        }
    }
    Ok(params)
}

/// Tokens and their log-probabilities for one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSample {
    pub tokens: Vec<TokenId>,
    pub logprobs: Vec<f64>,
}

/// A sampled trace whose reward has not been scored yet.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledTrace {
    pub trace: Trace,
    pub token_logprobs: Vec<f64>,
    pub bucket: usize,
}

impl PolicyParams {
    pub fn uniform(shape: PolicyShape) -> Self {
        Self {
            shape,
            thinking: vec![0.0; shape.thinking_size()],
            answer: vec![0.0; shape.answer_size()],
        }
    }

    pub fn check_shape(&self, spec: &TaskSpec) -> Result<()> {
        let want = PolicyShape::of(spec);
        if self.shape != want || self.thinking.len() != want.thinking_size() || self.answer.len() != want.answer_size()
        {
            return Err(LabError::Shape(format!(
                "policy shape {:?} does not match task shape {:?}",
                self.shape, want
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.thinking.iter().chain(&self.answer).all(|z| z.is_finite())
    }

    pub fn thinking_row(&self, x: usize, pos: usize) -> &[f64] {
        let o = self.shape.thinking_offset(x, pos);
        &self.thinking[o..o + self.shape.vocab_size]
    }

    pub fn answer_row(&self, x: usize, bucket: usize, pos: usize) -> &[f64] {
        let o = self.shape.answer_offset(x, bucket, pos);
        &self.answer[o..o + self.shape.vocab_size]
    }

    pub fn thinking_row_mut(&mut self, x: usize, pos: usize) -> &mut [f64] {
        let o = self.shape.thinking_offset(x, pos);
        let v = self.shape.vocab_size;
        &mut self.thinking[o..o + v]
    }

    pub fn answer_row_mut(&mut self, x: usize, bucket: usize, pos: usize) -> &mut [f64] {
        let o = self.shape.answer_offset(x, bucket, pos);
        let v = self.shape.vocab_size;
        &mut self.answer[o..o + v]
    }

    /// Per-position token probabilities of the thinking head.
    pub fn thinking_probs(&self, x: usize, pos: usize) -> Vec<f64> {
        softmax(self.thinking_row(x, pos))
    }

    pub fn answer_probs(&self, x: usize, bucket: usize, pos: usize) -> Vec<f64> {
        softmax(self.answer_row(x, bucket, pos))
    }
}

/// Sample the thinking segment from `rng`.
pub fn sample_thinking(
    params: &PolicyParams,
    spec: &TaskSpec,
    x: InstructionId,
    rng: &RngStream,
) -> Result<SegmentSample> {
    params.check_shape(spec)?;
    spec.check_instruction(x)?;
    let mut r = rng.rng();
    let (tokens, logprobs) = (0..spec.thinking_len)
        .map(|pos| sample_row(params.thinking_row(x.index(), pos), &mut r))
        .unzip();
    Ok(SegmentSample { tokens, logprobs })
}

/// Sample an answer for a fixed bucket. Draws from `rng.derive("answer")`,
/// the same stream [`sample_trace`] uses for its answer segment.
pub fn sample_answer_given(
    params: &PolicyParams,
    spec: &TaskSpec,
    x: InstructionId,
    bucket: usize,
    rng: &RngStream,
) -> Result<SegmentSample> {
    params.check_shape(spec)?;
    spec.check_instruction(x)?;
    spec.check_bucket(bucket)?;
    let mut r = rng.derive("answer").rng();
    let (tokens, logprobs) = (0..spec.answer_len)
        .map(|pos| sample_row(params.answer_row(x.index(), bucket, pos), &mut r))
        .unzip();
    Ok(SegmentSample { tokens, logprobs })
}

pub(crate) fn join_segments(thinking: SegmentSample, answer: SegmentSample, bucket: usize) -> SampledTrace {
    let mut token_logprobs = thinking.logprobs;
    token_logprobs.extend(answer.logprobs);
    SampledTrace {
        trace: Trace {
            thinking: thinking.tokens,
            answer: answer.tokens,
        },
        token_logprobs,
        bucket,
    }
}

/// Sample a full trace: thinking from `rng.derive("thinking")`, then the
/// answer conditioned on the realized bucket.
pub fn sample_trace(params: &PolicyParams, spec: &TaskSpec, x: InstructionId, rng: &RngStream) -> Result<SampledTrace> {
    let thinking = sample_thinking(params, spec, x, &rng.derive("thinking"))?;
    let bucket = spec.bucket_for_count(spec.good_thinking_count(x, &thinking.tokens));
    let answer = sample_answer_given(params, spec, x, bucket, rng)?;
    Ok(join_segments(thinking, answer, bucket))
}

/// Per-token log-probabilities of `trace` under `params`.
pub fn log_prob(params: &PolicyParams, spec: &TaskSpec, x: InstructionId, trace: &Trace) -> Result<Vec<f64>> {
    params.check_shape(spec)?;
    spec.check_instruction(x)?;
    spec.validate_trace(trace)?;
    let xi = x.index();
    let bucket = spec.bucket_for_count(spec.good_thinking_count(x, &trace.thinking));
    let mut out = Vec::with_capacity(trace.len());
    for (pos, t) in trace.thinking.iter().enumerate() {
        out.push(log_softmax(params.thinking_row(xi, pos))[t.index()]);
    }
    for (pos, t) in trace.answer.iter().enumerate() {
        out.push(log_softmax(params.answer_row(xi, bucket, pos))[t.index()]);
    }
    Ok(out)
}
