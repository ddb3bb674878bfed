//! Clipped, masked surrogate objective with an optional k3 KL penalty.
//!
//! Per token `i` with mask `M_i`:
//!
//! ```text
//! ratio_i = exp(logp_i - old_logp_i)
//! obj_i   = M_i * ( min(ratio_i * A_i, clip(ratio_i, 1 - eps_low, 1 + eps_high) * A_i)
//!                   - kl_coef * (exp(ref_logp_i - logp_i) - (ref_logp_i - logp_i) - 1) )
//! ```
//!
//! The loss is the negated aggregate of `obj_i`; the gradient is analytic.

use serde::{Deserialize, Serialize};

use super::{log_softmax, GradBuffer, PolicyParams};
use crate::env::TaskSpec;
use crate::error::{LabError, Result};
use crate::types::Rollout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Each sequence contributes `sum_i obj_i / len(sequence)`; sequences are then averaged.
    SequenceMean,
    /// `sum obj_i` over the batch divided by the number of unmasked tokens.
    TokenMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub aggregation: Aggregation,
}

impl ClipConfig {
    pub fn symmetric(eps: f64) -> Self {
        Self {
            eps_low: eps,
            eps_high: eps,
            aggregation: Aggregation::SequenceMean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, e) in [("eps_low", self.eps_low), ("eps_high", self.eps_high)] {
            if !(0.0..1.0).contains(&e) {
                return Err(LabError::Config(format!("clip {name} = {e} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlConfig {
    pub enabled: bool,
    pub coefficient: f64,
}

impl Default for KlConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            coefficient: 0.001,
        }
    }
}

impl KlConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            coefficient: 0.0,
        }
    }
}

/// One rollout with everything the surrogate needs per token.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateSample {
    pub rollout: Rollout,
    pub old_logprobs: Vec<f64>,
    /// Required when the KL term is enabled.
    pub ref_logprobs: Option<Vec<f64>>,
    pub advantages: Vec<f64>,
    pub mask: Vec<bool>,
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(LabError::LengthMismatch { what, expected, actual });
    }
    Ok(())
}

/// Loss and exact gradient of the masked clipped surrogate over `batch`.
pub fn surrogate_loss_and_grad(
    params: &PolicyParams,
    spec: &TaskSpec,
    batch: &[SurrogateSample],
    clip: &ClipConfig,
    kl: &KlConfig,
) -> Result<(f64, GradBuffer)> {
    params.check_shape(spec)?;
    let len = spec.sequence_len();
    for s in batch {
        spec.check_instruction(s.rollout.instruction)?;
        spec.validate_trace(&s.rollout.trace)?;
        check_len("old_logprobs", len, s.old_logprobs.len())?;
        check_len("advantages", len, s.advantages.len())?;
        check_len("mask", len, s.mask.len())?;
        if let Some(r) = &s.ref_logprobs {
            check_len("ref_logprobs", len, r.len())?;
        } else if kl.enabled {
            return Err(LabError::Invalid(
                "KL enabled but sample has no reference log-probabilities".into(),
            ));
        }
        if s.advantages.iter().any(|a| !a.is_finite()) {
            return Err(LabError::NonFinite("advantage".into()));
        }
    }

    let mut grad = GradBuffer::zeros(params.shape);
    let unmasked: usize = batch.iter().map(|s| s.mask.iter().filter(|m| **m).count()).sum();
    if batch.is_empty() || unmasked == 0 {
        return Ok((0.0, grad));
    }
    let weight = match clip.aggregation {
        Aggregation::SequenceMean => 1.0 / (batch.len() * len) as f64,
        Aggregation::TokenMean => 1.0 / unmasked as f64,
    };

    let lo = 1.0 - clip.eps_low;
    let hi = 1.0 + clip.eps_high;
    let shape = params.shape;
    let v = shape.vocab_size;
    let mut objective = 0.0;

    for s in batch {
        let x = s.rollout.instruction;
        let xi = x.index();
        let trace = &s.rollout.trace;
        let bucket = spec.bucket_for_count(spec.good_thinking_count(x, &trace.thinking));
        for (i, token) in trace.tokens().enumerate() {
            if !s.mask[i] {
                continue;
            }
            let (row, offset, in_thinking) = if i < spec.thinking_len {
                (params.thinking_row(xi, i), shape.thinking_offset(xi, i), true)
            } else {
                let pos = i - spec.thinking_len;
                (
                    params.answer_row(xi, bucket, pos),
                    shape.answer_offset(xi, bucket, pos),
                    false,
                )
            };
            let lp = log_softmax(row);
            let new = lp[token.index()];
            let adv = s.advantages[i];
            let ratio = (new - s.old_logprobs[i]).exp();
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(lo, hi) * adv;
            let (mut term, mut dterm) = if unclipped <= clipped {
                (unclipped, unclipped)
            } else {
                (clipped, 0.0)
            };
            if kl.enabled {
                let r = s.ref_logprobs.as_ref().expect("checked above");
                let delta = r[i] - new;
                let ed = delta.exp();
                term -= kl.coefficient * (ed - delta - 1.0);
                dterm -= kl.coefficient * (1.0 - ed);
            }
            objective += weight * term;

            // d loss / d logits = -weight * dterm * (onehot(token) - softmax)
            let coef = -weight * dterm;
            if coef != 0.0 {
                let g = if in_thinking {
                    &mut grad.thinking[offset..offset + v]
                } else {
                    &mut grad.answer[offset..offset + v]
                };
                for (k, gk) in g.iter_mut().enumerate() {
                    let onehot = if k == token.index() { 1.0 } else { 0.0 };
                    *gk += coef * (onehot - lp[k].exp());
                }
            }
        }
    }
    let loss = -objective;
    if !loss.is_finite() {
        return Err(LabError::NonFinite("surrogate loss".into()));
    }
    Ok((loss, grad))
}
