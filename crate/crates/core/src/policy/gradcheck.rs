use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    init_params, log_prob, sample_trace, surrogate_loss_and_grad, Aggregation, ClipConfig, GradBuffer, KlConfig,
    PolicyParams, SurrogateSample,
};
use crate::env::{generate_task, EnvConfig, TaskSpec};
use crate::error::{LabError, Result};
use crate::rng::RngStream;
use crate::types::{InstructionId, Rollout};

/// Max over parameters of `|analytic - fd| / max(1e-12, |fd|)` with central differences.
pub fn grad_check(
    params: &PolicyParams,
    spec: &TaskSpec,
    batch: &[SurrogateSample],
    clip: &ClipConfig,
    kl: &KlConfig,
    fd_step: f64,
) -> Result<f64> {
    let (_, analytic) = surrogate_loss_and_grad(params, spec, batch, clip, kl)?;
    grad_check_against(params, spec, batch, clip, kl, fd_step, &analytic)
}

/// Same as [`grad_check`] but compares against a caller-supplied gradient.
pub fn grad_check_against(
    params: &PolicyParams,
    spec: &TaskSpec,
    batch: &[SurrogateSample],
    clip: &ClipConfig,
    kl: &KlConfig,
    fd_step: f64,
    analytic: &GradBuffer,
) -> Result<f64> {
    if !(fd_step > 0.0) {
        return Err(LabError::Invalid(format!("fd_step {fd_step} must be > 0")));
    }
    let loss_at = |p: &PolicyParams| surrogate_loss_and_grad(p, spec, batch, clip, kl).map(|(l, _)| l);
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let mut compare = |fd: f64, a: f64| {
        let err = (a - fd).abs() / fd.abs().max(1e-12);
        worst = worst.max(err);
    };
    for j in 0..params.thinking.len() {
        let orig = probe.thinking[j];
        probe.thinking[j] = orig + fd_step;
        let up = loss_at(&probe)?;
        probe.thinking[j] = orig - fd_step;
        let down = loss_at(&probe)?;
        probe.thinking[j] = orig;
        compare((up - down) / (2.0 * fd_step), analytic.thinking[j]);
    }
    for j in 0..params.answer.len() {
        let orig = probe.answer[j];
        probe.answer[j] = orig + fd_step;
        let up = loss_at(&probe)?;
        probe.answer[j] = orig - fd_step;
        let down = loss_at(&probe)?;
        probe.answer[j] = orig;
        compare((up - down) / (2.0 * fd_step), analytic.answer[j]);
    }
    Ok(worst)
}

/// A randomly drawn gradient-check problem on a small geometry.
#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub spec: TaskSpec,
    pub params: PolicyParams,
    pub batch: Vec<SurrogateSample>,
    pub clip: ClipConfig,
    pub kl: KlConfig,
}

fn perturbed(params: &PolicyParams, scale: f64, rng: &RngStream) -> PolicyParams {
    let mut out = params.clone();
    let mut r = rng.rng();
    for z in out.thinking.iter_mut().chain(out.answer.iter_mut()) {
        let n: f64 = StandardNormal.sample(&mut r);
        *z += scale * n;
    }
    out
}

/// V=4, L_T=2, L_A=1, two instructions and two buckets, batch of 6.
/// Old and reference policies are perturbations of the current one, so
/// ratios straddle the clip range; advantages and masks are random per token.
pub fn random_gradcheck_case(rng: &RngStream) -> Result<GradCheckCase> {
    let env = EnvConfig {
        vocab_size: 4,
        instruction_count: 2,
        thinking_len: 2,
        answer_len: 1,
        bucket_count: 2,
        good_thinking_size: 2,
        style_size: 2,
        good_answer_size: 2,
        ..EnvConfig::default()
    };
    let spec = generate_task(&env, &rng.derive("task"))?;
    let params = init_params(&spec, 1.0, &rng.derive("params"))?;
    let old = perturbed(&params, 0.25, &rng.derive("old"));
    let reference = perturbed(&params, 0.5, &rng.derive("ref"));

    let mut r = rng.derive("knobs").rng();
    let clip = ClipConfig {
        eps_low: r.random_range(0.05..0.4),
        eps_high: r.random_range(0.05..0.4),
        aggregation: if r.random_bool(0.5) {
            Aggregation::SequenceMean
        } else {
            Aggregation::TokenMean
        },
    };
    let kl = if r.random_bool(0.5) {
        KlConfig {
            enabled: true,
            coefficient: r.random_range(0.001..0.5),
        }
    } else {
        KlConfig::disabled()
    };

    let len = spec.sequence_len();
    let mut batch = Vec::with_capacity(6);
    for i in 0..6u64 {
        let x = InstructionId((i % 2) as u32);
        let stream = rng.derive("rollout").derive(i);
        let sampled = sample_trace(&params, &spec, x, &stream)?;
        let old_logprobs = log_prob(&old, &spec, x, &sampled.trace)?;
        let ref_logprobs = log_prob(&reference, &spec, x, &sampled.trace)?;
        let mut k = stream.derive("tokens").rng();
        let advantages = (0..len).map(|_| StandardNormal.sample(&mut k)).collect();
        let mask = (0..len).map(|_| k.random_bool(0.75)).collect();
        batch.push(SurrogateSample {
            rollout: Rollout {
                instruction: x,
                trace: sampled.trace,
                reward: 0.0,
                token_logprobs: sampled.token_logprobs,
            },
            old_logprobs,
            ref_logprobs: Some(ref_logprobs),
            advantages,
            mask,
        });
    }
    Ok(GradCheckCase {
        spec,
        params,
        batch,
        clip,
        kl,
    })
}
