//! Exact expected reward of a tabular policy on one instruction.
//!
//! The good-thinking count is Poisson-binomial over the thinking positions.
//! Given the count, the bucket is fixed, and the answer positions split each
//! token into four categories `{G_A & S, G_A \ S, S \ G_A, neither}`; a second
//! dynamic program yields the joint law of (good-answer count, style count).
//! Reward noise is symmetric and contributes nothing in expectation.

use super::{fraction, TaskSpec};
use crate::error::Result;
use crate::policy::PolicyParams;
use crate::types::{InstructionId, TokenId};

/// Poisson-binomial law of the number of successes given per-trial probabilities.
fn poisson_binomial(probs: &[f64]) -> Vec<f64> {
    let mut dist = vec![0.0; probs.len() + 1];
    dist[0] = 1.0;
    for (n, p) in probs.iter().enumerate() {
        for c in (0..=n + 1).rev() {
            let stay = dist[c] * (1.0 - p);
            let step = if c > 0 { dist[c - 1] * p } else { 0.0 };
            dist[c] = stay + step;
        }
    }
    dist
}

/// `dist[c]` = P(exactly `c` thinking tokens land in `G_T(x)`).
pub fn good_thinking_count_distribution(params: &PolicyParams, spec: &TaskSpec, x: InstructionId) -> Vec<f64> {
    let set = &spec.good_thinking[x.index()];
    let probs: Vec<f64> = (0..spec.thinking_len)
        .map(|pos| {
            params
                .thinking_probs(x.index(), pos)
                .iter()
                .enumerate()
                .filter(|(v, _)| set.contains(TokenId(*v as u32)))
                .map(|(_, p)| p)
                .sum()
        })
        .collect();
    poisson_binomial(&probs)
}

/// `joint[a][s]` = P(a answer tokens in `G_A(x, bucket)` and s in the style set).
pub fn answer_count_distribution(
    params: &PolicyParams,
    spec: &TaskSpec,
    x: InstructionId,
    bucket: usize,
) -> Vec<Vec<f64>> {
    let n = spec.answer_len;
    let good = &spec.good_answer[x.index()][bucket];
    let mut joint = vec![vec![0.0; n + 1]; n + 1];
    joint[0][0] = 1.0;
    for pos in 0..n {
        // [both, good only, style only, neither]
        let mut cat = [0.0f64; 4];
        for (v, p) in params.answer_probs(x.index(), bucket, pos).iter().enumerate() {
            let t = TokenId(v as u32);
            let idx = match (good.contains(t), spec.style.contains(t)) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            cat[idx] += p;
        }
        let mut next = vec![vec![0.0; n + 1]; n + 1];
        for a in 0..=pos {
            for s in 0..=pos {
                let m = joint[a][s];
                if m == 0.0 {
                    continue;
                }
                next[a + 1][s + 1] += m * cat[0];
                next[a + 1][s] += m * cat[1];
                next[a][s + 1] += m * cat[2];
                next[a][s] += m * cat[3];
            }
        }
        joint = next;
    }
    joint
}

/// Exact `E[r]` for instruction `x` under `params`.
pub fn expected_reward_oracle(params: &PolicyParams, spec: &TaskSpec, x: InstructionId) -> Result<f64> {
    params.check_shape(spec)?;
    spec.check_instruction(x)?;
    let counts = good_thinking_count_distribution(params, spec, x);
    let mut per_bucket: Vec<Option<Vec<Vec<f64>>>> = vec![None; spec.bucket_count];
    let mut total = 0.0;
    for (c, pc) in counts.iter().enumerate() {
        if *pc == 0.0 {
            continue;
        }
        let bucket = spec.bucket_for_count(c);
        let joint = per_bucket[bucket].get_or_insert_with(|| answer_count_distribution(params, spec, x, bucket));
        let qt = fraction(c, spec.thinking_len);
        let mut inner = 0.0;
        for (a, row) in joint.iter().enumerate() {
            for (s, p) in row.iter().enumerate() {
                if *p == 0.0 {
                    continue;
                }
                let qa = fraction(a, spec.answer_len);
                let style = fraction(s, spec.answer_len);
                inner += p * spec.noiseless_reward(qt, qa, style);
            }
        }
        total += pc * inner;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_task, EnvConfig, RewardMode, TokenSet};
    use crate::policy::{init_params, PolicyParams, PolicyShape};
    use crate::rng::RngStream;

    #[test]
    fn poisson_binomial_matches_binomial() {
        let d = poisson_binomial(&[0.25; 6]);
        // C(6,k) 0.25^k 0.75^(6-k)
        let binom = [1.0, 6.0, 15.0, 20.0, 15.0, 6.0, 1.0];
        for (k, p) in d.iter().enumerate() {
            let want = binom[k] * 0.25f64.powi(k as i32) * 0.75f64.powi(6 - k as i32);
            assert!((p - want).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_policy_closed_form() {
        // beta * (g_T/V) * (g_A/V) + (1 - beta) * g_S/V
        let spec = generate_task(&EnvConfig::default(), &RngStream::new(3)).unwrap();
        let params = PolicyParams::uniform(PolicyShape::of(&spec));
        for x in 0..8u32 {
            let e = expected_reward_oracle(&params, &spec, InstructionId(x)).unwrap();
            assert!((e - 0.203125).abs() < 1e-14, "{e}");
        }
    }

    #[test]
    fn verifiable_tiny_closed_form() {
        let cfg = EnvConfig {
            thinking_len: 2,
            answer_len: 1,
            mode: RewardMode::Verifiable,
            tau_thinking: 1.0,
            tau_answer: 1.0,
            ..EnvConfig::default()
        };
        let spec = generate_task(&cfg, &RngStream::new(3)).unwrap();
        let params = PolicyParams::uniform(PolicyShape::of(&spec));
        let e = expected_reward_oracle(&params, &spec, InstructionId(0)).unwrap();
        assert!((e - 0.015625).abs() < 1e-15, "{e}");
    }

    // Deterministic policy: emits token 0 (in G_T) everywhere in thinking and
    // token 4 (in G_A and S) in the first answer slot, token 8 (G_A only) and
    // token 5 (S only) in the others. By hand: q_T = 1, bucket 3, q_A = 2/3,
    // style = 2/3, r = 0.25 * 2/3 + 0.75 * 2/3 = 2/3.
    #[test]
    fn deterministic_policy_hand_value() {
        let spec = TaskSpec {
            vocab_size: 16,
            instruction_count: 1,
            thinking_len: 6,
            answer_len: 3,
            bucket_count: 4,
            good_thinking: vec![TokenSet::new(vec![0, 1, 2, 3])],
            style: TokenSet::new(vec![4, 5, 6, 7]),
            good_answer: vec![(0..4).map(|_| TokenSet::new(vec![4, 8, 9, 10])).collect()],
            coupling: 0.25,
            noise_sigma: 0.02,
            mode: RewardMode::General,
            tau_thinking: 2.0 / 3.0,
            tau_answer: 2.0 / 3.0,
            seed: 0,
        };
        let mut params = PolicyParams::uniform(PolicyShape::of(&spec));
        for pos in 0..6 {
            params.thinking_row_mut(0, pos)[0] = 1e6;
        }
        for (pos, tok) in [4usize, 8, 5].iter().enumerate() {
            params.answer_row_mut(0, 3, pos)[*tok] = 1e6;
        }
        let e = expected_reward_oracle(&params, &spec, InstructionId(0)).unwrap();
        assert!((e - 2.0 / 3.0).abs() < 1e-12, "{e}");
    }

    // With beta = 0 and an answer head that does not vary by bucket, the
    // thinking head cannot move the expected reward.
    #[test]
    fn coupling_zero_ignores_thinking_head() {
        let cfg = EnvConfig {
            coupling: 0.0,
            ..EnvConfig::default()
        };
        let spec = generate_task(&cfg, &RngStream::new(3)).unwrap();
        let mut a = init_params(&spec, 1.0, &RngStream::new(1)).unwrap();
        for x in 0..spec.instruction_count {
            for pos in 0..spec.answer_len {
                let row = a.answer_row(x, 0, pos).to_vec();
                for bucket in 1..spec.bucket_count {
                    a.answer_row_mut(x, bucket, pos).copy_from_slice(&row);
                }
            }
        }
        let mut b = a.clone();
        b.thinking = init_params(&spec, 3.0, &RngStream::new(2)).unwrap().thinking;
        for x in 0..8u32 {
            let ea = expected_reward_oracle(&a, &spec, InstructionId(x)).unwrap();
            let eb = expected_reward_oracle(&b, &spec, InstructionId(x)).unwrap();
            assert!((ea - eb).abs() < 1e-14);
        }
    }

    #[test]
    fn distributions_normalize() {
        let spec = generate_task(&EnvConfig::default(), &RngStream::new(9)).unwrap();
        let params = init_params(&spec, 2.0, &RngStream::new(9)).unwrap();
        for x in 0..8u32 {
            let d = good_thinking_count_distribution(&params, &spec, InstructionId(x));
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for b in 0..4 {
                let j = answer_count_distribution(&params, &spec, InstructionId(x), b);
                let s: f64 = j.iter().flatten().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
