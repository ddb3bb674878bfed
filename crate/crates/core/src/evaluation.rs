//! Cross-generation evaluation: pair the thinking of one policy with the
//! answering of another, and compare configurations pairwise.
//!
//! Every evaluated pair `i` draws from `rng/"pair"/i`, whatever the thinker
//! and answerer are. Two configurations evaluated from the same root stream
//! therefore see the same instruction, the same uniforms and the same reward
//! noise on pair `i` (common random numbers).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::TaskSpec;
use crate::error::{LabError, Result};
use crate::policy::{sample_answer_given, sample_thinking, PolicyParams};
use crate::rng::RngStream;
use crate::types::{mean_and_pop_std, to_csv, InstructionId, Rollout, Trace};

/// Thinking from `thinker` (stream `rng/"thinking"`), answer from `answerer`
/// given the realized bucket. With `thinker == answerer` this is exactly
/// [`crate::policy::sample_trace`] on the same stream.
pub fn cross_generate(
    thinker: &PolicyParams,
    answerer: &PolicyParams,
    spec: &TaskSpec,
    x: InstructionId,
    rng: &RngStream,
) -> Result<Trace> {
    answerer.check_shape(spec)?;
    let thinking = sample_thinking(thinker, spec, x, &rng.derive("thinking"))?;
    let bucket = spec.bucket_for_count(spec.good_thinking_count(x, &thinking.tokens));
    let answer = sample_answer_given(answerer, spec, x, bucket, rng)?;
    Ok(Trace {
        thinking: thinking.tokens,
        answer: answer.tokens,
    })
}

/// Instruction for evaluation pair `i`.
pub fn pair_instruction(spec: &TaskSpec, i: usize) -> InstructionId {
    InstructionId((i % spec.instruction_count) as u32)
}

/// `n` paired rollouts of the `(thinker, answerer)` configuration.
pub fn paired_rollouts(
    thinker: &PolicyParams,
    answerer: &PolicyParams,
    spec: &TaskSpec,
    n: usize,
    rng: &RngStream,
) -> Result<Vec<Rollout>> {
    thinker.check_shape(spec)?;
    answerer.check_shape(spec)?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let stream = rng.derive("pair").derive(i);
            let x = pair_instruction(spec, i);
            let trace = cross_generate(thinker, answerer, spec, x, &stream)?;
            let reward = spec.reward(x, &trace, &stream.derive("noise"))?;
            Ok(Rollout {
                instruction: x,
                trace,
                reward,
                token_logprobs: Vec::new(),
            })
        })
        .collect()
}

pub fn paired_rewards(
    thinker: &PolicyParams,
    answerer: &PolicyParams,
    spec: &TaskSpec,
    n: usize,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    Ok(paired_rollouts(thinker, answerer, spec, n, rng)?
        .into_iter()
        .map(|r| r.reward)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XGenCell {
    pub thinker_id: String,
    pub answerer_id: String,
    pub mean_reward: f64,
    /// Sample standard deviation (divisor `n - 1`) over `sqrt(n)`; 0 when `n == 1`.
    pub stderr: f64,
    pub n: usize,
}

impl XGenCell {
    pub fn from_rewards(thinker_id: &str, answerer_id: &str, rewards: &[f64]) -> Result<Self> {
        let n = rewards.len();
        if n == 0 {
            return Err(LabError::Invalid("evaluation needs at least one sample".into()));
        }
        let (mean, pop_std) = mean_and_pop_std(rewards);
        let stderr = if n > 1 {
            let sample_var = pop_std * pop_std * n as f64 / (n - 1) as f64;
            (sample_var / n as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            thinker_id: thinker_id.to_owned(),
            answerer_id: answerer_id.to_owned(),
            mean_reward: mean,
            stderr,
            n,
        })
    }
}

/// Mean reward of `n` paired cross-generated traces.
pub fn eval_config(
    thinker: (&str, &PolicyParams),
    answerer: (&str, &PolicyParams),
    spec: &TaskSpec,
    n: usize,
    rng: &RngStream,
) -> Result<XGenCell> {
    let rewards = paired_rewards(thinker.1, answerer.1, spec, n, rng)?;
    XGenCell::from_rewards(thinker.0, answerer.0, &rewards)
}

/// One cell per (thinker, answerer) pair, row-major by thinker. All cells
/// share the pair streams, so a cell does not depend on list order.
pub fn xgen_grid(
    checkpoints: &[(String, PolicyParams)],
    spec: &TaskSpec,
    n: usize,
    rng: &RngStream,
) -> Result<Vec<Vec<XGenCell>>> {
    if checkpoints.len() < 2 {
        return Err(LabError::Invalid(format!(
            "cross-generation grid needs at least 2 checkpoints, got {}",
            checkpoints.len()
        )));
    }
    checkpoints
        .iter()
        .map(|(tid, t)| {
            checkpoints
                .iter()
                .map(|(aid, a)| eval_config((tid, t), (aid, a), spec, n, rng))
                .collect()
        })
        .collect()
}

pub const GRID_HEADER: [&str; 5] = ["thinker_id", "answerer_id", "mean_reward", "stderr", "n"];

pub fn grid_csv(grid: &[Vec<XGenCell>]) -> String {
    to_csv(&GRID_HEADER, grid.iter().flatten())
}

/// Fraction of pairs where `a` beats `b`, ties counting one half.
pub fn win_rate_rewards(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LabError::LengthMismatch {
            what: "paired rewards",
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.is_empty() {
        return Err(LabError::Invalid("win rate of zero pairs".into()));
    }
    let (mut wins, mut losses) = (0u64, 0u64);
    for (ra, rb) in a.iter().zip(b) {
        if ra > rb {
            wins += 1;
        } else if ra < rb {
            losses += 1;
        }
    }
    let ties = a.len() as u64 - wins - losses;
    let denom = 2.0 * a.len() as f64;
    // Compute the smaller side and complement it, so that
    // win_rate(a, b) + win_rate(b, a) == 1 holds exactly.
    Ok(if wins <= losses {
        (2 * wins + ties) as f64 / denom
    } else {
        1.0 - (2 * losses + ties) as f64 / denom
    })
}

/// [`win_rate_rewards`] on rollouts paired by position; the paired rollouts
/// must answer the same instruction.
pub fn win_rate(a: &[Rollout], b: &[Rollout]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LabError::LengthMismatch {
            what: "paired rollouts",
            expected: a.len(),
            actual: b.len(),
        });
    }
    if let Some(i) = a.iter().zip(b).position(|(ra, rb)| ra.instruction != rb.instruction) {
        return Err(LabError::Invalid(format!(
            "rollout pair {i} answers different instructions"
        )));
    }
    let ra: Vec<f64> = a.iter().map(|r| r.reward).collect();
    let rb: Vec<f64> = b.iter().map(|r| r.reward).collect();
    win_rate_rewards(&ra, &rb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Configuration {
    #[serde(rename = "Base")]
    Base,
    #[serde(rename = "T_post+A_pre")]
    PostThinkingPreAnswer,
    #[serde(rename = "T_pre+A_post")]
    PreThinkingPostAnswer,
    #[serde(rename = "Post-trained")]
    PostTrained,
}

impl Configuration {
    pub const ALL: [Configuration; 4] = [
        Configuration::Base,
        Configuration::PostThinkingPreAnswer,
        Configuration::PreThinkingPostAnswer,
        Configuration::PostTrained,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Configuration::Base => "Base",
            Configuration::PostThinkingPreAnswer => "T_post+A_pre",
            Configuration::PreThinkingPostAnswer => "T_pre+A_post",
            Configuration::PostTrained => "Post-trained",
        }
    }

    /// `(thinker, answerer)` chosen from `(pre, post)`.
    pub fn pick<'a>(self, pre: &'a PolicyParams, post: &'a PolicyParams) -> (&'a PolicyParams, &'a PolicyParams) {
        match self {
            Configuration::Base => (pre, pre),
            Configuration::PostThinkingPreAnswer => (post, pre),
            Configuration::PreThinkingPostAnswer => (pre, post),
            Configuration::PostTrained => (post, post),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationResult {
    pub configuration: Configuration,
    pub reward: f64,
    pub stderr: f64,
    pub delta: f64,
    /// Against Base; absent for Base itself.
    pub win_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagnationReport {
    pub n: usize,
    pub configurations: Vec<ConfigurationResult>,
}

impl StagnationReport {
    pub fn get(&self, c: Configuration) -> &ConfigurationResult {
        self.configurations
            .iter()
            .find(|r| r.configuration == c)
            .expect("report holds all four configurations")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// The four pre/post pairings evaluated on shared pair streams, with
/// rewards, deltas against Base and win rates against Base.
pub fn stagnation_report(
    pre: &PolicyParams,
    post: &PolicyParams,
    spec: &TaskSpec,
    n: usize,
    rng: &RngStream,
) -> Result<StagnationReport> {
    let rollouts: Vec<Vec<Rollout>> = Configuration::ALL
        .iter()
        .map(|c| {
            let (t, a) = c.pick(pre, post);
            paired_rollouts(t, a, spec, n, rng)
        })
        .collect::<Result<_>>()?;
    let base = &rollouts[0];
    let base_cell = XGenCell::from_rewards("pre", "pre", &base.iter().map(|r| r.reward).collect::<Vec<_>>())?;
    let mut configurations = Vec::with_capacity(4);
    for (c, rs) in Configuration::ALL.iter().zip(&rollouts) {
        let rewards: Vec<f64> = rs.iter().map(|r| r.reward).collect();
        let cell = XGenCell::from_rewards("", "", &rewards)?;
        let win_rate = match c {
            Configuration::Base => None,
            _ => Some(win_rate(rs, base)?),
        };
        configurations.push(ConfigurationResult {
            configuration: *c,
            reward: cell.mean_reward,
            stderr: cell.stderr,
            delta: cell.mean_reward - base_cell.mean_reward,
            win_rate,
        });
    }
    Ok(StagnationReport { n, configurations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{expected_reward_oracle, generate_task, EnvConfig};
    use crate::policy::{init_params, sample_trace};
    use proptest::prelude::*;

    fn spec_with(cfg: EnvConfig) -> TaskSpec {
        generate_task(&cfg, &RngStream::new(11)).unwrap()
    }

    fn spec() -> TaskSpec {
        spec_with(EnvConfig::default())
    }

    fn random_policy(spec: &TaskSpec, seed: u64) -> PolicyParams {
        init_params(spec, 1.5, &RngStream::new(seed)).unwrap()
    }

    #[test]
    fn grid_csv_quotes_ids_with_commas() {
        let cell = XGenCell::from_rewards("a,b", "c", &[1.0, 0.0]).unwrap();
        let csv = grid_csv(&[vec![cell]]);
        assert_eq!(
            csv,
            "thinker_id,answerer_id,mean_reward,stderr,n\n\"a,b\",c,0.5,0.5,2\n"
        );
    }

    #[test]
    fn cross_generation_with_one_policy_is_sample_trace() {
        let s = spec();
        let p = random_policy(&s, 3);
        for i in 0..50usize {
            let rng = RngStream::new(9).derive(i);
            let x = pair_instruction(&s, i);
            let a = cross_generate(&p, &p, &s, x, &rng).unwrap();
            let b = sample_trace(&p, &s, x, &rng).unwrap().trace;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn one_hot_policies_are_deterministic() {
        // One instruction: the deterministic reward is then a single value.
        let s = spec_with(EnvConfig {
            noise_sigma: 0.0,
            instruction_count: 1,
            ..EnvConfig::default()
        });
        let mut p = PolicyParams::uniform(PolicyShape::of(&s));
        for v in p.thinking.iter_mut().step_by(s.vocab_size) {
            *v = 60.0;
        }
        for v in p.answer.iter_mut().step_by(s.vocab_size) {
            *v = 60.0;
        }
        let rng = RngStream::new(1);
        let a = cross_generate(&p, &p, &s, InstructionId(0), &rng.derive(0u64)).unwrap();
        let b = cross_generate(&p, &p, &s, InstructionId(0), &rng.derive(1u64)).unwrap();
        assert_eq!(a, b);
        let cell = eval_config(("p", &p), ("p", &p), &s, 64, &rng).unwrap();
        assert_eq!(cell.stderr, 0.0);
    }

    use crate::policy::PolicyShape;

    #[test]
    fn single_sample_has_zero_stderr() {
        let s = spec();
        let p = random_policy(&s, 1);
        let rng = RngStream::new(2);
        let cell = eval_config(("a", &p), ("a", &p), &s, 1, &rng).unwrap();
        let r = paired_rewards(&p, &p, &s, 1, &rng).unwrap();
        assert_eq!(cell.mean_reward, r[0]);
        assert_eq!(cell.stderr, 0.0);
        assert!(XGenCell::from_rewards("a", "b", &[]).is_err());
    }

    #[test]
    fn uniform_pair_matches_closed_form() {
        let s = spec();
        let u = PolicyParams::uniform(PolicyShape::of(&s));
        let cell = eval_config(("u", &u), ("u", &u), &s, 20_000, &RngStream::new(5)).unwrap();
        assert!((cell.mean_reward - 0.203125).abs() <= 4.0 * cell.stderr, "{cell:?}");
    }

    #[test]
    fn thinking_is_irrelevant_without_coupling() {
        let s = spec_with(EnvConfig {
            coupling: 0.0,
            ..EnvConfig::default()
        });
        let u = PolicyParams::uniform(PolicyShape::of(&s));
        let mut trained = random_policy(&s, 8);
        // Bucket-independent answer heads so the thought cannot matter.
        let shape = trained.shape;
        for x in 0..s.instruction_count {
            for b in 1..s.bucket_count {
                for pos in 0..s.answer_len {
                    let row = trained.answer_row(x, 0, pos).to_vec();
                    trained.answer_row_mut(x, b, pos).copy_from_slice(&row);
                }
            }
        }
        assert_eq!(shape, trained.shape);
        let oracle: f64 = (0..s.instruction_count)
            .map(|x| expected_reward_oracle(&trained, &s, InstructionId(x as u32)).unwrap())
            .sum::<f64>()
            / s.instruction_count as f64;
        let cell = eval_config(("u", &u), ("t", &trained), &s, 16_000, &RngStream::new(6)).unwrap();
        assert!(
            (cell.mean_reward - oracle).abs() <= 4.0 * cell.stderr,
            "{} vs {oracle}",
            cell.mean_reward
        );
    }

    #[test]
    fn grid_cells_do_not_depend_on_order() {
        let s = spec();
        let ck = vec![
            ("a".to_owned(), random_policy(&s, 1)),
            ("b".to_owned(), random_policy(&s, 2)),
            ("c".to_owned(), random_policy(&s, 3)),
        ];
        let rng = RngStream::new(4);
        let g1 = xgen_grid(&ck, &s, 200, &rng).unwrap();
        let rev: Vec<_> = ck.iter().rev().cloned().collect();
        let g2 = xgen_grid(&rev, &s, 200, &rng).unwrap();
        for row in &g1 {
            for c in row {
                let other = g2
                    .iter()
                    .flatten()
                    .find(|o| o.thinker_id == c.thinker_id && o.answerer_id == c.answerer_id)
                    .unwrap();
                assert_eq!(c, other);
            }
        }
        assert!(xgen_grid(&ck[..1], &s, 10, &rng).is_err());
        let csv = grid_csv(&g1);
        assert!(csv.starts_with("thinker_id,answerer_id,mean_reward,stderr,n\na,a,"));
        assert_eq!(csv.lines().count(), 10);
    }

    #[test]
    fn identical_checkpoints_give_equal_cells() {
        let s = spec();
        let p = random_policy(&s, 5);
        let ck = vec![("x".to_owned(), p.clone()), ("y".to_owned(), p)];
        let g = xgen_grid(&ck, &s, 300, &RngStream::new(1)).unwrap();
        let first = g[0][0].mean_reward;
        assert!(g.iter().flatten().all(|c| c.mean_reward == first));
    }

    #[test]
    fn win_rate_examples() {
        assert_eq!(win_rate_rewards(&[1.0, 0.0, 0.5], &[0.0, 1.0, 0.5]).unwrap(), 0.5);
        assert_eq!(win_rate_rewards(&[1.0; 4], &[0.0; 4]).unwrap(), 1.0);
        assert_eq!(win_rate_rewards(&[0.3; 4], &[0.3; 4]).unwrap(), 0.5);
        assert!(win_rate_rewards(&[1.0], &[1.0, 2.0]).is_err());
        assert!(win_rate_rewards(&[], &[]).is_err());
    }

    #[test]
    fn win_rate_rejects_unpaired_instructions() {
        let r = |x: u32| Rollout {
            instruction: InstructionId(x),
            trace: Trace {
                thinking: vec![],
                answer: vec![],
            },
            reward: 0.0,
            token_logprobs: vec![],
        };
        assert!(win_rate(&[r(0), r(1)], &[r(0), r(0)]).is_err());
        assert_eq!(win_rate(&[r(0), r(1)], &[r(0), r(1)]).unwrap(), 0.5);
    }

    #[test]
    fn identical_pre_and_post_give_flat_report() {
        let s = spec();
        let p = random_policy(&s, 7);
        let report = stagnation_report(&p, &p, &s, 500, &RngStream::new(3)).unwrap();
        assert_eq!(report.configurations.len(), 4);
        assert!(report.get(Configuration::Base).win_rate.is_none());
        for c in &report.configurations[1..] {
            assert_eq!(c.delta, 0.0);
            assert_eq!(c.win_rate, Some(0.5));
        }
        let json = report.to_json();
        assert!(json.contains("\"T_post+A_pre\""));
    }

    #[test]
    fn grid_base_cell_equals_report_base() {
        let s = spec();
        let (pre, post) = (random_policy(&s, 1), random_policy(&s, 2));
        let rng = RngStream::new(12);
        let report = stagnation_report(&pre, &post, &s, 400, &rng).unwrap();
        let ck = vec![("pre".to_owned(), pre), ("post".to_owned(), post)];
        let grid = xgen_grid(&ck, &s, 400, &rng).unwrap();
        assert_eq!(grid[0][0].mean_reward, report.get(Configuration::Base).reward);
        assert_eq!(
            grid[1][0].mean_reward,
            report.get(Configuration::PostThinkingPreAnswer).reward
        );
        assert_eq!(grid[1][1].mean_reward, report.get(Configuration::PostTrained).reward);
    }

    proptest! {
        #[test]
        fn win_rate_is_antisymmetric(pairs in prop::collection::vec((0u8..4, 0u8..4), 1..60)) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 4.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64 / 4.0).collect();
            let ab = win_rate_rewards(&a, &b).unwrap();
            let ba = win_rate_rewards(&b, &a).unwrap();
            prop_assert_eq!(ab + ba, 1.0);
            prop_assert_eq!(win_rate_rewards(&a, &a).unwrap(), 0.5);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
