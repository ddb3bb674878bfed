//! GRPO, DAPO and multi-answer GRPO training, with the optional two-phase
//! schedule whose first phase masks answer tokens out of the gradient.

mod advantages;

pub use advantages::{
    advantages_grpo_ma, dapo_filter_groups, group_advantages_grpo, start_mask, MultiAnswerAdvantages, Phase,
};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::env::{expected_reward_oracle, QualityBreakdown, TaskSpec};
use crate::error::{LabError, Result};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::policy::{
    init_params, join_segments, log_prob, sample_answer_given, sample_thinking, sample_trace, surrogate_loss_and_grad,
    Aggregation, ClipConfig, KlConfig, PolicyParams, SampledTrace, SurrogateSample,
};
use crate::rng::RngStream;
use crate::types::{to_csv, InstructionId, Rollout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Grpo,
    Dapo,
    GrpoMa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub start_enabled: bool,
    pub phase1_steps: usize,
    pub total_steps: usize,
    pub prompts_per_batch: usize,
    pub group_size: usize,
    pub ma_thoughts: usize,
    pub ma_answers: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    /// Algorithm default when absent.
    pub clip: Option<ClipConfig>,
    /// Algorithm default when absent.
    pub kl: Option<KlConfig>,
    pub std_eps: f64,
    pub group_filter: bool,
    pub init_scale: f64,
    /// Log the exact expected reward every step.
    pub log_oracle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Grpo,
            start_enabled: false,
            phase1_steps: 600,
            total_steps: 1200,
            prompts_per_batch: 8,
            group_size: 6,
            ma_thoughts: 2,
            ma_answers: 3,
            epochs: 1,
            optimizer: OptimizerConfig::default(),
            clip: None,
            kl: None,
            std_eps: 1e-8,
            group_filter: false,
            init_scale: 0.0,
            log_oracle: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn clip_config(&self) -> ClipConfig {
        self.clip.unwrap_or(match self.algorithm {
            Algorithm::Dapo => ClipConfig {
                eps_low: 0.20,
                eps_high: 0.28,
                aggregation: Aggregation::TokenMean,
            },
            Algorithm::Grpo | Algorithm::GrpoMa => ClipConfig::symmetric(0.2),
        })
    }

    pub fn kl_config(&self) -> KlConfig {
        self.kl.unwrap_or(match self.algorithm {
            Algorithm::Dapo => KlConfig::disabled(),
            Algorithm::Grpo | Algorithm::GrpoMa => KlConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        if self.prompts_per_batch == 0 {
            return bad("prompts_per_batch must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        match self.algorithm {
            Algorithm::GrpoMa => {
                if self.ma_thoughts < 2 || self.ma_answers < 1 {
                    return bad("grpo_ma needs ma_thoughts >= 2 and ma_answers >= 1".into());
                }
                if self.ma_thoughts * self.ma_answers != self.group_size {
                    return bad(format!(
                        "grpo_ma needs ma_thoughts * ma_answers == group_size ({} * {} != {})",
                        self.ma_thoughts, self.ma_answers, self.group_size
                    ));
                }
            }
            Algorithm::Grpo | Algorithm::Dapo => {
                if self.group_size < 2 {
                    return bad("group_size must be >= 2".into());
                }
            }
        }
        if self.start_enabled && self.phase1_steps > self.total_steps {
            return bad(format!(
                "phase1_steps = {} exceeds total_steps = {}",
                self.phase1_steps, self.total_steps
            ));
        }
        if !(self.std_eps >= 0.0 && self.std_eps.is_finite()) {
            return bad("std_eps must be finite and >= 0".into());
        }
        if let Some(kl) = &self.kl {
            if !(kl.coefficient >= 0.0) {
                return bad("kl coefficient must be >= 0".into());
            }
        }
        self.clip_config().validate()?;
        self.optimizer.validate()
    }

    /// Phase of the 0-based step `step`.
    pub fn phase_at(&self, step: usize) -> Phase {
        match (self.start_enabled, step < self.phase1_steps) {
            (false, _) => Phase::Joint,
            (true, true) => Phase::One,
            (true, false) => Phase::Two,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub phase: Phase,
    pub mean_reward: f64,
    pub oracle_reward: Option<f64>,
    #[serde(rename = "mean_q_T")]
    pub mean_q_t: f64,
    pub mean_style: f64,
    pub grad_norm: f64,
}

pub const TRAIN_LOG_HEADER: [&str; 7] = [
    "step",
    "phase",
    "mean_reward",
    "oracle_reward",
    "mean_q_T",
    "mean_style",
    "grad_norm",
];

pub fn log_csv(rows: &[TrainLogRow]) -> String {
    to_csv(&TRAIN_LOG_HEADER, rows)
}

/// Rollouts sampled for one prompt.
#[derive(Clone, Debug)]
struct Group {
    rollouts: Vec<Rollout>,
    scores: Vec<QualityBreakdown>,
    /// `Some((K, M))` for multi-answer groups, rollouts stored thought-major.
    nested: Option<(usize, usize)>,
}

impl Group {
    fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }
}

fn scored(
    spec: &TaskSpec,
    x: InstructionId,
    s: SampledTrace,
    noise: &RngStream,
) -> Result<(Rollout, QualityBreakdown)> {
    let q = spec.score(x, &s.trace, noise)?;
    Ok((
        Rollout {
            instruction: x,
            trace: s.trace,
            reward: q.reward,
            token_logprobs: s.token_logprobs,
        },
        q,
    ))
}

/// Mean exact expected reward over all instructions.
pub fn mean_oracle_reward(params: &PolicyParams, spec: &TaskSpec) -> Result<f64> {
    let mut total = 0.0;
    for x in 0..spec.instruction_count {
        total += expected_reward_oracle(params, spec, InstructionId(x as u32))?;
    }
    Ok(total / spec.instruction_count as f64)
}

/// Training state: current and reference parameters plus optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    spec: TaskSpec,
    cfg: TrainConfig,
    params: PolicyParams,
    reference: PolicyParams,
    optimizer: Optimizer,
    steps_done: usize,
    root: RngStream,
}

impl Trainer {
    /// Starts from `init_params(spec, cfg.init_scale)` drawn from the config seed.
    pub fn new(spec: TaskSpec, cfg: TrainConfig) -> Result<Self> {
        let root = RngStream::new(cfg.seed);
        let params = init_params(&spec, cfg.init_scale, &root.derive("init"))?;
        Self::with_params(spec, cfg, params)
    }

    pub fn with_params(spec: TaskSpec, cfg: TrainConfig, params: PolicyParams) -> Result<Self> {
        cfg.validate()?;
        params.check_shape(&spec)?;
        let root = RngStream::new(cfg.seed);
        Ok(Self {
            optimizer: Optimizer::new(cfg.optimizer),
            reference: params.clone(),
            params,
            spec,
            cfg,
            steps_done: 0,
            root,
        })
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn into_params(self) -> PolicyParams {
        self.params
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    fn sample_group(&self, step_rng: &RngStream, prompt: usize) -> Result<Group> {
        let spec = &self.spec;
        let x =
            InstructionId(((self.steps_done * self.cfg.prompts_per_batch + prompt) % spec.instruction_count) as u32);
        let base = step_rng.derive("prompt").derive(prompt);
        let mut rollouts = Vec::with_capacity(self.cfg.group_size);
        let mut scores = Vec::with_capacity(self.cfg.group_size);
        let nested = match self.cfg.algorithm {
            Algorithm::Grpo | Algorithm::Dapo => {
                for g in 0..self.cfg.group_size {
                    let stream = base.derive(g);
                    let sampled = sample_trace(&self.params, spec, x, &stream)?;
                    let (r, q) = scored(spec, x, sampled, &stream.derive("noise"))?;
                    rollouts.push(r);
                    scores.push(q);
                }
                None
            }
            Algorithm::GrpoMa => {
                let (k, m) = (self.cfg.ma_thoughts, self.cfg.ma_answers);
                for j in 0..k {
                    let thought = base.derive("thought").derive(j);
                    let thinking = sample_thinking(&self.params, spec, x, &thought.derive("thinking"))?;
                    let bucket = spec.bucket_for_count(spec.good_thinking_count(x, &thinking.tokens));
                    for a in 0..m {
                        let stream = thought.derive(a);
                        let answer = sample_answer_given(&self.params, spec, x, bucket, &stream)?;
                        let sampled = join_segments(thinking.clone(), answer, bucket);
                        let (r, q) = scored(spec, x, sampled, &stream.derive("noise"))?;
                        rollouts.push(r);
                        scores.push(q);
                    }
                }
                Some((k, m))
            }
        };
        Ok(Group {
            rollouts,
            scores,
            nested,
        })
    }

    fn token_advantages(&self, group: &Group) -> Result<Vec<Vec<f64>>> {
        let lt = self.spec.thinking_len;
        let la = self.spec.answer_len;
        let eps = self.cfg.std_eps;
        match group.nested {
            None => Ok(group_advantages_grpo(&group.rewards(), eps)
                .into_iter()
                .map(|a| vec![a; lt + la])
                .collect()),
            Some((k, m)) => {
                let rewards = group.rewards();
                let matrix: Vec<Vec<f64>> = rewards.chunks(m).map(<[f64]>::to_vec).collect();
                debug_assert_eq!(matrix.len(), k);
                let adv = advantages_grpo_ma(&matrix, eps)?;
                let mut out = Vec::with_capacity(k * m);
                for j in 0..k {
                    for a in 0..m {
                        let mut row = vec![adv.thinking[j]; lt];
                        row.extend(std::iter::repeat_n(adv.answer[j][a], la));
                        out.push(row);
                    }
                }
                Ok(out)
            }
        }
    }

    /// One sampling + optimization step in `phase`.
    pub fn train_step(&mut self, phase: Phase) -> Result<TrainLogRow> {
        let step_rng = self.root.derive("step").derive(self.steps_done);
        let oracle_reward = if self.cfg.log_oracle {
            Some(mean_oracle_reward(&self.params, &self.spec)?)
        } else {
            None
        };

        let groups: Vec<Group> = (0..self.cfg.prompts_per_batch)
            .into_par_iter()
            .map(|p| self.sample_group(&step_rng, p))
            .collect::<Result<_>>()?;

        let all: Vec<&QualityBreakdown> = groups.iter().flat_map(|g| g.scores.iter()).collect();
        let n = all.len() as f64;
        let mean_reward = all.iter().map(|q| q.reward).sum::<f64>() / n;
        let mean_q_t = all.iter().map(|q| q.thinking_quality).sum::<f64>() / n;
        let mean_style = all.iter().map(|q| q.style).sum::<f64>() / n;

        let groups = dapo_filter_groups(groups, self.cfg.group_filter, Group::rewards);

        let mask = if self.cfg.start_enabled {
            start_mask(self.spec.thinking_len, self.spec.answer_len, phase)
        } else {
            start_mask(self.spec.thinking_len, self.spec.answer_len, Phase::Joint)
        };
        let kl = self.cfg.kl_config();
        let clip = self.cfg.clip_config();

        let mut batch = Vec::with_capacity(groups.len() * self.cfg.group_size);
        for group in &groups {
            let advantages = self.token_advantages(group)?;
            for (rollout, adv) in group.rollouts.iter().zip(advantages) {
                let ref_logprobs = if kl.enabled {
                    Some(log_prob(
                        &self.reference,
                        &self.spec,
                        rollout.instruction,
                        &rollout.trace,
                    )?)
                } else {
                    None
                };
                batch.push(SurrogateSample {
                    old_logprobs: rollout.token_logprobs.clone(),
                    rollout: rollout.clone(),
                    ref_logprobs,
                    advantages: adv,
                    mask: mask.clone(),
                });
            }
        }

        let mut grad_norm = 0.0;
        for epoch in 0..self.cfg.epochs {
            let (loss, grad) = surrogate_loss_and_grad(&self.params, &self.spec, &batch, &clip, &kl)?;
            if !loss.is_finite() {
                return Err(LabError::NonFinite("surrogate loss".into()));
            }
            if epoch == 0 {
                grad_norm = grad.norm();
            }
            self.optimizer.step(&mut self.params, &grad)?;
        }
        if !self.params.is_finite() {
            return Err(LabError::NonFinite("parameters after update".into()));
        }
        self.steps_done += 1;
        Ok(TrainLogRow {
            step: self.steps_done,
            phase,
            mean_reward,
            oracle_reward,
            mean_q_t,
            mean_style,
            grad_norm,
        })
    }
}

/// Everything produced by [`run_training`].
#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<TrainLogRow>,
    /// Step counts per phase label (`phase1`, `phase2`, `joint`).
    pub phase_steps: BTreeMap<String, u64>,
    pub final_params: PolicyParams,
}

/// Phase I for `phase1_steps` then phase II when the two-phase schedule is
/// on, otherwise joint training. Checkpoints: initial, each phase boundary,
/// and the end (deduplicated by step).
pub fn run_training(cfg: &TrainConfig, spec: &TaskSpec) -> Result<TrainingRun> {
    let mut trainer = Trainer::new(spec.clone(), cfg.clone())?;
    run_with_trainer(&mut trainer)
}

pub fn run_with_trainer(trainer: &mut Trainer) -> Result<TrainingRun> {
    let cfg = trainer.cfg.clone();
    let mut checkpoints = vec![Checkpoint::new(0, "init", trainer.params())];
    let mut log = Vec::with_capacity(cfg.total_steps);
    let mut phase_steps = BTreeMap::new();
    for step in 0..cfg.total_steps {
        let phase = cfg.phase_at(step);
        log.push(trainer.train_step(phase)?);
        *phase_steps.entry(phase.file_label().to_owned()).or_insert(0) += 1;
        let boundary = step + 1 == cfg.total_steps || cfg.phase_at(step + 1) != phase;
        if boundary {
            checkpoints.push(Checkpoint::new(step + 1, phase.file_label(), trainer.params()));
        }
    }
    Ok(TrainingRun {
        checkpoints,
        log,
        phase_steps,
        final_params: trainer.params().clone(),
    })
}
