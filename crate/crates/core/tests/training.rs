//! End-to-end training behaviour on the synthetic task.

use thinking_lab::diagnostics::rho_distribution;
use thinking_lab::env::{EnvConfig, TaskSpec};
use thinking_lab::evaluation::{stagnation_report, xgen_grid, Configuration};
use thinking_lab::optim::OptimizerConfig;
use thinking_lab::policy::{PolicyParams, PolicyShape};
use thinking_lab::rng::RngStream;
use thinking_lab::trainers::{mean_oracle_reward, run_training, Algorithm, TrainConfig};
use thinking_lab::types::InstructionId;

fn task(coupling: f64, noise_sigma: f64) -> TaskSpec {
    EnvConfig {
        coupling,
        noise_sigma,
        ..EnvConfig::default()
    }
    .build()
    .unwrap()
}

fn all_instructions(spec: &TaskSpec) -> Vec<InstructionId> {
    (0..spec.instruction_count as u32).map(InstructionId).collect()
}

#[test]
fn default_sgd_improves_expected_reward_when_thinking_pays() {
    let spec = task(1.0, 0.0);
    let uniform = mean_oracle_reward(&PolicyParams::uniform(PolicyShape::of(&spec)), &spec).unwrap();
    let cfg = TrainConfig {
        total_steps: 500,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.optimizer, OptimizerConfig::default());
    let run = run_training(&cfg, &spec).unwrap();
    let last = run.log.last().unwrap();
    let tail_mean = run.log[450..].iter().map(|r| r.mean_reward).sum::<f64>() / 50.0;
    let final_oracle = mean_oracle_reward(&run.final_params, &spec).unwrap();
    assert!(final_oracle > uniform, "{final_oracle} vs {uniform}");
    assert!(tail_mean > uniform, "{tail_mean} vs {uniform}");
    assert_eq!(last.step, 500);
}

#[test]
fn every_algorithm_learns_with_adam() {
    let spec = task(0.25, 0.02);
    for algorithm in [Algorithm::Grpo, Algorithm::Dapo, Algorithm::GrpoMa] {
        let cfg = TrainConfig {
            algorithm,
            total_steps: 150,
            optimizer: OptimizerConfig::adam(0.2),
            ..TrainConfig::default()
        };
        let run = run_training(&cfg, &spec).unwrap();
        let first = run.log[0].oracle_reward.unwrap();
        let last = mean_oracle_reward(&run.final_params, &spec).unwrap();
        assert!(last > first + 0.2, "{algorithm:?}: {first} -> {last}");
    }
}

#[test]
fn phase_one_only_moves_thinking_and_answers_agree() {
    let spec = task(0.25, 0.02);
    let cfg = TrainConfig {
        start_enabled: true,
        phase1_steps: 300,
        total_steps: 300,
        optimizer: OptimizerConfig::adam(0.2),
        ..TrainConfig::default()
    };
    let run = run_training(&cfg, &spec).unwrap();
    let pre = run.checkpoints[0].params();
    assert_eq!(pre.answer, run.final_params.answer);
    let report = stagnation_report(&pre, &run.final_params, &spec, 2000, &RngStream::new(1)).unwrap();
    // With the answer head frozen the two configurations are the same policy.
    let thinking_only = report.get(Configuration::PostThinkingPreAnswer);
    let post = report.get(Configuration::PostTrained);
    assert_eq!(thinking_only.reward, post.reward);
    assert_eq!(report.get(Configuration::PreThinkingPostAnswer).delta, 0.0);
}

#[test]
fn trained_pair_dominates_base_pair() {
    let spec = task(1.0, 0.02);
    let cfg = TrainConfig {
        total_steps: 200,
        optimizer: OptimizerConfig::adam(0.2),
        ..TrainConfig::default()
    };
    let run = run_training(&cfg, &spec).unwrap();
    let ck = vec![
        ("base".to_owned(), run.checkpoints[0].params()),
        ("trained".to_owned(), run.final_params.clone()),
    ];
    let grid = xgen_grid(&ck, &spec, 2000, &RngStream::new(8)).unwrap();
    assert!(grid[1][1].mean_reward >= grid[0][0].mean_reward);
    let oracle_trained = mean_oracle_reward(&run.final_params, &spec).unwrap();
    assert!((grid[1][1].mean_reward - oracle_trained).abs() <= 4.0 * grid[1][1].stderr);
}

#[test]
fn ratio_stays_below_one_without_coupling() {
    let spec = task(0.0, 0.02);
    let u = PolicyParams::uniform(PolicyShape::of(&spec));
    let d = rho_distribution(&u, &spec, &all_instructions(&spec), 32, 32, &RngStream::new(4)).unwrap();
    assert!(d.median_rho.unwrap() < 1.0, "{:?}", d.median_rho);
}

#[test]
fn median_ratio_grows_with_coupling() {
    // A fixed mid-training policy from the answer-frozen phase, measured on
    // tasks that differ only in beta. Its answer head is the same in every
    // bucket, so the thought moves the reward only through the coupled term.
    let trained_on = task(0.25, 0.02);
    let cfg = TrainConfig {
        start_enabled: true,
        phase1_steps: 100,
        total_steps: 100,
        optimizer: OptimizerConfig::adam(0.2),
        ..TrainConfig::default()
    };
    let params = run_training(&cfg, &trained_on).unwrap().final_params;
    for seed in 0..3u64 {
        let medians: Vec<f64> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&beta| {
                let spec = task(beta, 0.02);
                assert_eq!(spec.good_thinking, trained_on.good_thinking);
                rho_distribution(&params, &spec, &all_instructions(&spec), 32, 32, &RngStream::new(seed))
                    .unwrap()
                    .median_rho
                    .unwrap()
            })
            .collect();
        assert!(medians.windows(2).all(|w| w[0] <= w[1]), "seed {seed}: {medians:?}");
    }
}
