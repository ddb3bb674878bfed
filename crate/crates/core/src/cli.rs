//! Subcommand implementations. Each command reads a [`RunConfig`], writes its
//! machine-readable outputs plus `manifest_<command>.json` into the output
//! directory, and reports progress on standard error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::diagnostics::rho_distribution;
use crate::env::{expected_reward_oracle, TaskSpec};
use crate::error::LabError;
use crate::evaluation::{grid_csv, stagnation_report, xgen_grid};
use crate::manifest::RunManifest;
use crate::policy::{
    grad_check, grad_check_against, random_gradcheck_case, sample_trace, surrogate_loss_and_grad, PolicyParams,
};
use crate::rng::RngStream;
use crate::trainers::{log_csv, run_training};
use crate::types::{mean_and_pop_std, to_csv, InstructionId};

pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_CHECK: u8 = 4;

/// A failure carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    /// Missing or unreadable inputs are configuration problems, not I/O faults.
    fn input(e: LabError) -> Self {
        Self::new(EXIT_CONFIG, e.to_string())
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        let code = match e {
            LabError::Io { .. } => EXIT_IO,
            LabError::NonFinite(_) => EXIT_NUMERIC,
            _ => EXIT_CONFIG,
        };
        Self::new(code, e.to_string())
    }
}

pub type CliResult = std::result::Result<(), CliError>;

pub fn exit_code(result: CliResult) -> ExitCode {
    match result {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

pub fn load_config(path: &Path, overrides: &[String]) -> std::result::Result<RunConfig, CliError> {
    RunConfig::load(path, overrides).map_err(CliError::input)
}

fn with_workers<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> T + Send) -> std::result::Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::new(EXIT_CONFIG, format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Output directory plus the manifest being filled in for one command.
struct Outputs {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Outputs {
    fn new(command: &str, cfg: &RunConfig) -> std::result::Result<Self, CliError> {
        fs::create_dir_all(&cfg.output_dir).map_err(|e| LabError::io(&cfg.output_dir, e))?;
        Ok(Self {
            dir: cfg.output_dir.clone(),
            manifest: RunManifest::new(command, cfg.seed, cfg.to_json_value()),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> CliResult {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| LabError::io(&path, e))?;
        self.manifest.record_output(&self.dir, name)?;
        Ok(())
    }

    fn finish(self) -> CliResult {
        let name = format!("manifest_{}.json", self.manifest.command);
        self.manifest.write(&self.dir.join(&name))?;
        eprintln!("wrote {}", self.dir.join(name).display());
        Ok(())
    }
}

fn load_checkpoint(path: &Path, spec: &TaskSpec) -> std::result::Result<PolicyParams, CliError> {
    let params = Checkpoint::load(path).map_err(CliError::input)?.params();
    params
        .check_shape(spec)
        .map_err(|e| CliError::new(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
    Ok(params)
}

fn pick_checkpoint(
    arg: Option<&Path>,
    configured: Option<&PathBuf>,
    command: &str,
) -> std::result::Result<PathBuf, CliError> {
    arg.map(Path::to_path_buf)
        .or_else(|| configured.cloned())
        .ok_or_else(|| CliError::new(EXIT_CONFIG, format!("{command} needs a checkpoint")))
}

fn build_task(cfg: &RunConfig) -> std::result::Result<TaskSpec, CliError> {
    cfg.env.build().map_err(CliError::input)
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult {
    let spec = build_task(cfg)?;
    let mut out = Outputs::new("train", cfg)?;
    eprintln!(
        "training {:?} for {} steps (two-phase: {})",
        cfg.train.algorithm, cfg.train.total_steps, cfg.train.start_enabled
    );
    let run = with_workers(cfg, || run_training(&cfg.train, &spec))??;
    out.write("task.json", &spec.to_json())?;
    for ck in &run.checkpoints {
        out.write(&ck.file_name(), &ck.to_json())?;
    }
    out.write("train_log.csv", &log_csv(&run.log))?;
    if let Some(last) = run.log.last() {
        eprintln!(
            "step {}: mean reward {}, expected reward {}",
            last.step,
            last.mean_reward,
            last.oracle_reward.map(|v| v.to_string()).unwrap_or_else(|| "-".into())
        );
    }
    out.manifest.phase_steps = run.phase_steps;
    out.finish()
}

fn checkpoint_ids(paths: &[PathBuf]) -> Vec<String> {
    let mut ids: Vec<String> = Vec::with_capacity(paths.len());
    for p in paths {
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "ckpt".into());
        let mut id = stem.clone();
        let mut k = 1;
        while ids.contains(&id) {
            id = format!("{stem}#{k}");
            k += 1;
        }
        ids.push(id);
    }
    ids
}

pub fn cmd_xgen(cfg: &RunConfig, checkpoints: &[PathBuf]) -> CliResult {
    let paths = if checkpoints.is_empty() {
        cfg.eval.checkpoints.clone()
    } else {
        checkpoints.to_vec()
    };
    if paths.len() < 2 {
        return Err(CliError::new(EXIT_CONFIG, "xgen needs at least 2 checkpoints"));
    }
    let spec = build_task(cfg)?;
    let loaded: Vec<(String, PolicyParams)> = checkpoint_ids(&paths)
        .into_iter()
        .zip(&paths)
        .map(|(id, p)| Ok((id, load_checkpoint(p, &spec)?)))
        .collect::<std::result::Result<_, CliError>>()?;
    let mut out = Outputs::new("xgen", cfg)?;
    let rng = RngStream::new(cfg.seed).derive("xgen");
    let n = cfg.eval.n;
    let grid = with_workers(cfg, || xgen_grid(&loaded, &spec, n, &rng))??;
    out.write("xgen_grid.csv", &grid_csv(&grid))?;
    for c in grid.iter().flatten() {
        eprintln!(
            "{} + {}: {:.4} ± {:.4}",
            c.thinker_id, c.answerer_id, c.mean_reward, c.stderr
        );
    }
    if loaded.len() == 2 {
        let report = with_workers(cfg, || stagnation_report(&loaded[0].1, &loaded[1].1, &spec, n, &rng))??;
        out.write("stagnation.json", &report.to_json())?;
    }
    out.finish()
}

pub fn cmd_couple(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult {
    let path = pick_checkpoint(checkpoint, cfg.diagnostics.checkpoint.as_ref(), "couple")?;
    let spec = build_task(cfg)?;
    let params = load_checkpoint(&path, &spec)?;
    let instructions: Vec<InstructionId> = if cfg.diagnostics.instructions.is_empty() {
        (0..spec.instruction_count as u32).map(InstructionId).collect()
    } else {
        cfg.diagnostics
            .instructions
            .iter()
            .copied()
            .map(InstructionId)
            .collect()
    };
    let mut out = Outputs::new("couple", cfg)?;
    let rng = RngStream::new(cfg.seed).derive("couple");
    let (m, n) = (cfg.diagnostics.m, cfg.diagnostics.n);
    let dist = with_workers(cfg, || rho_distribution(&params, &spec, &instructions, m, n, &rng))??;
    out.write("coupling.csv", &dist.coupling_csv())?;
    out.write("coupling_hist.csv", &dist.histogram_csv())?;
    eprintln!(
        "median ratio {} over {} instructions ({} undefined)",
        dist.median_rho
            .map(|v| v.to_string())
            .unwrap_or_else(|| "undefined".into()),
        instructions.len(),
        dist.undefined_count
    );
    out.finish()
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> CliResult {
    let gc = &cfg.gradcheck;
    let mut out = Outputs::new("gradcheck", cfg)?;
    if gc.cases == 0 {
        eprintln!("warning: gradcheck.cases = 0, nothing was checked");
    }
    let rng = RngStream::new(cfg.seed).derive("gradcheck");
    let errors: Vec<f64> = with_workers(cfg, || {
        (0..gc.cases)
            .into_par_iter()
            .map(|r| {
                let case = random_gradcheck_case(&rng.derive(r))?;
                if gc.inject_fault {
                    let (_, mut g) =
                        surrogate_loss_and_grad(&case.params, &case.spec, &case.batch, &case.clip, &case.kl)?;
                    g.thinking[0] += 1e-3;
                    grad_check_against(
                        &case.params,
                        &case.spec,
                        &case.batch,
                        &case.clip,
                        &case.kl,
                        gc.fd_step,
                        &g,
                    )
                } else {
                    grad_check(&case.params, &case.spec, &case.batch, &case.clip, &case.kl, gc.fd_step)
                }
            })
            .collect::<crate::Result<Vec<f64>>>()
    })??;
    out.write(
        "gradcheck.csv",
        &to_csv(&["case", "max_rel_error"], errors.iter().enumerate()),
    )?;
    let worst = errors.iter().copied().fold(0.0, f64::max);
    eprintln!(
        "max relative error {worst:e} over {} cases (tolerance {:e})",
        errors.len(),
        gc.tolerance
    );
    out.finish()?;
    if errors.iter().any(|e| !(*e <= gc.tolerance)) {
        return Err(CliError::new(
            EXIT_CHECK,
            format!("gradient check failed: {worst:e} > {:e}", gc.tolerance),
        ));
    }
    Ok(())
}

/// Absolute slack on the oracle comparison, covering summation rounding when
/// every sampled reward is identical and the standard error is 0.
pub const ORACLE_SLACK: f64 = 1e-9;

pub fn cmd_oracle(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult {
    let path = pick_checkpoint(checkpoint, cfg.oracle.checkpoint.as_ref(), "oracle")?;
    let spec = build_task(cfg)?;
    let params = load_checkpoint(&path, &spec)?;
    let mut out = Outputs::new("oracle", cfg)?;
    let rng = RngStream::new(cfg.seed).derive("oracle");
    let n = cfg.oracle.n;
    let rows = with_workers(cfg, || {
        (0..spec.instruction_count)
            .into_par_iter()
            .map(|x| {
                let x = InstructionId(x as u32);
                let exact = expected_reward_oracle(&params, &spec, x)?;
                let base = rng.derive(x.index());
                let rewards: Vec<f64> = (0..n)
                    .map(|i| {
                        let s = base.derive(i);
                        let t = sample_trace(&params, &spec, x, &s)?;
                        spec.reward(x, &t.trace, &s.derive("noise"))
                    })
                    .collect::<crate::Result<_>>()?;
                let (mean, sd) = mean_and_pop_std(&rewards);
                let stderr = if n > 1 {
                    sd * (n as f64 / (n - 1) as f64).sqrt() / (n as f64).sqrt()
                } else {
                    0.0
                };
                Ok((x, exact, mean, stderr))
            })
            .collect::<crate::Result<Vec<_>>>()
    })??;
    let mut records = Vec::with_capacity(rows.len());
    for &(x, exact, mean, stderr) in &rows {
        let agree = (exact - mean).abs() <= 4.0 * stderr + ORACLE_SLACK;
        records.push((x.0, exact, mean, stderr, n, agree));
        eprintln!(
            "instruction {}: oracle {exact:.6}, monte carlo {mean:.6} ± {stderr:.6}",
            x.0
        );
    }
    let all_agree = records.iter().all(|r| r.5);
    let header = ["instruction", "oracle", "mc_mean", "mc_stderr", "n", "agree"];
    out.write("oracle.csv", &to_csv(&header, &records))?;
    out.finish()?;
    if !all_agree {
        return Err(CliError::new(
            EXIT_CHECK,
            "oracle and Monte Carlo estimates disagree beyond 4 standard errors",
        ));
    }
    Ok(())
}
