//! Declarative run configuration, read from one TOML file.
//!
//! Every key is optional; missing keys take the defaults below and unknown
//! keys are rejected. Individual keys can be overridden from the command line
//! with `section.key=value` strings, where `value` is a TOML value (bare
//! words are taken as strings).
//!
//! ```toml
//! output_dir = "runs/demo"   # overridden by THINKING_LAB_OUTPUT_DIR
//! seed = 0                   # evaluation, diagnostics, oracle and gradcheck streams
//! workers = 1                # worker threads; never changes results
//!
//! [env]                      # task geometry and reward; env.seed draws the task
//! coupling = 0.25
//!
//! [train]                    # train.seed drives initialization and rollouts
//! algorithm = "grpo"         # grpo | dapo | grpo_ma
//! start_enabled = false
//! total_steps = 1200
//! optimizer = { kind = "adam", lr = 0.2 }
//!
//! [eval]
//! n = 2000
//! checkpoints = []
//!
//! [diagnostics]
//! m = 8
//! n = 8
//! instructions = []          # empty means every instruction
//!
//! [oracle]
//! n = 100000
//!
//! [gradcheck]
//! cases = 100
//! fd_step = 1e-5
//! tolerance = 1e-5
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::error::{LabError, Result};
use crate::trainers::TrainConfig;

pub const OUTPUT_DIR_ENV: &str = "THINKING_LAB_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Paired traces per configuration.
    pub n: usize,
    pub checkpoints: Vec<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            checkpoints: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub m: usize,
    pub n: usize,
    pub instructions: Vec<u32>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            m: 8,
            n: 8,
            instructions: Vec::new(),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Monte Carlo samples per instruction.
    pub n: usize,
    pub checkpoint: Option<PathBuf>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            n: 100_000,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub cases: usize,
    pub fd_step: f64,
    pub tolerance: f64,
    /// Test hook: perturb one analytic gradient entry before comparing.
    pub inject_fault: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            cases: 100,
            fd_step: 1e-5,
            tolerance: 1e-5,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub diagnostics: DiagnosticsConfig,
    pub oracle: OracleConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            seed: 0,
            workers: 1,
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            oracle: OracleConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| LabError::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(LabError::Config(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry((*p).to_owned())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| LabError::Config(format!("override key `{key}`: `{p}` is not a table")))?;
    }
    cur.insert((*last).to_owned(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parse TOML text, apply `key=value` overrides, then validate.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Read `path`, apply overrides and the output directory environment variable.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut cfg = Self::from_toml_with(&text, overrides).map_err(|e| match e {
            LabError::Config(m) => LabError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(LabError::Config("workers must be >= 1".into()));
        }
        self.env.validate()?;
        self.train.validate()?;
        if self.eval.n == 0 || self.oracle.n == 0 {
            return Err(LabError::Config("eval.n and oracle.n must be >= 1".into()));
        }
        if self.diagnostics.m < 2 || self.diagnostics.n < 2 {
            return Err(LabError::Config("diagnostics.m and diagnostics.n must be >= 2".into()));
        }
        if let Some(&x) = self
            .diagnostics
            .instructions
            .iter()
            .find(|&&x| x as usize >= self.env.instruction_count)
        {
            return Err(LabError::Config(format!(
                "diagnostics.instructions: {x} is not below env.instruction_count = {}",
                self.env.instruction_count
            )));
        }
        if !(self.gradcheck.fd_step > 0.0 && self.gradcheck.tolerance >= 0.0) {
            return Err(LabError::Config(
                "gradcheck.fd_step must be > 0 and tolerance >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
