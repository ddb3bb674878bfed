//! Versioned JSON checkpoints of [`PolicyParams`].
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! rounding, so save/load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::policy::{PolicyParams, PolicyShape};

pub const CHECKPOINT_FORMAT: &str = "thinking-lab/policy";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: usize,
    pub phase: String,
    pub shape: PolicyShape,
    pub thinking: Vec<f64>,
    pub answer: Vec<f64>,
}

impl Checkpoint {
    pub fn new(step: usize, phase: &str, params: &PolicyParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_owned(),
            version: CHECKPOINT_VERSION,
            step,
            phase: phase.to_owned(),
            shape: params.shape,
            thinking: params.thinking.clone(),
            answer: params.answer.clone(),
        }
    }

    pub fn file_name(&self) -> String {
        format!("ckpt_step{:06}_{}.json", self.step, self.phase)
    }

    pub fn params(&self) -> PolicyParams {
        PolicyParams {
            shape: self.shape,
            thinking: self.thinking.clone(),
            answer: self.answer.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint format {} v{}", ck.format, ck.version));
        }
        if ck.thinking.len() != ck.shape.thinking_size() || ck.answer.len() != ck.shape.answer_size() {
            return Err("tensor lengths do not match the shape header".into());
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json(&text).map_err(|message| LabError::Parse {
            path: path.to_owned(),
            message,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape() -> PolicyShape {
        PolicyShape {
            instruction_count: 2,
            thinking_len: 2,
            answer_len: 1,
            bucket_count: 2,
            vocab_size: 3,
        }
    }

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(
            thinking in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 12),
            answer in prop::collection::vec(-1e6f64..1e6, 12),
        ) {
            let params = PolicyParams { shape: shape(), thinking, answer };
            let ck = Checkpoint::new(7, "joint", &params);
            let back = Checkpoint::from_json(&ck.to_json()).unwrap().params();
            for (a, b) in back.thinking.iter().chain(&back.answer).zip(params.thinking.iter().chain(&params.answer)) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rejects_inconsistent_header() {
        let params = PolicyParams::uniform(shape());
        let mut ck = Checkpoint::new(0, "init", &params);
        ck.answer.pop();
        assert!(Checkpoint::from_json(&ck.to_json()).is_err());
        assert_eq!(
            Checkpoint::new(12, "phase1", &params).file_name(),
            "ckpt_step000012_phase1.json"
        );
    }
}
