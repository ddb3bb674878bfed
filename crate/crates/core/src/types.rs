use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstructionId(pub u32);

impl InstructionId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for InstructionId {
    fn from(x: usize) -> Self {
        InstructionId(x as u32)
    }
}

/// A complete generated sequence `[thinking, answer]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub thinking: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.thinking.len() + self.answer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.thinking.iter().chain(self.answer.iter()).copied()
    }
}

/// A sampled trace with its per-token sampling log-probabilities and reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub instruction: InstructionId,
    pub trace: Trace,
    pub reward: f64,
    pub token_logprobs: Vec<f64>,
}

impl Rollout {
    pub fn validate(&self) -> Result<()> {
        if self.token_logprobs.len() != self.trace.len() {
            return Err(LabError::LengthMismatch {
                what: "rollout token_logprobs",
                expected: self.trace.len(),
                actual: self.token_logprobs.len(),
            });
        }
        if let Some(lp) = self.token_logprobs.iter().find(|lp| !(**lp <= 0.0)) {
            return Err(LabError::Invalid(format!("log-probability {lp} is not <= 0")));
        }
        if !self.reward.is_finite() {
            return Err(LabError::NonFinite("rollout reward".into()));
        }
        Ok(())
    }
}

/// Header plus one CSV record per row, LF line endings. Floats use the
/// shortest representation that parses back to the same value.
pub(crate) fn to_csv<T: Serialize>(header: &[&str], rows: impl IntoIterator<Item = T>) -> String {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory CSV write");
    for row in rows {
        w.serialize(row).expect("in-memory CSV write");
    }
    String::from_utf8(w.into_inner().expect("in-memory CSV flush")).expect("CSV output is UTF-8")
}

/// Sum and mean of a slice, plus population standard deviation.
pub(crate) fn mean_and_pop_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
