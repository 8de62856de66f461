use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed vocabulary of timed stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ModelLoading,
    AllLoraLoading,
    LoraLoading,
    LoraMerge,
    LoraActivation,
    QueryEmbedding,
    IndexSearch,
    Tokenization,
    Inference,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::ModelLoading,
        Stage::AllLoraLoading,
        Stage::LoraLoading,
        Stage::LoraMerge,
        Stage::LoraActivation,
        Stage::QueryEmbedding,
        Stage::IndexSearch,
        Stage::Tokenization,
        Stage::Inference,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::ModelLoading => "model_loading",
            Stage::AllLoraLoading => "all_lora_loading",
            Stage::LoraLoading => "lora_loading",
            Stage::LoraMerge => "lora_merge",
            Stage::LoraActivation => "lora_activation",
            Stage::QueryEmbedding => "query_embedding",
            Stage::IndexSearch => "index_search",
            Stage::Tokenization => "tokenization",
            Stage::Inference => "inference",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage {s:?}")))
    }
}

/// Runs `f` between two clock reads and returns its result with the
/// elapsed milliseconds.
pub fn timed<R>(f: impl FnOnce() -> Result<R>) -> Result<(R, f64)> {
    let start = Instant::now();
    let out = f()?;
    let end = Instant::now();
    let elapsed = end
        .checked_duration_since(start)
        .ok_or(Error::ClockFault("monotonic clock went backwards"))?;
    Ok((out, elapsed.as_secs_f64() * 1e3))
}

/// Ordered (stage, ms) list.
pub type StageTimes = Vec<(Stage, f64)>;

pub(crate) fn add_to(totals: &mut BTreeMap<Stage, f64>, times: &StageTimes) {
    for &(stage, ms) in times {
        *totals.entry(stage).or_insert(0.0) += ms;
    }
}
