//! Attribution of failure cases to an optimization track.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    Rl,
    Pretrain,
    PromptEngineering,
}

/// Signals gathered for one failed generation. Fields are optional so
/// that incomplete evidence is reported instead of defaulted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureEvidence {
    pub prompt: String,
    #[serde(default)]
    pub output: String,
    pub reward_score: Option<f64>,
    /// Retrieval density around the prompt.
    pub nn_density: Option<f64>,
    /// Reward change after rewriting the prompt.
    pub pe_gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureCase {
    pub prompt: String,
    pub output: String,
    pub track: Track,
    pub evidence: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RouterThresholds {
    pub pe_gain: f64,
    pub nn_density: f64,
}

impl Default for RouterThresholds {
    fn default() -> Self {
        Self { pe_gain: 0.1, nn_density: 0.05 }
    }
}

/// Rule cascade: a prompt rewrite that helps means the instruction was
/// misread; a sparse neighbourhood means missing knowledge; anything else
/// goes to reinforcement learning.
pub fn route_failure(ev: &FailureEvidence, th: &RouterThresholds) -> Result<FailureCase> {
    let mut evidence = BTreeMap::new();
    for (name, v) in [("reward_score", ev.reward_score), ("nn_density", ev.nn_density), ("pe_gain", ev.pe_gain)] {
        match v {
            Some(x) if x.is_finite() => {
                evidence.insert(name.to_string(), x);
            }
            Some(x) => return contract_err("route_failure", format!("{name} = {x} is not finite")),
            None => return contract_err("route_failure", format!("missing evidence field `{name}`")),
        }
    }
    let track = if evidence["pe_gain"] > th.pe_gain {
        Track::PromptEngineering
    } else if evidence["nn_density"] < th.nn_density {
        Track::Pretrain
    } else {
        Track::Rl
    };
    Ok(FailureCase { prompt: ev.prompt.clone(), output: ev.output.clone(), track, evidence })
}

/// Writes the pretrain-track cases, one JSON object per line, for review.
pub fn write_review_queue(cases: &[FailureCase], path: &Path) -> Result<usize> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut n = 0;
    for c in cases.iter().filter(|c| c.track == Track::Pretrain) {
        serde_json::to_writer(&mut f, c)?;
        f.write_all(b"\n")?;
        n += 1;
    }
    f.flush()?;
    Ok(n)
}
