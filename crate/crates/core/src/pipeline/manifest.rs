use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::tables::{self, file_sha256};
use crate::backend::BackendDescriptor;
use crate::error::{Error, Result};

/// Pipeline stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Search,
    Interference,
    SampleGrid,
    Trials,
    Segment,
    Analyze,
    Plots,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Search,
        Stage::Interference,
        Stage::SampleGrid,
        Stage::Trials,
        Stage::Segment,
        Stage::Analyze,
        Stage::Plots,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Search => "search",
            Stage::Interference => "interference",
            Stage::SampleGrid => "sample-grid",
            Stage::Trials => "trials",
            Stage::Segment => "segment",
            Stage::Analyze => "analyze",
            Stage::Plots => "plots",
        }
    }

    /// Files (relative to the run directory) whose content the stage reads.
    pub fn inputs(self) -> &'static [&'static str] {
        use tables::*;
        match self {
            Stage::Search => &[],
            Stage::Interference => &[STIMULI],
            Stage::SampleGrid => &[STIMULI, INTERFERENCE, POOL, LEVELS],
            Stage::Trials => &[STIMULI, INTERFERENCE, STIMULI_EXTENDED],
            Stage::Segment => &[TRACES],
            Stage::Analyze => &[TRACES, SEGMENTATION, LEVELS],
            Stage::Plots => &[ACCURACY, GROUP_PHASE_STATS, BREAKDOWN, GRID_FILL, INTERFERENCE, POOL],
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
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    /// Turned off by the config; no outputs.
    Disabled,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
}

impl From<&Error> for ErrorRecord {
    fn from(e: &Error) -> Self {
        Self {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    /// Hash of the stage's config slice and input file contents.
    pub fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub started_at: String,
    pub finished_at: String,
    /// Output path (relative to the run directory) to SHA-256.
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorRecord>,
}

impl StageRecord {
    /// Completed with the same fingerprint and every output still on disk
    /// with its recorded hash.
    pub fn reusable(&self, fingerprint: &str, dir: &Path) -> bool {
        self.fingerprint == fingerprint
            && match self.status {
                StageStatus::Completed => self
                    .outputs
                    .iter()
                    .all(|(rel, hash)| file_sha256(&dir.join(rel)).is_ok_and(|h| &h == hash)),
                StageStatus::Disabled => true,
                StageStatus::Failed => false,
            }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub backend_id: String,
    pub backend: BackendDescriptor,
    /// Named per-stage seeds derived from the master seed.
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<StageRecord>,
    pub complete: bool,
}

impl RunManifest {
    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    /// Replaces or inserts `record`, keeping stage order.
    pub fn set_stage(&mut self, record: StageRecord) {
        self.stages.retain(|r| r.stage != record.stage);
        self.stages.push(record);
        self.stages.sort_by_key(|r| r.stage);
    }

    /// Hashes of every artifact across stages.
    pub fn artifact_hashes(&self) -> BTreeMap<&str, &str> {
        self.stages
            .iter()
            .flat_map(|r| r.outputs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
            .collect()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        tables::read_json(&dir.join(tables::MANIFEST))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        tables::write_json(&dir.join(tables::MANIFEST), self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
        assert!("stats".parse::<Stage>().is_err());
    }
}
