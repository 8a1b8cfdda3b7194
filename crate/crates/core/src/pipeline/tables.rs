//! Tabular exports: one CSV file per artifact, header line first.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::TokenId;
use crate::error::{Error, Result};
use crate::interference::InterferenceLevel;
use crate::phases::Phase;

pub const STIMULI: &str = "stimuli.csv";
pub const SEARCH_REPORT: &str = "search_report.csv";
pub const INTERFERENCE: &str = "interference.csv";
pub const POOL: &str = "pool.csv";
pub const LEVELS: &str = "interference_levels.json";
pub const STIMULI_EXTENDED: &str = "stimuli_extended.csv";
pub const GRID_FILL: &str = "grid_fill.csv";
pub const TRACES: &str = "traces.csv";
pub const ACCURACY: &str = "accuracy.csv";
pub const SEGMENTATION: &str = "segmentation.csv";
pub const GROUP_PHASE_STATS: &str = "group_phase_stats.csv";
pub const BREAKDOWN: &str = "interference_breakdown.csv";
pub const MANIFEST: &str = "manifest.json";
pub const VERIFY_REPORT: &str = "verify_report.json";

/// Bumped whenever a table's columns change.
pub const SCHEMA_VERSION: u32 = 1;

/// A CSV row type with a fixed column order.
pub trait Table: Serialize + DeserializeOwned {
    const COLUMNS: &'static [&'static str];
}

macro_rules! table {
    (pub struct $name:ident { $(pub $field:ident : $ty:ty),* $(,)? }) => {
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            $(pub $field: $ty),*
        }

        impl Table for $name {
            const COLUMNS: &'static [&'static str] = &[$(stringify!($field)),*];
        }
    };
}

table! {
    pub struct StimulusRow {
        pub backend_id: String,
        pub layer: usize,
        pub group_index: Option<usize>,
        pub x: TokenId,
        pub x_text: String,
        pub y: TokenId,
        pub y_text: String,
        pub before_sim: f64,
        pub search_seed: Option<u64>,
        pub iterations: Option<usize>,
    }
}

table! {
    pub struct SearchReportRow {
        pub group_index: usize,
        pub theta_min: f64,
        pub theta_max: f64,
        pub requested: usize,
        pub achieved: usize,
        pub attempts: usize,
    }
}

table! {
    pub struct InterferenceRow {
        pub backend_id: String,
        pub layer: usize,
        pub x: TokenId,
        pub y: TokenId,
        pub subset_seed: u64,
        pub score: f64,
        pub level: InterferenceLevel,
    }
}

table! {
    pub struct PoolRow {
        pub backend_id: String,
        pub layer: usize,
        pub x: TokenId,
        pub y: TokenId,
        pub before_sim: f64,
        pub score: f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelsRecord {
    pub q1: f64,
    pub q2: f64,
    pub degenerate: bool,
    pub n_scores: usize,
    pub subset_seed: u64,
    pub subset_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSource {
    /// Found by the similarity search.
    P,
    /// Added by joint sampling.
    Q,
}

table! {
    pub struct ExtendedStimulusRow {
        pub backend_id: String,
        pub layer: usize,
        pub source: PairSource,
        pub group_index: Option<usize>,
        pub x: TokenId,
        pub x_text: String,
        pub y: TokenId,
        pub y_text: String,
        pub before_sim: f64,
        pub interference: Option<f64>,
        pub level: Option<InterferenceLevel>,
    }
}

table! {
    pub struct GridFillRow {
        pub group_index: usize,
        pub theta_min: f64,
        pub theta_max: f64,
        pub bin_index: usize,
        pub bin_lo: f64,
        pub bin_hi: f64,
        pub pre_existing: usize,
        pub available: usize,
        pub sampled: usize,
        pub total: usize,
    }
}

table! {
    pub struct TraceRow {
        pub backend_id: String,
        pub layer: usize,
        pub x: TokenId,
        pub y: TokenId,
        pub before_sim: f64,
        pub interference: Option<f64>,
        pub r: usize,
        pub predicted: TokenId,
        pub correct: bool,
        pub pair_cosine: f64,
        pub delta_s: f64,
    }
}

table! {
    pub struct AccuracyRow {
        pub backend_id: String,
        pub r: usize,
        pub normalized: f64,
        pub phase: Option<Phase>,
        pub accuracy: f64,
        pub n: usize,
    }
}

table! {
    pub struct SegmentationRow {
        pub backend_id: String,
        pub encoding_start: usize,
        pub encoding_end: usize,
        pub consolidation_start: Option<usize>,
        pub consolidation_end: Option<usize>,
        pub forgetting_start: Option<usize>,
        pub forgetting_end: Option<usize>,
        pub peak_accuracy: f64,
        pub rise: f64,
        pub peak_fraction: f64,
        pub band: f64,
        pub drop: f64,
    }
}

table! {
    pub struct GroupPhaseRow {
        pub group_index: usize,
        pub theta_min: f64,
        pub theta_max: f64,
        pub midpoint: f64,
        pub phase: Phase,
        pub n: usize,
        pub n_pairs: usize,
        pub mean_delta_s: Option<f64>,
        pub standard_error: Option<f64>,
        pub t_statistic: Option<f64>,
        pub p_value: Option<f64>,
        pub degenerate: bool,
        pub rejected: bool,
    }
}

table! {
    pub struct BreakdownTableRow {
        pub group_index: usize,
        pub theta_min: f64,
        pub theta_max: f64,
        pub midpoint: f64,
        pub level: InterferenceLevel,
        pub phase: Phase,
        pub n: usize,
        pub n_pairs: usize,
        pub mean_delta_s: Option<f64>,
        pub standard_error: Option<f64>,
    }
}

/// Writes `rows` with a header line. An empty table still gets its header.
pub fn write_csv<T: Table>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(T::COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_csv<T: Table>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Lower-case hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
