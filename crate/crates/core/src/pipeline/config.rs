use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{BackendUri, TokenId, VocabularyFilter};
use crate::engine::RepetitionSchedule;
use crate::error::{Error, Result};
use crate::interference::DEFAULT_SUBSET_SIZE;
use crate::phases::PhaseThresholds;
use crate::search::{check_disjoint, uniform_groups, SearchBudget, SimilarityGroup};
use crate::stats::AfterReduction;

use super::plots::PlotKind;

fn default_seed() -> u64 {
    20_240_601
}
fn default_workers() -> usize {
    1
}
fn default_output() -> PathBuf {
    PathBuf::from("results")
}

/// A complete experiment description, loaded from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `real:<model>`, `synthetic:<seed>:<vocab>:<dim>:<layers>` or `mock:<script>`.
    pub backend: String,
    /// Layer for hidden states; defaults to the last layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Backend instances used in parallel stages.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_cap: Option<usize>,
    #[serde(default)]
    pub groups: GridSpec,
    #[serde(default)]
    pub vocabulary: VocabularyFilter,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub trials: TrialConfig,
    #[serde(default)]
    pub phases: PhaseThresholds,
    #[serde(default)]
    pub interference: InterferenceConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub plots: PlotConfig,
}

/// Similarity groups: `count` windows of `width` from `start`, or explicit
/// `[theta_min, theta_max)` intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub start: f64,
    pub width: f64,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intervals: Option<Vec<[f64; 2]>>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            start: 0.1,
            width: 0.05,
            count: 17,
            intervals: None,
        }
    }
}

impl GridSpec {
    pub fn groups(&self) -> Result<Vec<SimilarityGroup>> {
        let groups = match &self.intervals {
            Some(iv) => iv
                .iter()
                .enumerate()
                .map(|(i, [lo, hi])| SimilarityGroup::new(i, *lo, *hi))
                .collect::<Result<Vec<_>>>()?,
            None => {
                if !(self.width > 0.0) {
                    return Err(Error::Config("group width must be positive".into()));
                }
                uniform_groups(self.start, self.width, self.count)
            }
        };
        check_disjoint(&groups)?;
        Ok(groups)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMethodConfig {
    Gcg,
    BruteForce,
    /// Use `search.pairs` as given; each pair is binned by its similarity.
    Listed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub method: SearchMethodConfig,
    pub pairs_per_group: usize,
    pub restarts: usize,
    pub budget: SearchBudget,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<[TokenId; 2]>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            method: SearchMethodConfig::Gcg,
            pairs_per_group: 12,
            restarts: 50,
            budget: SearchBudget::default(),
            pairs: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    /// Explicit schedule; overrides `max_repetition`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repetitions: Option<Vec<usize>>,
    pub max_repetition: usize,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            repetitions: None,
            max_repetition: 20,
        }
    }
}

impl TrialConfig {
    pub fn schedule(&self) -> Result<RepetitionSchedule> {
        match &self.repetitions {
            Some(r) => RepetitionSchedule::new(r.clone()),
            None if self.max_repetition >= 1 => Ok(RepetitionSchedule::range(self.max_repetition)),
            None => Err(Error::Config("trials.max_repetition must be at least 1".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterferenceConfig {
    pub enabled: bool,
    pub subset_size: usize,
    /// Cap on the number of distinct stimulus cues used as pool anchors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_anchors: Option<usize>,
}

impl Default for InterferenceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            subset_size: DEFAULT_SUBSET_SIZE,
            max_anchors: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub enabled: bool,
    pub min_per_bin: usize,
    /// Quantile bins over pool scores (10 gives deciles).
    pub interference_bins: usize,
    /// Explicit bin edges; override `interference_bins`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interference_edges: Option<Vec<f64>>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            min_per_bin: 10,
            interference_bins: 10,
            interference_edges: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub q: f64,
    pub after: AfterReduction,
    /// Other run directories whose traces are pooled into the analysis.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub include_runs: Vec<PathBuf>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            q: 0.05,
            after: AfterReduction::PhaseMean,
            include_runs: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    pub kinds: Vec<PlotKind>,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            kinds: PlotKind::ALL.to_vec(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths (output directory, mock script,
    /// allowlist, included runs) are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let BackendUri::Mock { script } = cfg.backend_uri()? {
            if script.is_relative() {
                cfg.backend = BackendUri::Mock {
                    script: base.join(script),
                }
                .to_string();
            }
        }
        if let Some(list) = &mut cfg.vocabulary.allowlist_path {
            if list.is_relative() {
                *list = base.join(&*list);
            }
        }
        for run in &mut cfg.analysis.include_runs {
            if run.is_relative() {
                *run = base.join(&*run);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn backend_uri(&self) -> Result<BackendUri> {
        self.backend.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.backend_uri()?;
        self.groups.groups()?;
        self.search.budget.validate()?;
        self.trials.schedule()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.search.pairs_per_group == 0 {
            return bad("search.pairs_per_group must be at least 1");
        }
        if self.search.method == SearchMethodConfig::Listed && self.search.pairs.is_empty() {
            return bad("search.method = \"listed\" needs search.pairs");
        }
        if self.interference.subset_size == 0 {
            return bad("interference.subset_size must be at least 1");
        }
        if self.sampling.enabled && self.sampling.min_per_bin == 0 {
            return bad("sampling.min_per_bin must be at least 1");
        }
        if !(self.analysis.q > 0.0 && self.analysis.q < 1.0) {
            return bad("analysis.q must lie in (0, 1)");
        }
        if self.memory_cap == Some(0) {
            return bad("memory_cap must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_toml("backend = \"synthetic:1:50:8:2\"").unwrap();
        assert_eq!(cfg.groups.groups().unwrap().len(), 17);
        assert_eq!(cfg.search.pairs_per_group, 12);
        assert_eq!(cfg.search.restarts, 50);
        assert_eq!(cfg.interference.subset_size, 1000);
        assert_eq!(cfg.sampling.min_per_bin, 10);
        assert_eq!(cfg.analysis.q, 0.05);
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "backend = \"gpu:x\"",
            "backend = \"synthetic:1:50:8:2\"\nworkers = 0",
            "backend = \"synthetic:1:50:8:2\"\n[trials]\nrepetitions = [2, 1]",
            "backend = \"synthetic:1:50:8:2\"\n[groups]\nintervals = [[0.1, 0.3], [0.2, 0.4]]",
            "backend = \"synthetic:1:50:8:2\"\n[search]\nmethod = \"listed\"",
            "backend = \"synthetic:1:50:8:2\"\nunknown = 1",
        ] {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }
}
