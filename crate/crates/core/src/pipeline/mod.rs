//! Config-driven experiment runs: stimulus search, interference scoring,
//! joint sampling, trials, phase segmentation, statistics and plots, with
//! a manifest that makes every run resumable and re-executable.

pub mod config;
mod manifest;
pub mod plots;
mod stages;
pub mod tables;
pub mod verify;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::backend::{Backend, BackendFactory, BackendOptions, BackendUri};
use crate::error::{Error, Result};

pub use config::{
    AnalysisConfig, ExperimentConfig, GridSpec, InterferenceConfig, PlotConfig, SamplingConfig, SearchConfig,
    SearchMethodConfig, TrialConfig,
};
pub use manifest::{ErrorRecord, RunManifest, Stage, StageRecord, StageStatus};
pub use plots::{export_plots, PlotKind};
pub use verify::{verify_run, Discrepancy, VerifyReport};

/// What a call to [`Pipeline::run`] or [`Pipeline::run_stage`] did.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub manifest: RunManifest,
    pub executed: Vec<Stage>,
    pub reused: Vec<Stage>,
}

/// Output of one stage execution: written files relative to the run
/// directory.
pub(crate) enum StageOutcome {
    Completed(Vec<String>),
    Disabled,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Seed names used by the stages, each derived from the master seed.
pub const SEED_NAMES: [&str; 4] = ["search", "interference/subset", "interference/anchors", "sampling"];

pub struct Pipeline<'f> {
    config: ExperimentConfig,
    uri: BackendUri,
    factory: &'f dyn BackendFactory,
    options: BackendOptions,
    primary: Option<Box<dyn Backend>>,
}

impl<'f> Pipeline<'f> {
    pub fn new(config: ExperimentConfig, factory: &'f dyn BackendFactory, mut options: BackendOptions) -> Result<Self> {
        config.validate()?;
        let uri = config.backend_uri()?;
        if let Some(cap) = config.memory_cap {
            options.memory_cap = cap;
        }
        Ok(Self {
            config,
            uri,
            factory,
            options,
            primary: None,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn output_dir(&self) -> &Path {
        &self.config.output_dir
    }

    /// The run's backend, opened on first use.
    pub fn backend(&mut self) -> Result<&dyn Backend> {
        if self.primary.is_none() {
            self.primary = Some(self.factory.open(&self.uri, &self.options)?);
        }
        Ok(self.primary.as_deref().expect("opened"))
    }

    /// Hidden-state layer: the configured one or the backend's last layer.
    pub(crate) fn layer(&mut self) -> Result<usize> {
        let configured = self.config.layer;
        let desc = self.backend()?.descriptor();
        let layer = configured.unwrap_or(desc.layer_count);
        desc.check_layer(layer)?;
        Ok(layer)
    }

    pub fn seed(&self, name: &str) -> u64 {
        crate::seed::derive(self.config.seed, name)
    }

    fn stage_seed(&self, stage: Stage) -> Option<u64> {
        match stage {
            Stage::Search => Some(self.seed("search")),
            Stage::Interference => Some(self.seed("interference/subset")),
            Stage::SampleGrid => Some(self.seed("sampling")),
            _ => None,
        }
    }

    fn stage_enabled(&self, stage: Stage) -> bool {
        match stage {
            Stage::Interference => self.config.interference.enabled,
            Stage::SampleGrid => self.config.interference.enabled && self.config.sampling.enabled,
            _ => true,
        }
    }

    /// Plot kinds the run can produce given which stages are enabled.
    pub(crate) fn plot_kinds(&self) -> Vec<PlotKind> {
        let mut kinds: Vec<PlotKind> = self
            .config
            .plots
            .kinds
            .iter()
            .copied()
            .filter(|k| match k {
                PlotKind::HeatmapCounts => self.stage_enabled(Stage::SampleGrid),
                k if k.needs_interference() => self.config.interference.enabled,
                _ => true,
            })
            .collect();
        kinds.sort();
        kinds.dedup();
        kinds
    }

    /// Config values a stage's results depend on.
    fn config_slice(&self, stage: Stage) -> serde_json::Value {
        let c = &self.config;
        let enabled = self.stage_enabled(stage);
        let specific = match stage {
            Stage::Search => serde_json::json!({
                "groups": c.groups, "vocabulary": c.vocabulary, "search": c.search,
            }),
            Stage::Interference => serde_json::json!({
                "vocabulary": c.vocabulary, "interference": c.interference,
            }),
            Stage::SampleGrid => serde_json::json!({ "groups": c.groups, "sampling": c.sampling }),
            Stage::Trials => serde_json::json!({ "trials": c.trials }),
            Stage::Segment => serde_json::json!({ "phases": c.phases }),
            Stage::Analyze => serde_json::json!({
                "groups": c.groups, "analysis": c.analysis, "phases": c.phases,
            }),
            Stage::Plots => serde_json::json!({ "kinds": self.plot_kinds() }),
        };
        serde_json::json!({
            "stage": stage,
            "enabled": enabled,
            "layer": c.layer,
            "seed": c.seed,
            "specific": specific,
        })
    }

    fn input_files(&self, stage: Stage) -> Vec<PathBuf> {
        let dir = self.output_dir();
        let mut files: Vec<PathBuf> = stage.inputs().iter().map(|f| dir.join(f)).collect();
        if stage == Stage::Analyze {
            for run in &self.config.analysis.include_runs {
                for f in stage.inputs() {
                    files.push(run.join(f));
                }
            }
        }
        files
    }

    fn fingerprint(&self, stage: Stage, backend_identity: &str) -> Result<String> {
        let mut inputs = BTreeMap::new();
        for path in self.input_files(stage) {
            let hash = if path.exists() {
                tables::file_sha256(&path)?
            } else {
                "absent".to_string()
            };
            inputs.insert(path.display().to_string(), hash);
        }
        #[derive(Serialize)]
        struct Fingerprint<'a> {
            schema_version: u32,
            backend: &'a str,
            config: serde_json::Value,
            inputs: BTreeMap<String, String>,
        }
        let fp = Fingerprint {
            schema_version: tables::SCHEMA_VERSION,
            backend: backend_identity,
            config: self.config_slice(stage),
            inputs,
        };
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&fp)?)))
    }

    /// Backend id plus descriptor and, for scripted backends, the script
    /// contents.
    fn backend_identity(&mut self) -> Result<String> {
        let script_hash = match &self.uri {
            BackendUri::Mock { script } => Some(tables::file_sha256(script)?),
            _ => None,
        };
        let b = self.backend()?;
        Ok(serde_json::to_string(&serde_json::json!({
            "id": b.backend_id(),
            "descriptor": b.descriptor(),
            "script": script_hash,
        }))?)
    }

    fn fresh_manifest(&mut self) -> Result<RunManifest> {
        let config = self.config.clone();
        let seeds = SEED_NAMES.iter().map(|n| (n.to_string(), self.seed(n))).collect();
        let b = self.backend()?;
        Ok(RunManifest {
            schema_version: tables::SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            backend_id: b.backend_id(),
            backend: b.descriptor().clone(),
            seeds,
            stages: Vec::new(),
            complete: false,
        })
    }

    fn load_manifest(&mut self) -> Result<RunManifest> {
        let mut fresh = self.fresh_manifest()?;
        if let Ok(old) = RunManifest::load(self.output_dir()) {
            if old.schema_version == fresh.schema_version && old.backend_id == fresh.backend_id {
                fresh.stages = old.stages;
            }
        }
        Ok(fresh)
    }

    fn remove_outputs(&self, record: Option<&StageRecord>) {
        if let Some(r) = record {
            for rel in r.outputs.keys() {
                let _ = std::fs::remove_file(self.output_dir().join(rel));
            }
        }
    }

    fn execute(&mut self, stage: Stage, manifest: &mut RunManifest, identity: &str) -> Result<()> {
        let fingerprint = self.fingerprint(stage, identity)?;
        let started_at = now();
        let outcome = if self.stage_enabled(stage) {
            self.run_stage_body(stage)
        } else {
            self.remove_outputs(manifest.stage(stage));
            Ok(StageOutcome::Disabled)
        };
        let mut record = StageRecord {
            stage,
            status: StageStatus::Completed,
            fingerprint,
            seed: self.stage_seed(stage),
            started_at,
            finished_at: String::new(),
            outputs: BTreeMap::new(),
            error: None,
        };
        let result = match outcome {
            Ok(StageOutcome::Completed(files)) => {
                for rel in files {
                    let hash = tables::file_sha256(&self.output_dir().join(&rel))?;
                    record.outputs.insert(rel, hash);
                }
                Ok(())
            }
            Ok(StageOutcome::Disabled) => {
                record.status = StageStatus::Disabled;
                Ok(())
            }
            Err(e) => {
                record.status = StageStatus::Failed;
                record.error = Some(ErrorRecord::from(&e));
                Err(Error::Stage {
                    stage: stage.to_string(),
                    source: Box::new(e),
                })
            }
        };
        record.finished_at = now();
        manifest.set_stage(record);
        result
    }

    fn finish(&self, manifest: &mut RunManifest, outcome: &Result<()>) -> Result<()> {
        manifest.complete = outcome.is_ok()
            && Stage::ALL
                .iter()
                .all(|s| manifest.stage(*s).is_some_and(|r| r.status != StageStatus::Failed));
        std::fs::create_dir_all(self.output_dir()).map_err(|e| Error::io(self.output_dir(), e))?;
        manifest.save(self.output_dir())
    }

    /// Runs every stage in order, skipping stages whose config slice and
    /// inputs are unchanged and whose outputs are intact.
    pub fn run(&mut self) -> Result<RunReport> {
        let identity = self.backend_identity()?;
        let mut manifest = self.load_manifest()?;
        let dir = self.output_dir().to_path_buf();
        let (mut executed, mut reused) = (Vec::new(), Vec::new());
        let mut outcome = Ok(());
        for stage in Stage::ALL {
            let fp = self.fingerprint(stage, &identity)?;
            if manifest.stage(stage).is_some_and(|r| r.reusable(&fp, &dir)) {
                log::info!("stage {stage}: up to date");
                reused.push(stage);
                continue;
            }
            log::info!("stage {stage}: running");
            executed.push(stage);
            outcome = self.execute(stage, &mut manifest, &identity);
            if outcome.is_err() {
                break;
            }
        }
        self.finish(&mut manifest, &outcome)?;
        outcome?;
        Ok(RunReport {
            manifest,
            executed,
            reused,
        })
    }

    /// Runs one stage unconditionally; its inputs must already exist.
    pub fn run_stage(&mut self, stage: Stage) -> Result<RunReport> {
        let identity = self.backend_identity()?;
        let mut manifest = self.load_manifest()?;
        let outcome = self.execute(stage, &mut manifest, &identity);
        self.finish(&mut manifest, &outcome)?;
        outcome?;
        Ok(RunReport {
            manifest,
            executed: vec![stage],
            reused: Vec::new(),
        })
    }

    /// Maps `f` over `items` with up to `workers` backend instances. The
    /// first worker uses the run's backend; the others open their own.
    /// Results come back in item order.
    pub(crate) fn parallel_map<T, R, F>(&mut self, items: &[T], f: F) -> Result<Vec<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(&dyn Backend, &T) -> Result<R> + Sync,
    {
        let workers = self.config.workers.clamp(1, items.len().max(1));
        let (uri, options, factory) = (self.uri.clone(), self.options.clone(), self.factory);
        let primary = self.backend()?;
        if workers == 1 {
            return items.iter().map(|it| f(primary, it)).collect();
        }
        let f = &f;
        let run_share = |backend: &dyn Backend, w: usize| -> Vec<(usize, Result<R>)> {
            (w..items.len())
                .step_by(workers)
                .map(|i| (i, f(backend, &items[i])))
                .collect()
        };
        let run_share = &run_share;
        let mut results: Vec<(usize, Result<R>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = (1..workers)
                .map(|w| {
                    let (uri, options) = (&uri, &options);
                    scope.spawn(move || match factory.open(uri, options) {
                        Ok(b) => run_share(b.as_ref(), w),
                        Err(e) => vec![(w, Err(e))],
                    })
                })
                .collect();
            let mut all = run_share(primary, 0);
            for h in handles {
                all.extend(h.join().expect("worker thread panicked"));
            }
            all
        });
        results.sort_by_key(|(i, _)| *i);
        results.into_iter().map(|(_, r)| r).collect()
    }
}
