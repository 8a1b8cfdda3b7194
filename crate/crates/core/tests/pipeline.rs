use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use icl_assoc_core::backend::{BackendOptions, DefaultBackendFactory};
use icl_assoc_core::phases::Phase;
use icl_assoc_core::pipeline::tables::{self, read_csv, GroupPhaseRow, SegmentationRow};
use icl_assoc_core::pipeline::{verify_run, ExperimentConfig, Pipeline, RunManifest, Stage};

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/golden")
}

/// The golden config with its output redirected into `out`.
fn golden_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&golden_dir().join("experiment.toml")).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn run(cfg: &ExperimentConfig) -> icl_assoc_core::pipeline::RunReport {
    Pipeline::new(cfg.clone(), &DefaultBackendFactory, BackendOptions::default())
        .unwrap()
        .run()
        .unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != tables::MANIFEST {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn golden_exports_are_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run(&golden_config(a.path()));
    let mut cfg_b = golden_config(b.path());
    cfg_b.workers = 1;
    let rb = run(&cfg_b);
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert!(sa.len() >= 10, "{:?}", sa.keys().collect::<Vec<_>>());
    assert_eq!(sa, sb);
    assert_eq!(ra.manifest.artifact_hashes(), rb.manifest.artifact_hashes());
    assert!(ra.manifest.complete);
}

#[test]
fn deleting_the_stats_export_reruns_only_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = golden_config(dir.path());
    let first = run(&cfg);
    assert_eq!(first.executed, Stage::ALL.to_vec());

    let again = run(&cfg);
    assert!(again.executed.is_empty(), "{:?}", again.executed);

    std::fs::remove_file(dir.path().join(tables::GROUP_PHASE_STATS)).unwrap();
    let third = run(&cfg);
    assert_eq!(third.executed, vec![Stage::Analyze]);
    assert_eq!(third.manifest.artifact_hashes(), first.manifest.artifact_hashes());
}

#[test]
fn changing_a_stage_setting_reruns_it_and_its_dependents() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = golden_config(dir.path());
    run(&cfg);
    // Same rejections at the stricter level, so the plots see identical
    // inputs and are reused.
    cfg.analysis.q = 0.01;
    let report = run(&cfg);
    assert_eq!(report.executed, vec![Stage::Analyze]);

    cfg.trials.max_repetition = 11;
    let report = run(&cfg);
    assert_eq!(report.executed, vec![Stage::Trials, Stage::Segment, Stage::Analyze, Stage::Plots]);
    assert_eq!(report.reused, vec![Stage::Search, Stage::Interference, Stage::SampleGrid]);
}

#[test]
fn golden_u_shape_rejects_exactly_the_scripted_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = golden_config(dir.path());
    run(&cfg);

    let seg: Vec<SegmentationRow> = read_csv(&dir.path().join(tables::SEGMENTATION)).unwrap();
    assert_eq!((seg[0].encoding_start, seg[0].encoding_end), (1, 3));
    assert_eq!((seg[0].consolidation_start, seg[0].consolidation_end), (Some(4), Some(9)));
    assert_eq!((seg[0].forgetting_start, seg[0].forgetting_end), (Some(10), Some(12)));

    let stats: Vec<GroupPhaseRow> = read_csv(&dir.path().join(tables::GROUP_PHASE_STATS)).unwrap();
    assert_eq!(stats.len(), 17 * 3);
    for s in &stats {
        let target = (0.55..0.75).contains(&s.midpoint) && s.phase == Phase::Consolidation;
        assert_eq!(s.rejected, target, "{s:?}");
        let expect = if target { -0.2 } else { 0.0 };
        assert!((s.mean_delta_s.unwrap() - expect).abs() < 1e-9, "{s:?}");
    }

    let backend = icl_assoc_core::backend::MockBackend::from_path(&golden_dir().join("script.toml")).unwrap();
    let report = verify_run(&cfg, &backend).unwrap();
    assert!(report.passed(), "{:?}", report.discrepancies);
}

#[test]
fn failing_stage_leaves_a_partial_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = golden_config(dir.path());
    // A one-point schedule cannot be segmented.
    cfg.trials.repetitions = Some(vec![1]);
    let err = Pipeline::new(cfg, &DefaultBackendFactory, BackendOptions::default())
        .unwrap()
        .run()
        .unwrap_err();
    assert_eq!(err.kind(), "insufficient_data");
    let manifest = RunManifest::load(dir.path()).unwrap();
    assert!(!manifest.complete);
    let failed = manifest.stage(Stage::Segment).unwrap();
    assert_eq!(failed.error.as_ref().unwrap().kind, "insufficient_data");
    assert!(manifest.stage(Stage::Trials).unwrap().outputs.contains_key(tables::TRACES));
    assert!(manifest.stage(Stage::Analyze).is_none());
}

#[test]
fn synthetic_end_to_end_passes_verification() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml(&format!(
        r#"
backend = "synthetic:2:200:16:2"
seed = 11
output_dir = "{}"
workers = 3

[groups]
start = 0.3
width = 0.1
count = 5

[search]
pairs_per_group = 4
restarts = 30

[trials]
max_repetition = 20

[interference]
subset_size = 60
max_anchors = 6

[sampling]
min_per_bin = 2
interference_bins = 4
"#,
        dir.path().display()
    ))
    .unwrap();
    let report = run(&cfg);
    assert!(report.manifest.complete);

    let stimuli: Vec<tables::StimulusRow> = read_csv(&dir.path().join(tables::STIMULI)).unwrap();
    assert_eq!(stimuli.len(), 20);
    let mut backend = Pipeline::new(cfg.clone(), &DefaultBackendFactory, BackendOptions::default()).unwrap();
    let verify = verify_run(&cfg, backend.backend().unwrap()).unwrap();
    assert!(verify.passed(), "{:?}", verify.discrepancies);
    assert_eq!(verify.checked[tables::STIMULI], 20);
    assert!(verify.checked[tables::STIMULI_EXTENDED] >= 20);
    for kind in icl_assoc_core::pipeline::PlotKind::ALL {
        assert!(dir.path().join(kind.figure_file()).exists(), "{kind}");
    }
}
