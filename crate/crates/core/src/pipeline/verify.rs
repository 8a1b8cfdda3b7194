//! Post-hoc recomputation of a finished run from its raw exports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::stages::load_traces;
use super::tables::*;
use crate::backend::Backend;
use crate::error::Result;
use crate::search::{pair_similarity_before_learning, SimilarityGroup};
use crate::stats::by_correction;

/// Allowed gap between a recorded and a recomputed similarity.
pub const SIMILARITY_TOLERANCE: f64 = 1e-9;
/// Allowed gap in the ΔS identities, which involve one subtraction.
pub const DELTA_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub artifact: String,
    /// Data row (1-based, header excluded).
    pub row: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    /// Rows checked per artifact.
    pub checked: BTreeMap<String, usize>,
    pub discrepancies: Vec<Discrepancy>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.discrepancies.is_empty()
    }

    fn flag(&mut self, artifact: &str, row: usize, message: String) {
        self.discrepancies.push(Discrepancy {
            artifact: artifact.to_string(),
            row: row + 1,
            message,
        });
    }

    fn count(&mut self, artifact: &str, n: usize) {
        *self.checked.entry(artifact.to_string()).or_default() += n;
    }
}

fn check_pair(
    report: &mut VerifyReport,
    backend: &dyn Backend,
    groups: &[SimilarityGroup],
    artifact: &str,
    row: usize,
    (x, y, layer, recorded, group): (u32, u32, usize, f64, Option<usize>),
) -> Result<()> {
    let s = pair_similarity_before_learning(backend, x, y, layer)?;
    if (s - recorded).abs() > SIMILARITY_TOLERANCE {
        report.flag(artifact, row, format!("({x}, {y}): before_sim {recorded} recomputes to {s}"));
    }
    if let Some(g) = group {
        match groups.get(g) {
            Some(grp) if grp.contains(s) => {}
            Some(grp) => report.flag(
                artifact,
                row,
                format!("({x}, {y}): similarity {s} outside group {g} [{}, {})", grp.theta_min, grp.theta_max),
            ),
            None => report.flag(artifact, row, format!("({x}, {y}): unknown group {g}")),
        }
    }
    Ok(())
}

/// Recomputes pair similarities and group membership of every emitted
/// pair, checks the ΔS identities in the traces and re-derives the BY
/// rejections from the exported p-values. Writes `verify_report.json` into
/// the run directory.
pub fn verify_run(config: &ExperimentConfig, backend: &dyn Backend) -> Result<VerifyReport> {
    let dir = config.output_dir.as_path();
    let groups = config.groups.groups()?;
    let mut report = VerifyReport::default();

    let stimuli: Vec<StimulusRow> = read_csv(&dir.join(STIMULI))?;
    for (i, r) in stimuli.iter().enumerate() {
        check_pair(&mut report, backend, &groups, STIMULI, i, (r.x, r.y, r.layer, r.before_sim, r.group_index))?;
    }
    report.count(STIMULI, stimuli.len());

    let extended = dir.join(STIMULI_EXTENDED);
    if extended.exists() {
        let rows: Vec<ExtendedStimulusRow> = read_csv(&extended)?;
        for (i, r) in rows.iter().enumerate() {
            let tuple = (r.x, r.y, r.layer, r.before_sim, r.group_index);
            check_pair(&mut report, backend, &groups, STIMULI_EXTENDED, i, tuple)?;
        }
        report.count(STIMULI_EXTENDED, rows.len());
    }

    verify_traces(&mut report, &dir.join(TRACES))?;
    verify_rejections(&mut report, &dir.join(GROUP_PHASE_STATS), config.analysis.q)?;

    write_json(&dir.join(VERIFY_REPORT), &report)?;
    Ok(report)
}

fn verify_traces(report: &mut VerifyReport, path: &Path) -> Result<()> {
    let traces = load_traces(path)?;
    let mut row = 0;
    for t in &traces {
        let first = t.records.iter().find(|r| r.r == 1).map(|r| r.pair_cosine);
        if let Some(c) = first {
            if (c - t.pair.before_sim).abs() > DELTA_TOLERANCE {
                report.flag(
                    TRACES,
                    row,
                    format!("({}, {}): cosine at r = 1 is {c}, before_sim is {}", t.pair.x, t.pair.y, t.pair.before_sim),
                );
            }
        }
        for rec in &t.records {
            if rec.r == 1 && rec.delta_s.abs() > DELTA_TOLERANCE {
                report.flag(TRACES, row, format!("({}, {}): delta_s at r = 1 is {}", t.pair.x, t.pair.y, rec.delta_s));
            }
            if let Some(c) = first {
                let expect = rec.pair_cosine - c;
                if (rec.delta_s - expect).abs() > DELTA_TOLERANCE {
                    report.flag(
                        TRACES,
                        row,
                        format!("({}, {}) r = {}: delta_s {} but cosines give {expect}", t.pair.x, t.pair.y, rec.r, rec.delta_s),
                    );
                }
            }
            row += 1;
        }
    }
    report.count(TRACES, row);
    Ok(())
}

fn verify_rejections(report: &mut VerifyReport, path: &Path, q: f64) -> Result<()> {
    let rows: Vec<GroupPhaseRow> = read_csv(path)?;
    let tested: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].p_value.is_some()).collect();
    let p: Vec<f64> = tested.iter().filter_map(|&i| rows[i].p_value).collect();
    let flags = by_correction(&p, q)?;
    let mut expected = vec![false; rows.len()];
    for (&i, f) in tested.iter().zip(flags) {
        expected[i] = f;
    }
    for (i, (r, e)) in rows.iter().zip(expected).enumerate() {
        if r.rejected != e {
            report.flag(
                GROUP_PHASE_STATS,
                i,
                format!("group {} {}: rejected = {} but BY gives {e}", r.group_index, r.phase, r.rejected),
            );
        }
    }
    report.count(GROUP_PHASE_STATS, rows.len());
    Ok(())
}
