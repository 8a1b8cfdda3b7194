use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::fdr::by_correction;
use super::ttest::{mean_and_se, paired_t_one_sided};
use crate::engine::RepetitionTrace;
use crate::error::{Error, Result};
use crate::interference::InterferenceLevel;
use crate::phases::{Phase, PhaseSegmentation};
use crate::search::{group_bin, SimilarityGroup};

/// How a pair's records within a phase reduce to one "after" cosine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AfterReduction {
    #[default]
    PhaseMean,
    LastRep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisOptions {
    pub q: f64,
    pub after: AfterReduction,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            q: 0.05,
            after: AfterReduction::PhaseMean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupPhaseStat {
    pub group_index: usize,
    pub theta_min: f64,
    pub theta_max: f64,
    pub phase: Phase,
    /// Records (pair × repetition) in the cell.
    pub n: usize,
    /// Pairs contributing to the t-test.
    pub n_pairs: usize,
    pub mean_delta_s: Option<f64>,
    pub standard_error: Option<f64>,
    pub t_statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub degenerate: bool,
    pub rejected: bool,
}

impl GroupPhaseStat {
    pub fn midpoint(&self) -> f64 {
        (self.theta_min + self.theta_max) / 2.0
    }
}

/// Per-pair contribution to one (group, phase) cell.
struct PairCell {
    key: (String, usize, u32, u32),
    before: f64,
    after: f64,
    deltas: Vec<f64>,
}

fn segmentation_for<'a>(
    segs: &'a BTreeMap<String, PhaseSegmentation>,
    trace: &RepetitionTrace,
) -> Result<&'a PhaseSegmentation> {
    segs.get(&trace.backend_id).ok_or_else(|| {
        Error::Aggregation(format!("no phase segmentation for backend `{}`", trace.backend_id))
    })
}

fn pair_cells(
    trace: &RepetitionTrace,
    seg: &PhaseSegmentation,
    after: AfterReduction,
) -> Vec<(Phase, PairCell)> {
    let mut by_phase: BTreeMap<Phase, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for rec in &trace.records {
        if let Some(phase) = seg.phase_of(rec.r) {
            let e = by_phase.entry(phase).or_default();
            e.0.push(rec.delta_s);
            e.1.push(rec.pair_cosine);
        }
    }
    by_phase
        .into_iter()
        .map(|(phase, (deltas, cosines))| {
            let after = match after {
                AfterReduction::PhaseMean => cosines.iter().sum::<f64>() / cosines.len() as f64,
                AfterReduction::LastRep => *cosines.last().expect("non-empty phase"),
            };
            let cell = PairCell {
                key: (trace.backend_id.clone(), trace.layer, trace.pair.x, trace.pair.y),
                before: trace.pair.before_sim,
                after,
                deltas,
            };
            (phase, cell)
        })
        .collect()
}

/// Mean ΔS per (similarity group × phase) with a one-sided paired t-test of
/// `before_sim` against the per-pair "after" cosine, BY-corrected jointly
/// across all cells holding at least two pairs.
///
/// Results do not depend on the order of `traces`.
pub fn aggregate_group_phase(
    traces: &[RepetitionTrace],
    segs: &BTreeMap<String, PhaseSegmentation>,
    groups: &[SimilarityGroup],
    options: &AnalysisOptions,
) -> Result<Vec<GroupPhaseStat>> {
    let mut cells: BTreeMap<(usize, Phase), Vec<PairCell>> = BTreeMap::new();
    for trace in traces {
        let seg = segmentation_for(segs, trace)?;
        let Some(g) = group_bin(trace.pair.before_sim, groups) else {
            continue;
        };
        for (phase, cell) in pair_cells(trace, seg, options.after) {
            cells.entry((g, phase)).or_default().push(cell);
        }
    }

    let mut stats = Vec::with_capacity(groups.len() * 3);
    for group in groups {
        for phase in Phase::ALL {
            let mut members = cells.remove(&(group.index, phase)).unwrap_or_default();
            members.sort_by(|a, b| a.key.cmp(&b.key));
            let mut deltas: Vec<f64> = members.iter().flat_map(|c| c.deltas.iter().copied()).collect();
            deltas.sort_by(f64::total_cmp);
            let (mean, se) = mean_and_se(&deltas);
            let mut stat = GroupPhaseStat {
                group_index: group.index,
                theta_min: group.theta_min,
                theta_max: group.theta_max,
                phase,
                n: deltas.len(),
                n_pairs: members.len(),
                mean_delta_s: (!deltas.is_empty()).then_some(mean),
                standard_error: se,
                t_statistic: None,
                p_value: None,
                degenerate: false,
                rejected: false,
            };
            if members.len() >= 2 {
                let before: Vec<f64> = members.iter().map(|c| c.before).collect();
                let after: Vec<f64> = members.iter().map(|c| c.after).collect();
                let test = paired_t_one_sided(&before, &after)?;
                stat.t_statistic = Some(test.t);
                stat.p_value = Some(test.p);
                stat.degenerate = test.degenerate;
            }
            stats.push(stat);
        }
    }

    let tested: Vec<usize> = (0..stats.len()).filter(|&i| stats[i].p_value.is_some()).collect();
    let p: Vec<f64> = tested.iter().map(|&i| stats[i].p_value.expect("tested")).collect();
    for (&i, rejected) in tested.iter().zip(by_correction(&p, options.q)?) {
        stats[i].rejected = rejected;
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub group_index: usize,
    pub theta_min: f64,
    pub theta_max: f64,
    pub level: InterferenceLevel,
    pub phase: Phase,
    pub n: usize,
    pub n_pairs: usize,
    pub mean_delta_s: Option<f64>,
    pub standard_error: Option<f64>,
}

/// Mean ΔS per (similarity group × interference level × phase). Pairs for
/// which `level_of` gives `None` are skipped.
pub fn interference_breakdown(
    traces: &[RepetitionTrace],
    segs: &BTreeMap<String, PhaseSegmentation>,
    groups: &[SimilarityGroup],
    level_of: impl Fn(&RepetitionTrace) -> Option<InterferenceLevel>,
) -> Result<Vec<BreakdownRow>> {
    let mut cells: BTreeMap<(usize, InterferenceLevel, Phase), Vec<PairCell>> = BTreeMap::new();
    for trace in traces {
        let seg = segmentation_for(segs, trace)?;
        let (Some(g), Some(level)) = (group_bin(trace.pair.before_sim, groups), level_of(trace)) else {
            continue;
        };
        for (phase, cell) in pair_cells(trace, seg, AfterReduction::PhaseMean) {
            cells.entry((g, level, phase)).or_default().push(cell);
        }
    }
    let mut rows = Vec::new();
    for group in groups {
        for level in InterferenceLevel::ALL {
            for phase in Phase::ALL {
                let mut members = cells.remove(&(group.index, level, phase)).unwrap_or_default();
                members.sort_by(|a, b| a.key.cmp(&b.key));
                let mut deltas: Vec<f64> = members.iter().flat_map(|c| c.deltas.iter().copied()).collect();
                deltas.sort_by(f64::total_cmp);
                let (mean, se) = mean_and_se(&deltas);
                rows.push(BreakdownRow {
                    group_index: group.index,
                    theta_min: group.theta_min,
                    theta_max: group.theta_max,
                    level,
                    phase,
                    n: deltas.len(),
                    n_pairs: members.len(),
                    mean_delta_s: (!deltas.is_empty()).then_some(mean),
                    standard_error: se,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::RepetitionRecord;
    use crate::phases::RepRange;
    use crate::search::{uniform_groups, TokenPair};

    fn seg() -> PhaseSegmentation {
        PhaseSegmentation {
            encoding: RepRange { start: 1, end: 2 },
            consolidation: Some(RepRange { start: 3, end: 4 }),
            forgetting: None,
            peak_accuracy: 1.0,
            reps: vec![1, 2, 3, 4],
            thresholds: Default::default(),
        }
    }

    fn trace(x: u32, before: f64, cons_shift: f64) -> RepetitionTrace {
        let records = (1..=4)
            .map(|r| {
                let shift = if r >= 3 { cons_shift } else { 0.0 };
                RepetitionRecord {
                    r,
                    predicted: 0,
                    correct: true,
                    pair_cosine: before + shift,
                    delta_s: shift,
                }
            })
            .collect();
        RepetitionTrace {
            backend_id: "m".into(),
            pair: TokenPair {
                x,
                y: x + 1,
                before_sim: before,
                group_index: None,
                layer: 1,
                interference: None,
            },
            layer: 1,
            records,
        }
    }

    fn segs() -> BTreeMap<String, PhaseSegmentation> {
        BTreeMap::from([("m".to_string(), seg())])
    }

    #[test]
    fn singleton_cell_mean_is_the_pair_mean() {
        let groups = uniform_groups(0.0, 0.5, 2);
        let out = aggregate_group_phase(&[trace(1, 0.3, -0.1)], &segs(), &groups, &Default::default()).unwrap();
        let cons = out
            .iter()
            .find(|s| s.group_index == 0 && s.phase == Phase::Consolidation)
            .unwrap();
        assert_eq!(cons.n, 2);
        assert_eq!(cons.n_pairs, 1);
        assert_eq!(cons.mean_delta_s, Some(-0.1));
        assert!(cons.p_value.is_none() && !cons.rejected);
        let empty = out.iter().find(|s| s.group_index == 1).unwrap();
        assert_eq!((empty.n, empty.mean_delta_s), (0, None));
        assert_eq!(out.len(), 6);
    }

    #[test]
    fn shifted_group_is_rejected_and_order_free() {
        let groups = uniform_groups(0.0, 0.5, 2);
        let mut traces: Vec<RepetitionTrace> = (0..4).map(|i| trace(i * 2, 0.6 + 0.05 * i as f64, -0.2)).collect();
        traces.extend((0..4).map(|i| trace(100 + i * 2, 0.1 + 0.05 * i as f64, 0.0)));
        let out = aggregate_group_phase(&traces, &segs(), &groups, &Default::default()).unwrap();
        for s in &out {
            let expect = s.group_index == 1 && s.phase == Phase::Consolidation;
            assert_eq!(s.rejected, expect, "{s:?}");
        }
        traces.reverse();
        assert_eq!(aggregate_group_phase(&traces, &segs(), &groups, &Default::default()).unwrap(), out);
    }

    #[test]
    fn missing_segmentation_is_an_error() {
        let mut t = trace(1, 0.3, 0.0);
        t.backend_id = "other".into();
        let err = aggregate_group_phase(&[t], &segs(), &uniform_groups(0.0, 0.5, 2), &Default::default());
        assert!(matches!(err, Err(Error::Aggregation(_))));
    }
}
