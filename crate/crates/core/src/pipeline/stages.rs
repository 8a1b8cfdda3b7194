use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::SearchMethodConfig;
use super::plots::export_plots;
use super::tables::*;
use super::{Pipeline, Stage, StageOutcome};
use crate::backend::{filtered_vocabulary, Backend, TokenId};
use crate::engine::{accuracy_curve, run_trial, RepetitionRecord, RepetitionTrace, TraceCache};
use crate::error::{Error, Result};
use crate::interference::{
    bins_from_edges, interference_levels, joint_uniform_sample, quantile_bins, score_anchor, InterferenceLevel,
    SamplingGrid, TertileLevels, VocabularySubset,
};
use crate::phases::{normalize_repetitions, segment_phases, PhaseSegmentation, RepRange};
use crate::search::{
    fill_group, group_bin, pair_similarity_before_learning, SearchMethod, StimulusPair, StimulusRequest, TokenPair,
};
use crate::stats::{aggregate_group_phase, interference_breakdown, AnalysisOptions};

fn text(backend: &dyn Backend, id: TokenId) -> Result<String> {
    backend.token_text(id)
}

impl Pipeline<'_> {
    pub(crate) fn run_stage_body(&mut self, stage: Stage) -> Result<StageOutcome> {
        std::fs::create_dir_all(self.output_dir()).map_err(|e| Error::io(self.output_dir(), e))?;
        let files = match stage {
            Stage::Search => self.search_stage()?,
            Stage::Interference => self.interference_stage()?,
            Stage::SampleGrid => self.sample_grid_stage()?,
            Stage::Trials => self.trials_stage()?,
            Stage::Segment => self.segment_stage()?,
            Stage::Analyze => self.analyze_stage()?,
            Stage::Plots => export_plots(self.output_dir(), &self.plot_kinds())?,
        };
        Ok(StageOutcome::Completed(files))
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.output_dir().join(name)
    }

    fn search_stage(&mut self) -> Result<Vec<String>> {
        let groups = self.config.groups.groups()?;
        let layer = self.layer()?;
        let seed = self.seed("search");
        let search = self.config.search.clone();
        let vocabulary = self.config.vocabulary.clone();

        let (pairs, fills): (Vec<StimulusPair>, Vec<SearchReportRow>) = match search.method {
            SearchMethodConfig::Listed => {
                let backend = self.backend()?;
                let mut pairs = Vec::new();
                for &[x, y] in &search.pairs {
                    let before_sim = pair_similarity_before_learning(backend, x, y, layer)?;
                    pairs.push(StimulusPair {
                        pair: TokenPair {
                            x,
                            y,
                            before_sim,
                            group_index: group_bin(before_sim, &groups),
                            layer,
                            interference: None,
                        },
                        search_seed: 0,
                        iterations: 0,
                    });
                }
                let fills = groups
                    .iter()
                    .map(|g| {
                        let n = pairs.iter().filter(|p| p.pair.group_index == Some(g.index)).count();
                        SearchReportRow {
                            group_index: g.index,
                            theta_min: g.theta_min,
                            theta_max: g.theta_max,
                            requested: n,
                            achieved: n,
                            attempts: 0,
                        }
                    })
                    .collect();
                (pairs, fills)
            }
            method => {
                let allowed = filtered_vocabulary(self.backend()?, &vocabulary)?;
                let method = match method {
                    SearchMethodConfig::BruteForce => SearchMethod::BruteForce,
                    _ => SearchMethod::Gcg,
                };
                let request = StimulusRequest {
                    groups: &groups,
                    pairs_per_group: search.pairs_per_group,
                    layer,
                    restarts: search.restarts,
                    budget: &search.budget,
                    method,
                    allowed: &allowed,
                    seed,
                };
                let per_group = self.parallel_map(&groups, |b, g| fill_group(b, g, &request))?;
                let mut pairs = Vec::new();
                let mut fills = Vec::new();
                for ((found, fill), g) in per_group.into_iter().zip(&groups) {
                    if fill.achieved < fill.requested {
                        log::warn!(
                            "group {} [{}, {}): {} of {} pairs after {} restarts",
                            g.index,
                            g.theta_min,
                            g.theta_max,
                            fill.achieved,
                            fill.requested,
                            fill.attempts
                        );
                    }
                    pairs.extend(found);
                    fills.push(SearchReportRow {
                        group_index: g.index,
                        theta_min: g.theta_min,
                        theta_max: g.theta_max,
                        requested: fill.requested,
                        achieved: fill.achieved,
                        attempts: fill.attempts,
                    });
                }
                (pairs, fills)
            }
        };

        let listed = search.method == SearchMethodConfig::Listed;
        let backend = self.backend()?;
        let backend_id = backend.backend_id();
        let rows = pairs
            .iter()
            .map(|s| {
                Ok(StimulusRow {
                    backend_id: backend_id.clone(),
                    layer,
                    group_index: s.pair.group_index,
                    x: s.pair.x,
                    x_text: text(backend, s.pair.x)?,
                    y: s.pair.y,
                    y_text: text(backend, s.pair.y)?,
                    before_sim: s.pair.before_sim,
                    search_seed: (!listed).then_some(s.search_seed),
                    iterations: (!listed).then_some(s.iterations),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_csv(&self.path(STIMULI), &rows)?;
        write_csv(&self.path(SEARCH_REPORT), &fills)?;
        Ok(vec![STIMULI.into(), SEARCH_REPORT.into()])
    }

    fn interference_stage(&mut self) -> Result<Vec<String>> {
        let stimuli: Vec<StimulusRow> = read_csv(&self.path(STIMULI))?;
        let layer = self.layer()?;
        let cfg = self.config.interference.clone();
        let vocabulary = self.config.vocabulary.clone();
        let (subset_seed, anchor_seed) = (self.seed("interference/subset"), self.seed("interference/anchors"));
        let allowed = filtered_vocabulary(self.backend()?, &vocabulary)?;
        let subset = VocabularySubset::sample(&allowed, cfg.subset_size, subset_seed);

        let mut targets: BTreeMap<TokenId, BTreeSet<TokenId>> = BTreeMap::new();
        for row in &stimuli {
            targets.entry(row.x).or_default().insert(row.y);
        }
        let cues: Vec<TokenId> = targets.keys().copied().collect();
        let anchors: BTreeSet<TokenId> = match cfg.max_anchors {
            Some(cap) if cap < cues.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(anchor_seed);
                index::sample(&mut rng, cues.len(), cap).into_iter().map(|i| cues[i]).collect()
            }
            _ => cues.iter().copied().collect(),
        };

        // One job per cue: its stimulus targets, plus the whole subset when it
        // anchors the candidate pool.
        let jobs: Vec<(TokenId, Vec<TokenId>, bool)> = cues
            .iter()
            .map(|&x| {
                let anchor = anchors.contains(&x);
                let mut t: BTreeSet<TokenId> = targets[&x].clone();
                if anchor {
                    t.extend(subset.ids.iter().copied());
                }
                (x, t.into_iter().collect(), anchor)
            })
            .collect();
        let scored = self.parallel_map(&jobs, |b, (x, t, _)| score_anchor(b, *x, t, &subset, layer))?;

        let mut stim_scores: HashMap<(TokenId, TokenId), f64> = HashMap::new();
        let mut pool: Vec<TokenPair> = Vec::new();
        for ((x, t, anchor), out) in jobs.iter().zip(scored) {
            for (&y, p) in t.iter().zip(out) {
                if targets[x].contains(&y) {
                    let p = p.as_ref().ok_or_else(|| {
                        Error::InsufficientCompetitors(format!(
                            "pair ({x}, {y}) has no competitors in a subset of {} tokens",
                            subset.ids.len()
                        ))
                    })?;
                    stim_scores.insert((*x, y), p.interference.expect("scored"));
                }
                if *anchor && subset.ids.binary_search(&y).is_ok() {
                    if let Some(p) = &p {
                        pool.push(p.clone());
                    }
                }
            }
        }

        let mut all_scores: Vec<f64> = stimuli.iter().map(|r| stim_scores[&(r.x, r.y)]).collect();
        all_scores.extend(pool.iter().filter_map(|p| p.interference));
        let levels = interference_levels(&all_scores)?;

        let backend_id = self.backend()?.backend_id();
        let rows: Vec<InterferenceRow> = stimuli
            .iter()
            .map(|r| {
                let score = stim_scores[&(r.x, r.y)];
                InterferenceRow {
                    backend_id: backend_id.clone(),
                    layer,
                    x: r.x,
                    y: r.y,
                    subset_seed,
                    score,
                    level: levels.level(score),
                }
            })
            .collect();
        let pool_rows: Vec<PoolRow> = pool
            .iter()
            .map(|p| PoolRow {
                backend_id: backend_id.clone(),
                layer,
                x: p.x,
                y: p.y,
                before_sim: p.before_sim,
                score: p.interference.expect("scored"),
            })
            .collect();
        write_csv(&self.path(INTERFERENCE), &rows)?;
        write_csv(&self.path(POOL), &pool_rows)?;
        write_json(
            &self.path(LEVELS),
            &LevelsRecord {
                q1: levels.q1,
                q2: levels.q2,
                degenerate: levels.degenerate,
                n_scores: all_scores.len(),
                subset_seed,
                subset_size: subset.ids.len(),
            },
        )?;
        Ok(vec![INTERFERENCE.into(), POOL.into(), LEVELS.into()])
    }

    fn sample_grid_stage(&mut self) -> Result<Vec<String>> {
        let stimuli: Vec<StimulusRow> = read_csv(&self.path(STIMULI))?;
        let scores = interference_by_pair(&self.path(INTERFERENCE))?;
        let pool_rows: Vec<PoolRow> = read_csv(&self.path(POOL))?;
        let levels = load_levels(&self.path(LEVELS))?;
        let cfg = self.config.sampling.clone();
        let groups = self.config.groups.groups()?;
        let seed = self.seed("sampling");

        let existing: Vec<TokenPair> = stimuli
            .iter()
            .map(|r| stimulus_pair(r, scores.get(&(r.x, r.y)).copied()))
            .collect();
        let pool: Vec<TokenPair> = pool_rows
            .iter()
            .map(|r| TokenPair {
                x: r.x,
                y: r.y,
                before_sim: r.before_sim,
                group_index: None,
                layer: r.layer,
                interference: Some(r.score),
            })
            .collect();
        let bins = match &cfg.interference_edges {
            Some(edges) => bins_from_edges(edges)?,
            None => {
                let s: Vec<f64> = pool.iter().filter_map(|p| p.interference).collect();
                quantile_bins(&s, cfg.interference_bins)?
            }
        };
        let grid = SamplingGrid {
            groups: groups.clone(),
            bins,
            min_per_bin: cfg.min_per_bin,
        };
        let sample = joint_uniform_sample(&grid, &existing, &pool, seed);

        let backend = self.backend()?;
        let backend_id = backend.backend_id();
        let rows = sample
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                Ok(ExtendedStimulusRow {
                    backend_id: backend_id.clone(),
                    layer: p.layer,
                    source: if i < existing.len() { PairSource::P } else { PairSource::Q },
                    group_index: p.group_index,
                    x: p.x,
                    x_text: text(backend, p.x)?,
                    y: p.y,
                    y_text: text(backend, p.y)?,
                    before_sim: p.before_sim,
                    interference: p.interference,
                    level: p.interference.map(|s| levels.level(s)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fill_rows: Vec<GridFillRow> = sample
            .cells
            .iter()
            .map(|c| {
                let g = &groups[c.group_index];
                let b = &grid.bins[c.bin_index];
                GridFillRow {
                    group_index: c.group_index,
                    theta_min: g.theta_min,
                    theta_max: g.theta_max,
                    bin_index: c.bin_index,
                    bin_lo: b.lo,
                    bin_hi: b.hi,
                    pre_existing: c.pre_existing,
                    available: c.available,
                    sampled: c.sampled,
                    total: c.total(),
                }
            })
            .collect();
        write_csv(&self.path(STIMULI_EXTENDED), &rows)?;
        write_csv(&self.path(GRID_FILL), &fill_rows)?;
        Ok(vec![STIMULI_EXTENDED.into(), GRID_FILL.into()])
    }

    /// Pairs the trials run on: the extended set when joint sampling is on,
    /// else the searched stimuli with their interference scores if any.
    fn trial_pairs(&self) -> Result<Vec<TokenPair>> {
        if self.config.interference.enabled && self.config.sampling.enabled {
            let rows: Vec<ExtendedStimulusRow> = read_csv(&self.path(STIMULI_EXTENDED))?;
            return Ok(rows
                .into_iter()
                .map(|r| TokenPair {
                    x: r.x,
                    y: r.y,
                    before_sim: r.before_sim,
                    group_index: r.group_index,
                    layer: r.layer,
                    interference: r.interference,
                })
                .collect());
        }
        let stimuli: Vec<StimulusRow> = read_csv(&self.path(STIMULI))?;
        let scores = if self.config.interference.enabled {
            interference_by_pair(&self.path(INTERFERENCE))?
        } else {
            HashMap::new()
        };
        Ok(stimuli
            .iter()
            .map(|r| stimulus_pair(r, scores.get(&(r.x, r.y)).copied()))
            .collect())
    }

    fn trials_stage(&mut self) -> Result<Vec<String>> {
        let pairs = self.trial_pairs()?;
        let schedule = self.config.trials.schedule()?;
        let layer = self.layer()?;
        schedule.check_fits(self.backend()?.descriptor())?;
        let cache = TraceCache::new();
        let traces = self.parallel_map(&pairs, |b, p| run_trial(b, p, &schedule, layer, Some(&cache)))?;
        let rows: Vec<TraceRow> = traces.iter().flat_map(trace_rows).collect();
        write_csv(&self.path(TRACES), &rows)?;
        Ok(vec![TRACES.into()])
    }

    fn segment_stage(&mut self) -> Result<Vec<String>> {
        let traces = load_traces(&self.path(TRACES))?;
        let th = self.config.phases;
        let mut by_backend: BTreeMap<String, Vec<RepetitionTrace>> = BTreeMap::new();
        for t in traces {
            by_backend.entry(t.backend_id.clone()).or_default().push(t);
        }
        if by_backend.is_empty() {
            return Err(Error::InsufficientData("no trials to segment".into()));
        }
        let (mut acc_rows, mut seg_rows) = (Vec::new(), Vec::new());
        for (backend_id, traces) in &by_backend {
            let curve = accuracy_curve(traces)?;
            let seg = segment_phases(&curve, &th)?;
            for p in &curve {
                acc_rows.push(AccuracyRow {
                    backend_id: backend_id.clone(),
                    r: p.r,
                    normalized: normalize_repetitions(&seg, p.r)?,
                    phase: seg.phase_of(p.r),
                    accuracy: p.accuracy,
                    n: p.n,
                });
            }
            seg_rows.push(segmentation_row(backend_id, &seg));
        }
        write_csv(&self.path(ACCURACY), &acc_rows)?;
        write_csv(&self.path(SEGMENTATION), &seg_rows)?;
        Ok(vec![ACCURACY.into(), SEGMENTATION.into()])
    }

    fn analyze_stage(&mut self) -> Result<Vec<String>> {
        let groups = self.config.groups.groups()?;
        let options = AnalysisOptions {
            q: self.config.analysis.q,
            after: self.config.analysis.after,
        };
        let mut runs = vec![self.output_dir().to_path_buf()];
        runs.extend(self.config.analysis.include_runs.iter().cloned());

        let mut traces = Vec::new();
        let mut segs: BTreeMap<String, PhaseSegmentation> = BTreeMap::new();
        let mut levels_of: HashMap<(String, usize, TokenId, TokenId), InterferenceLevel> = HashMap::new();
        for run in &runs {
            let run_traces = load_traces(&run.join(TRACES))?;
            for (id, seg) in load_segmentations(&run.join(SEGMENTATION), &run_traces)? {
                match segs.get(&id) {
                    Some(prev) if *prev != seg => {
                        return Err(Error::Aggregation(format!(
                            "runs disagree on the phase segmentation of backend `{id}`"
                        )))
                    }
                    _ => {
                        segs.insert(id, seg);
                    }
                }
            }
            let levels_path = run.join(LEVELS);
            if levels_path.exists() {
                let levels = load_levels(&levels_path)?;
                for t in &run_traces {
                    if let Some(s) = t.pair.interference {
                        levels_of.insert(trace_key(t), levels.level(s));
                    }
                }
            }
            traces.extend(run_traces);
        }

        let stats = aggregate_group_phase(&traces, &segs, &groups, &options)?;
        let rows: Vec<GroupPhaseRow> = stats
            .iter()
            .map(|s| GroupPhaseRow {
                group_index: s.group_index,
                theta_min: s.theta_min,
                theta_max: s.theta_max,
                midpoint: s.midpoint(),
                phase: s.phase,
                n: s.n,
                n_pairs: s.n_pairs,
                mean_delta_s: s.mean_delta_s,
                standard_error: s.standard_error,
                t_statistic: s.t_statistic,
                p_value: s.p_value,
                degenerate: s.degenerate,
                rejected: s.rejected,
            })
            .collect();
        let breakdown = if levels_of.is_empty() {
            Vec::new()
        } else {
            interference_breakdown(&traces, &segs, &groups, |t| levels_of.get(&trace_key(t)).copied())?
        };
        let b_rows: Vec<BreakdownTableRow> = breakdown
            .iter()
            .map(|b| BreakdownTableRow {
                group_index: b.group_index,
                theta_min: b.theta_min,
                theta_max: b.theta_max,
                midpoint: (b.theta_min + b.theta_max) / 2.0,
                level: b.level,
                phase: b.phase,
                n: b.n,
                n_pairs: b.n_pairs,
                mean_delta_s: b.mean_delta_s,
                standard_error: b.standard_error,
            })
            .collect();
        write_csv(&self.path(GROUP_PHASE_STATS), &rows)?;
        write_csv(&self.path(BREAKDOWN), &b_rows)?;
        Ok(vec![GROUP_PHASE_STATS.into(), BREAKDOWN.into()])
    }
}

fn trace_key(t: &RepetitionTrace) -> (String, usize, TokenId, TokenId) {
    (t.backend_id.clone(), t.layer, t.pair.x, t.pair.y)
}

fn stimulus_pair(r: &StimulusRow, interference: Option<f64>) -> TokenPair {
    TokenPair {
        x: r.x,
        y: r.y,
        before_sim: r.before_sim,
        group_index: r.group_index,
        layer: r.layer,
        interference,
    }
}

fn interference_by_pair(path: &Path) -> Result<HashMap<(TokenId, TokenId), f64>> {
    let rows: Vec<InterferenceRow> = read_csv(path)?;
    Ok(rows.into_iter().map(|r| ((r.x, r.y), r.score)).collect())
}

pub(crate) fn load_levels(path: &Path) -> Result<TertileLevels> {
    let rec: LevelsRecord = read_json(path)?;
    Ok(TertileLevels {
        q1: rec.q1,
        q2: rec.q2,
        labels: Vec::new(),
        degenerate: rec.degenerate,
    })
}

pub(crate) fn trace_rows(t: &RepetitionTrace) -> Vec<TraceRow> {
    t.records
        .iter()
        .map(|rec| TraceRow {
            backend_id: t.backend_id.clone(),
            layer: t.layer,
            x: t.pair.x,
            y: t.pair.y,
            before_sim: t.pair.before_sim,
            interference: t.pair.interference,
            r: rec.r,
            predicted: rec.predicted,
            correct: rec.correct,
            pair_cosine: rec.pair_cosine,
            delta_s: rec.delta_s,
        })
        .collect()
}

/// Regroups trace rows into traces; consecutive rows with the same
/// `(backend, layer, x, y)` form one trace.
pub(crate) fn load_traces(path: &Path) -> Result<Vec<RepetitionTrace>> {
    let rows: Vec<TraceRow> = read_csv(path)?;
    let mut traces: Vec<RepetitionTrace> = Vec::new();
    for row in rows {
        let record = RepetitionRecord {
            r: row.r,
            predicted: row.predicted,
            correct: row.correct,
            pair_cosine: row.pair_cosine,
            delta_s: row.delta_s,
        };
        let same = traces.last().is_some_and(|t| {
            t.backend_id == row.backend_id
                && t.layer == row.layer
                && t.pair.x == row.x
                && t.pair.y == row.y
                && t.records.last().is_some_and(|last| last.r < row.r)
        });
        if same {
            traces.last_mut().expect("checked").records.push(record);
        } else {
            traces.push(RepetitionTrace {
                backend_id: row.backend_id,
                pair: TokenPair {
                    x: row.x,
                    y: row.y,
                    before_sim: row.before_sim,
                    group_index: None,
                    layer: row.layer,
                    interference: row.interference,
                },
                layer: row.layer,
                records: vec![record],
            });
        }
    }
    Ok(traces)
}

fn segmentation_row(backend_id: &str, seg: &PhaseSegmentation) -> SegmentationRow {
    SegmentationRow {
        backend_id: backend_id.to_string(),
        encoding_start: seg.encoding.start,
        encoding_end: seg.encoding.end,
        consolidation_start: seg.consolidation.map(|r| r.start),
        consolidation_end: seg.consolidation.map(|r| r.end),
        forgetting_start: seg.forgetting.map(|r| r.start),
        forgetting_end: seg.forgetting.map(|r| r.end),
        peak_accuracy: seg.peak_accuracy,
        rise: seg.thresholds.rise,
        peak_fraction: seg.thresholds.peak_fraction,
        band: seg.thresholds.band,
        drop: seg.thresholds.drop,
    }
}

/// Segmentations keyed by backend, with the observed repetitions taken
/// from that backend's traces.
pub(crate) fn load_segmentations(
    path: &Path,
    traces: &[RepetitionTrace],
) -> Result<BTreeMap<String, PhaseSegmentation>> {
    let rows: Vec<SegmentationRow> = read_csv(path)?;
    let mut out = BTreeMap::new();
    for row in rows {
        let reps = traces
            .iter()
            .find(|t| t.backend_id == row.backend_id)
            .map(|t| t.schedule())
            .ok_or_else(|| Error::Aggregation(format!("no traces for backend `{}`", row.backend_id)))?;
        let range = |s: Option<usize>, e: Option<usize>| s.zip(e).map(|(start, end)| RepRange { start, end });
        let seg = PhaseSegmentation {
            encoding: RepRange {
                start: row.encoding_start,
                end: row.encoding_end,
            },
            consolidation: range(row.consolidation_start, row.consolidation_end),
            forgetting: range(row.forgetting_start, row.forgetting_end),
            peak_accuracy: row.peak_accuracy,
            reps,
            thresholds: crate::phases::PhaseThresholds {
                rise: row.rise,
                peak_fraction: row.peak_fraction,
                band: row.band,
                drop: row.drop,
            },
        };
        out.insert(row.backend_id, seg);
    }
    Ok(out)
}
