//! Vocabulary interference: how close a pair's target representation sits
//! to the representations of alternative completions of the same cue.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{cosine, Backend, TokenId};
use crate::error::{Error, Result};
use crate::search::{first_cue_state, first_target_state, group_bin, SimilarityGroup, TokenPair};

pub const DEFAULT_SUBSET_SIZE: usize = 1000;

/// Seeded random subset of the filtered vocabulary, sorted by id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularySubset {
    pub ids: Vec<TokenId>,
    pub seed: u64,
    pub size: usize,
}

impl VocabularySubset {
    /// `min(size, |vocabulary|)` ids drawn without replacement.
    pub fn sample(vocabulary: &BTreeSet<TokenId>, size: usize, seed: u64) -> Self {
        let pool: Vec<TokenId> = vocabulary.iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let take = size.min(pool.len());
        let mut ids: Vec<TokenId> = index::sample(&mut rng, pool.len(), take)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        ids.sort_unstable();
        Self { ids, seed, size }
    }

    /// A subset holding exactly `ids`.
    pub fn from_ids(ids: impl IntoIterator<Item = TokenId>, seed: u64) -> Self {
        let ids: Vec<TokenId> = ids.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let size = ids.len();
        Self { ids, seed, size }
    }
}

/// Median; even counts average the two central values. `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Median of `cos(h_y1, h_t1)` over `t` in `subset` other than `y`, with
/// `h_t1` the state of `t` in `[BOS, x, t]`.
pub fn interference_score<B: Backend + ?Sized>(
    backend: &B,
    x: TokenId,
    y: TokenId,
    subset: &VocabularySubset,
    layer: usize,
) -> Result<f64> {
    let hy = first_target_state(backend, x, y, layer)?;
    let mut sims = Vec::with_capacity(subset.ids.len());
    for &t in subset.ids.iter().filter(|&&t| t != y) {
        sims.push(cosine(&hy, &first_target_state(backend, x, t, layer)?));
    }
    median(&sims).ok_or_else(|| {
        Error::InsufficientCompetitors(format!("no competitors for ({x}, {y}) once y is excluded"))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterferenceLevel {
    Low,
    Mid,
    High,
}

impl InterferenceLevel {
    pub const ALL: [InterferenceLevel; 3] = [Self::Low, Self::Mid, Self::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Mid => "mid",
            Self::High => "high",
        }
    }
}

impl fmt::Display for InterferenceLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Linear-interpolation quantile of sorted data (R type 7):
/// `h = (n - 1) p`, `q = x[floor h] + (h - floor h) (x[floor h + 1] - x[floor h])`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TertileLevels {
    pub q1: f64,
    pub q2: f64,
    pub labels: Vec<InterferenceLevel>,
    /// All scores equal; every label is `Low`.
    pub degenerate: bool,
}

impl TertileLevels {
    pub fn level(&self, score: f64) -> InterferenceLevel {
        if self.degenerate || score < self.q1 {
            InterferenceLevel::Low
        } else if score < self.q2 {
            InterferenceLevel::Mid
        } else {
            InterferenceLevel::High
        }
    }
}

/// Tertile thresholds at the 1/3 and 2/3 quantiles and the resulting labels,
/// binned as `[min, q1)`, `[q1, q2)`, `[q2, max]`.
pub fn interference_levels(scores: &[f64]) -> Result<TertileLevels> {
    if scores.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "tertile levels need at least 3 scores, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Input("interference scores must be finite".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 1.0 / 3.0);
    let q2 = quantile_sorted(&sorted, 2.0 / 3.0);
    let degenerate = sorted[0] == sorted[sorted.len() - 1];
    let mut levels = TertileLevels {
        q1,
        q2,
        labels: Vec::new(),
        degenerate,
    };
    levels.labels = scores.iter().map(|&s| levels.level(s)).collect();
    Ok(levels)
}

/// Before-learning similarity and interference score of `(x, y)` for every
/// `y` in `targets`, sharing the subset's hidden states across targets.
///
/// Values are bit-identical to [`interference_score`] and the search
/// module's pair similarity. Targets left without competitors are `None`.
pub fn score_anchor<B: Backend + ?Sized>(
    backend: &B,
    x: TokenId,
    targets: &[TokenId],
    subset: &VocabularySubset,
    layer: usize,
) -> Result<Vec<Option<TokenPair>>> {
    let hx = first_cue_state(backend, x, layer)?;
    let states: Vec<Vec<f64>> = subset
        .ids
        .iter()
        .map(|&t| first_target_state(backend, x, t, layer))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(targets.len());
    for &y in targets {
        let hy = match subset.ids.binary_search(&y) {
            Ok(i) => states[i].clone(),
            Err(_) => first_target_state(backend, x, y, layer)?,
        };
        let sims: Vec<f64> = subset
            .ids
            .iter()
            .zip(&states)
            .filter(|(&t, _)| t != y)
            .map(|(_, h)| cosine(&hy, h))
            .collect();
        out.push(median(&sims).map(|score| TokenPair {
            x,
            y,
            before_sim: cosine(&hx, &hy),
            group_index: None,
            layer,
            interference: Some(score),
        }));
    }
    Ok(out)
}

/// All `(x, t)` pairs with `x` in `anchors` and `t` in `subset`, each with
/// its before-learning similarity and interference score.
pub fn candidate_pool<B: Backend + ?Sized>(
    backend: &B,
    anchors: &[TokenId],
    subset: &VocabularySubset,
    layer: usize,
) -> Result<Vec<TokenPair>> {
    let mut pool = Vec::with_capacity(anchors.len() * subset.ids.len());
    for &x in anchors {
        pool.extend(score_anchor(backend, x, &subset.ids, subset, layer)?.into_iter().flatten());
    }
    Ok(pool)
}

/// Half-open interval `[lo, hi)` on the interference axis; the last bin of
/// a grid is closed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterferenceBin {
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
    pub closed: bool,
}

impl InterferenceBin {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && (v < self.hi || (self.closed && v == self.hi))
    }
}

/// Bins between consecutive `edges`; repeated edges collapse.
pub fn bins_from_edges(edges: &[f64]) -> Result<Vec<InterferenceBin>> {
    let mut e: Vec<f64> = edges.to_vec();
    e.dedup();
    if e.len() < 2 || e.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(format!(
            "interference bin edges must be increasing with at least two distinct values: {edges:?}"
        )));
    }
    let n = e.len() - 1;
    Ok((0..n)
        .map(|i| InterferenceBin {
            index: i,
            lo: e[i],
            hi: e[i + 1],
            closed: i + 1 == n,
        })
        .collect())
}

/// Bins at the `k`-quantiles of `scores` (deciles for `k = 10`).
pub fn quantile_bins(scores: &[f64], k: usize) -> Result<Vec<InterferenceBin>> {
    if scores.is_empty() || k == 0 {
        return Err(Error::InsufficientData("quantile bins need scores and k > 0".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (0..=k).map(|i| quantile_sorted(&sorted, i as f64 / k as f64)).collect();
    if sorted[0] == sorted[sorted.len() - 1] {
        let v = sorted[0];
        return Ok(vec![InterferenceBin {
            index: 0,
            lo: v,
            hi: v,
            closed: true,
        }]);
    }
    bins_from_edges(&edges)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingGrid {
    pub groups: Vec<SimilarityGroup>,
    pub bins: Vec<InterferenceBin>,
    pub min_per_bin: usize,
}

impl SamplingGrid {
    pub fn cell_of(&self, pair: &TokenPair) -> Option<(usize, usize)> {
        let g = group_bin(pair.before_sim, &self.groups)?;
        let s = pair.interference?;
        let b = self.bins.iter().find(|b| b.contains(s))?.index;
        Some((g, b))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFill {
    pub group_index: usize,
    pub bin_index: usize,
    pub pre_existing: usize,
    pub available: usize,
    pub sampled: usize,
}

impl CellFill {
    pub fn total(&self) -> usize {
        self.pre_existing + self.sampled
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSample {
    /// `P` followed by the sampled pairs, in cell order.
    pub pairs: Vec<TokenPair>,
    pub sampled: usize,
    pub cells: Vec<CellFill>,
}

/// Tops every (similarity group × interference bin) cell up to
/// `min_per_bin` pairs by sampling without replacement from `pool`.
///
/// Pool pairs already in `existing`, and repeated pool pairs, are dropped
/// first. Each cell draws with its own generator derived from `seed`.
pub fn joint_uniform_sample(
    grid: &SamplingGrid,
    existing: &[TokenPair],
    pool: &[TokenPair],
    seed: u64,
) -> JointSample {
    let mut seen: HashSet<(TokenId, TokenId)> = existing.iter().map(|p| (p.x, p.y)).collect();
    let mut pre: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for p in existing {
        if let Some(c) = grid.cell_of(p) {
            *pre.entry(c).or_default() += 1;
        }
    }
    let mut available: BTreeMap<(usize, usize), Vec<&TokenPair>> = BTreeMap::new();
    for p in pool {
        if let Some(c) = grid.cell_of(p) {
            if seen.insert((p.x, p.y)) {
                available.entry(c).or_default().push(p);
            }
        }
    }

    let mut pairs: Vec<TokenPair> = existing.to_vec();
    let mut cells = Vec::with_capacity(grid.groups.len() * grid.bins.len());
    let mut sampled_total = 0;
    for g in &grid.groups {
        for b in &grid.bins {
            let key = (g.index, b.index);
            let have = pre.get(&key).copied().unwrap_or(0);
            let cand = available.get(&key).map_or(&[][..], Vec::as_slice);
            let take = grid.min_per_bin.saturating_sub(have).min(cand.len());
            let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(
                seed,
                &format!("cell/{}/{}", g.index, b.index),
            ));
            let mut chosen: Vec<usize> = index::sample(&mut rng, cand.len(), take).into_vec();
            chosen.sort_unstable();
            for i in chosen {
                let mut p = cand[i].clone();
                p.group_index = Some(g.index);
                pairs.push(p);
            }
            sampled_total += take;
            cells.push(CellFill {
                group_index: g.index,
                bin_index: b.index,
                pre_existing: have,
                available: cand.len(),
                sampled: take,
            });
        }
    }
    JointSample {
        pairs,
        sampled: sampled_total,
        cells,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{filtered_vocabulary, SyntheticBackend, VocabularyFilter};
    use crate::search::{default_groups, pair_similarity_before_learning};
    use proptest::prelude::*;

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0]), Some(3.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[0.5, -1.0, 0.2]), Some(0.2));
    }

    #[test]
    fn subset_is_reproducible_and_bounded() {
        let vocab: BTreeSet<TokenId> = (10..60).collect();
        let a = VocabularySubset::sample(&vocab, 20, 5);
        assert_eq!(a, VocabularySubset::sample(&vocab, 20, 5));
        assert_ne!(a.ids, VocabularySubset::sample(&vocab, 20, 6).ids);
        assert_eq!(a.ids.len(), 20);
        assert!(a.ids.iter().all(|t| vocab.contains(t)));
        assert_eq!(VocabularySubset::sample(&vocab, 1000, 5).ids.len(), 50);
    }

    #[test]
    fn tertiles() {
        let l = interference_levels(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(l.labels, [InterferenceLevel::Low, InterferenceLevel::Mid, InterferenceLevel::High]);
        let flat = interference_levels(&[0.4; 5]).unwrap();
        assert!(flat.degenerate);
        assert!(flat.labels.iter().all(|&l| l == InterferenceLevel::Low));
        assert!(matches!(interference_levels(&[0.1, 0.2]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn only_competitor_is_the_target() {
        let b = SyntheticBackend::new(2, 30, 8, 1).unwrap();
        let s = VocabularySubset::from_ids([7], 0);
        assert!(matches!(interference_score(&b, 3, 7, &s, 1), Err(Error::InsufficientCompetitors(_))));
    }

    #[test]
    fn pool_matches_direct_scoring() {
        let b = SyntheticBackend::new(4, 40, 8, 2).unwrap();
        let vocab = filtered_vocabulary(&b, &VocabularyFilter::default()).unwrap();
        let subset = VocabularySubset::sample(&vocab, 12, 9);
        let pool = candidate_pool(&b, &[3, 17], &subset, 2).unwrap();
        assert_eq!(pool.len(), 24);
        for p in &pool {
            assert_eq!(p.interference.unwrap(), interference_score(&b, p.x, p.y, &subset, 2).unwrap());
            assert_eq!(p.before_sim, pair_similarity_before_learning(&b, p.x, p.y, 2).unwrap());
        }
    }

    #[test]
    fn quantile_bins_cover_the_pool() {
        let scores: Vec<f64> = (0..97).map(|i| (i as f64 * 0.37).sin()).collect();
        let bins = quantile_bins(&scores, 10).unwrap();
        assert_eq!(bins.len(), 10);
        for s in &scores {
            assert_eq!(bins.iter().filter(|b| b.contains(*s)).count(), 1);
        }
    }

    fn tp(x: TokenId, y: TokenId, sim: f64, score: f64) -> TokenPair {
        TokenPair {
            x,
            y,
            before_sim: sim,
            group_index: None,
            layer: 1,
            interference: Some(score),
        }
    }

    #[test]
    fn empty_pool_and_presatisfied_cells() {
        let grid = SamplingGrid {
            groups: default_groups(),
            bins: bins_from_edges(&[0.0, 0.5, 1.0]).unwrap(),
            min_per_bin: 2,
        };
        let p: Vec<TokenPair> = (0..3).map(|i| tp(1, i, 0.12, 0.2)).collect();
        let out = joint_uniform_sample(&grid, &p, &[], 1);
        assert_eq!(out.pairs, p);
        assert!(out.cells.iter().all(|c| c.sampled == 0 && c.available == 0));

        let pool = vec![tp(5, 6, 0.13, 0.3), tp(5, 7, 0.13, 0.7)];
        let out = joint_uniform_sample(&grid, &p, &pool, 1);
        let cell = |g, b| out.cells.iter().find(|c| c.group_index == g && c.bin_index == b).unwrap();
        assert_eq!(cell(0, 0).sampled, 0);
        assert_eq!(cell(0, 1).sampled, 1);
    }

    proptest! {
        #[test]
        fn labels_are_monotone(scores in prop::collection::vec(-1.0f64..1.0, 3..60)) {
            let l = interference_levels(&scores).unwrap();
            for i in 0..scores.len() {
                for j in 0..scores.len() {
                    if scores[i] <= scores[j] {
                        prop_assert!(l.labels[i] <= l.labels[j]);
                    }
                }
            }
        }

        #[test]
        fn median_is_order_free(mut v in prop::collection::vec(-1.0f64..1.0, 1..40), seed in any::<u64>()) {
            let m = median(&v);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(v.as_mut_slice(), &mut rng);
            prop_assert_eq!(median(&v), m);
        }
    }
}
