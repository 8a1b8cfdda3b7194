//! Stimulus search: token pairs whose before-learning pair similarity lies
//! in a prescribed cosine interval.
//!
//! The gradient-guided search fixes `x`, starts from `(x, x)` and
//! repeatedly substitutes `y` using the input gradient of
//! `(midpoint - cos(h_x1, h_y1))^2` to shortlist candidates, adopting the
//! candidate with the smallest exact loss. The backtracking variant bounds
//! the admissible gradient magnitude and only accepts steps satisfying an
//! Armijo sufficient-decrease test, shrinking the bound on rejection.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{
    cosine, cosine_grad_wrt_second, Backend, ForwardOutput, LossGradient, TokenId, TokenSequence,
};
use crate::error::{Error, Result};

/// Half-open cosine interval `[theta_min, theta_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGroup {
    pub index: usize,
    pub theta_min: f64,
    pub theta_max: f64,
}

impl SimilarityGroup {
    pub fn new(index: usize, theta_min: f64, theta_max: f64) -> Result<Self> {
        if !(theta_min < theta_max) || !theta_min.is_finite() || !theta_max.is_finite() {
            return Err(Error::Config(format!(
                "similarity group {index}: need theta_min < theta_max, got [{theta_min}, {theta_max})"
            )));
        }
        Ok(Self {
            index,
            theta_min,
            theta_max,
        })
    }

    pub fn contains(&self, sim: f64) -> bool {
        self.theta_min <= sim && sim < self.theta_max
    }

    pub fn midpoint(&self) -> f64 {
        (self.theta_min + self.theta_max) / 2.0
    }

    pub fn loss(&self, sim: f64) -> f64 {
        let d = self.midpoint() - sim;
        d * d
    }
}

/// `count` consecutive windows of `width` starting at `start`.
///
/// Edges are computed as `start + i * width` rounded to 1e-12 so that
/// printed bounds read `0.15` rather than `0.15000000000000002`.
pub fn uniform_groups(start: f64, width: f64, count: usize) -> Vec<SimilarityGroup> {
    let edge = |i: usize| ((start + i as f64 * width) * 1e12).round() / 1e12;
    (0..count)
        .map(|i| SimilarityGroup {
            index: i,
            theta_min: edge(i),
            theta_max: edge(i + 1),
        })
        .collect()
}

/// 17 windows of width 0.05 covering `[0.1, 0.95)`.
pub fn default_groups() -> Vec<SimilarityGroup> {
    uniform_groups(0.1, 0.05, 17)
}

/// Errors unless the groups are pairwise disjoint.
pub fn check_disjoint(groups: &[SimilarityGroup]) -> Result<()> {
    let mut sorted: Vec<&SimilarityGroup> = groups.iter().collect();
    sorted.sort_by(|a, b| a.theta_min.total_cmp(&b.theta_min));
    for w in sorted.windows(2) {
        if w[1].theta_min < w[0].theta_max {
            return Err(Error::Config(format!(
                "similarity groups {} and {} overlap",
                w[0].index, w[1].index
            )));
        }
    }
    Ok(())
}

/// Index of the group containing `sim`, if any.
pub fn group_bin(sim: f64, groups: &[SimilarityGroup]) -> Option<usize> {
    groups.iter().find(|g| g.contains(sim)).map(|g| g.index)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchBudget {
    pub top_k: usize,
    pub max_iterations: usize,
    pub armijo_alpha: f64,
    pub shrink_beta: f64,
    pub gradient_bound_floor: f64,
    pub use_backtracking: bool,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self {
            top_k: 256,
            max_iterations: 100,
            armijo_alpha: 0.3,
            shrink_beta: 0.2,
            gradient_bound_floor: 1e-8,
            use_backtracking: false,
        }
    }
}

impl SearchBudget {
    pub fn validate(&self) -> Result<()> {
        let ok = self.top_k > 0
            && self.max_iterations > 0
            && self.armijo_alpha > 0.0
            && self.armijo_alpha < 1.0
            && self.shrink_beta > 0.0
            && self.shrink_beta < 1.0
            && self.gradient_bound_floor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid search budget: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenPair {
    pub x: TokenId,
    pub y: TokenId,
    pub before_sim: f64,
    pub group_index: Option<usize>,
    pub layer: usize,
    pub interference: Option<f64>,
}

/// Hidden state of `x` in `[BOS, x]`.
pub fn first_cue_state<B: Backend + ?Sized>(backend: &B, x: TokenId, layer: usize) -> Result<Vec<f64>> {
    let seq = TokenSequence::from_body(backend.bos_id(), &[x]);
    let out = backend.forward(&seq, layer)?;
    Ok(out.hidden[seq.body_offset()].vector.clone())
}

/// Hidden state of `y` in `[BOS, x, y]`.
pub fn first_target_state<B: Backend + ?Sized>(
    backend: &B,
    x: TokenId,
    y: TokenId,
    layer: usize,
) -> Result<Vec<f64>> {
    let seq = TokenSequence::from_body(backend.bos_id(), &[x, y]);
    let out = backend.forward(&seq, layer)?;
    Ok(out.hidden[seq.body_offset() + 1].vector.clone())
}

/// `cos(h_x1, h_y1)`: `x` in `[BOS, x]` against `y` in `[BOS, x, y]`.
pub fn pair_similarity_before_learning<B: Backend + ?Sized>(
    backend: &B,
    x: TokenId,
    y: TokenId,
    layer: usize,
) -> Result<f64> {
    let hx = first_cue_state(backend, x, layer)?;
    let hy = first_target_state(backend, x, y, layer)?;
    Ok(cosine(&hx, &hy))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSuccess {
    pub pair: TokenPair,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchFailure {
    /// Lowest-loss pair seen.
    pub best: TokenPair,
    pub best_loss: f64,
    pub iterations: usize,
    /// The backtracking bound reached its floor without an accepted step.
    pub stalled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SearchOutcome {
    Found(SearchSuccess),
    NotFound(SearchFailure),
}

impl SearchOutcome {
    pub fn found(&self) -> Option<&SearchSuccess> {
        match self {
            SearchOutcome::Found(s) => Some(s),
            SearchOutcome::NotFound(_) => None,
        }
    }

    pub fn iterations(&self) -> usize {
        match self {
            SearchOutcome::Found(s) => s.iterations,
            SearchOutcome::NotFound(f) => f.iterations,
        }
    }
}

/// Per-iteration record, for inspecting search dynamics.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchStep {
    pub iteration: usize,
    pub candidate: TokenId,
    pub candidate_loss: f64,
    pub current_loss: f64,
    pub accepted: bool,
    pub bound: f64,
}

/// Loss `(midpoint - cos(h_x, h_y))^2` as a function of the forward pass over
/// `[BOS, x, y]`, with `h_x` held fixed.
struct MidpointLoss<'a> {
    cue_state: &'a [f64],
    target_position: usize,
    midpoint: f64,
}

impl MidpointLoss<'_> {
    fn call(&self, out: &ForwardOutput) -> (f64, LossGradient) {
        let hy = &out.hidden[self.target_position].vector;
        let s = cosine(self.cue_state, hy);
        let residual = self.midpoint - s;
        let dcos = cosine_grad_wrt_second(self.cue_state, hy);
        let grad = dcos.iter().map(|d| -2.0 * residual * d).collect();
        (
            residual * residual,
            LossGradient {
                hidden: vec![(self.target_position, grad)],
                final_logits: None,
            },
        )
    }
}

impl crate::backend::OutputLoss for MidpointLoss<'_> {
    fn evaluate(&self, output: &ForwardOutput) -> (f64, LossGradient) {
        self.call(output)
    }
}

/// Gradient-guided search for `y` such that `(x_init, y)` falls in `group`.
///
/// `allowed` is the filtered vocabulary; candidates are drawn from it.
pub fn gcg_search<B: Backend + ?Sized>(
    backend: &B,
    x_init: TokenId,
    group: &SimilarityGroup,
    budget: &SearchBudget,
    layer: usize,
    allowed: &BTreeSet<TokenId>,
    rng: &mut ChaCha8Rng,
) -> Result<SearchOutcome> {
    gcg_search_traced(backend, x_init, group, budget, layer, allowed, rng, &mut |_| {})
}

/// [`gcg_search`] reporting every iteration to `observe`.
#[allow(clippy::too_many_arguments)]
pub fn gcg_search_traced<B: Backend + ?Sized>(
    backend: &B,
    x_init: TokenId,
    group: &SimilarityGroup,
    budget: &SearchBudget,
    layer: usize,
    allowed: &BTreeSet<TokenId>,
    rng: &mut ChaCha8Rng,
    observe: &mut dyn FnMut(&SearchStep),
) -> Result<SearchOutcome> {
    budget.validate()?;
    backend.descriptor().check_token(x_init)?;
    if allowed.is_empty() {
        return Err(Error::SearchInfeasible("empty candidate vocabulary".into()));
    }
    if !backend.supports_gradients() {
        return Err(Error::Capability("input gradients"));
    }

    let cue = first_cue_state(backend, x_init, layer)?;
    let bos = backend.bos_id();
    let target_position = usize::from(bos.is_some()) + 1;
    let loss_fn = MidpointLoss {
        cue_state: &cue,
        target_position,
        midpoint: group.midpoint(),
    };
    let eval = |y: TokenId| -> Result<(f64, f64)> {
        let hy = first_target_state(backend, x_init, y, layer)?;
        let s = cosine(&cue, &hy);
        Ok((s, group.loss(s)))
    };
    let make_pair = |y: TokenId, s: f64| TokenPair {
        x: x_init,
        y,
        before_sim: s,
        group_index: group.contains(s).then_some(group.index),
        layer,
        interference: None,
    };

    let mut y = x_init;
    let (mut sim, mut loss) = eval(y)?;
    if group.contains(sim) {
        return Ok(SearchOutcome::Found(SearchSuccess {
            pair: make_pair(y, sim),
            iterations: 0,
        }));
    }
    let mut best = (y, sim, loss);
    let mut bound = f64::INFINITY;

    for iteration in 1..=budget.max_iterations {
        let seq = TokenSequence::from_body(bos, &[x_init, y]);
        let grad = backend.input_gradient(&seq, layer, target_position, &loss_fn)?;

        let mut ranked: Vec<TokenId> = allowed
            .iter()
            .copied()
            .filter(|&t| !budget.use_backtracking || (-bound..=0.0).contains(&grad[t as usize]))
            .collect();
        if ranked.is_empty() {
            if budget.use_backtracking && bound > budget.gradient_bound_floor {
                bound = (bound * budget.shrink_beta).max(budget.gradient_bound_floor);
                continue;
            }
            return Ok(failure(make_pair(best.0, best.1), best.2, iteration, true));
        }
        ranked.sort_by(|&a, &b| grad[a as usize].total_cmp(&grad[b as usize]).then(a.cmp(&b)));
        ranked.truncate(budget.top_k);
        if budget.use_backtracking && bound.is_infinite() {
            // First line search: the bound starts at the steepest admissible
            // gradient magnitude so that shrinking it is meaningful.
            bound = ranked
                .iter()
                .map(|&t| -grad[t as usize])
                .fold(0.0, f64::max)
                .max(budget.gradient_bound_floor);
        }
        ranked.shuffle(rng);

        let mut choice: Option<(TokenId, f64, f64)> = None;
        for &candidate in &ranked {
            let (s, l) = eval(candidate)?;
            if choice.is_none_or(|(_, _, bl)| l < bl) {
                choice = Some((candidate, s, l));
            }
        }
        let (candidate, c_sim, c_loss) = choice.expect("non-empty candidate list");

        let accepted = if budget.use_backtracking {
            let predicted = (grad[y as usize] - grad[candidate as usize]).max(0.0);
            c_loss < loss && loss - c_loss >= budget.armijo_alpha * predicted
        } else {
            true
        };
        observe(&SearchStep {
            iteration,
            candidate,
            candidate_loss: c_loss,
            current_loss: loss,
            accepted,
            bound,
        });

        if accepted {
            y = candidate;
            sim = c_sim;
            loss = c_loss;
            if loss < best.2 {
                best = (y, sim, loss);
            }
            if group.contains(sim) {
                let exact = pair_similarity_before_learning(backend, x_init, y, layer)?;
                if group.contains(exact) {
                    return Ok(SearchOutcome::Found(SearchSuccess {
                        pair: make_pair(y, exact),
                        iterations: iteration,
                    }));
                }
            }
            if budget.use_backtracking {
                bound = f64::INFINITY;
            }
        } else {
            if c_loss < best.2 {
                best = (candidate, c_sim, c_loss);
            }
            if bound <= budget.gradient_bound_floor {
                return Ok(failure(make_pair(best.0, best.1), best.2, iteration, true));
            }
            bound = (bound * budget.shrink_beta).max(budget.gradient_bound_floor);
        }
    }
    Ok(failure(
        make_pair(best.0, best.1),
        best.2,
        budget.max_iterations,
        false,
    ))
}

fn failure(best: TokenPair, best_loss: f64, iterations: usize, stalled: bool) -> SearchOutcome {
    SearchOutcome::NotFound(SearchFailure {
        best,
        best_loss,
        iterations,
        stalled,
    })
}

/// Every `(x, y)` with `y` in `candidates` whose pair similarity lies in
/// `group`, sorted by distance to the midpoint then by `y`.
pub fn brute_force_search<B: Backend + ?Sized>(
    backend: &B,
    group: &SimilarityGroup,
    x: TokenId,
    candidates: &BTreeSet<TokenId>,
    layer: usize,
) -> Result<Vec<TokenPair>> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let hx = first_cue_state(backend, x, layer)?;
    let mut hits = Vec::new();
    for &y in candidates {
        let s = cosine(&hx, &first_target_state(backend, x, y, layer)?);
        if group.contains(s) {
            hits.push(TokenPair {
                x,
                y,
                before_sim: s,
                group_index: Some(group.index),
                layer,
                interference: None,
            });
        }
    }
    let mid = group.midpoint();
    hits.sort_by(|a, b| {
        (a.before_sim - mid)
            .abs()
            .total_cmp(&(b.before_sim - mid).abs())
            .then(a.y.cmp(&b.y))
    });
    Ok(hits)
}

/// A pair accepted into the stimulus set, with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StimulusPair {
    pub pair: TokenPair,
    pub search_seed: u64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupFill {
    pub group_index: usize,
    pub requested: usize,
    pub achieved: usize,
    pub attempts: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StimulusSet {
    pub pairs: Vec<StimulusPair>,
    pub fills: Vec<GroupFill>,
}

impl StimulusSet {
    pub fn under_filled(&self) -> impl Iterator<Item = &GroupFill> {
        self.fills.iter().filter(|f| f.achieved < f.requested)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMethod {
    Gcg,
    BruteForce,
}

#[derive(Clone, Debug)]
pub struct StimulusRequest<'a> {
    pub groups: &'a [SimilarityGroup],
    pub pairs_per_group: usize,
    pub layer: usize,
    /// Fresh `x_init` draws per group.
    pub restarts: usize,
    pub budget: &'a SearchBudget,
    pub method: SearchMethod,
    pub allowed: &'a BTreeSet<TokenId>,
    pub seed: u64,
}

/// Seed of the per-search generator for restart `attempt` in group `group`.
pub fn search_seed(seed: u64, group: usize, attempt: usize) -> u64 {
    crate::seed::derive(seed, &format!("search/{group}/{attempt}"))
}

/// Searches one group until it holds `pairs_per_group` distinct pairs or
/// the restarts run out.
///
/// Each restart draws `x_init` uniformly from `allowed` with a generator
/// seeded by [`search_seed`]; the same generator then shuffles candidates.
pub fn fill_group<B: Backend + ?Sized>(
    backend: &B,
    group: &SimilarityGroup,
    request: &StimulusRequest<'_>,
) -> Result<(Vec<StimulusPair>, GroupFill)> {
    let pool: Vec<TokenId> = request.allowed.iter().copied().collect();
    let mut pairs: Vec<StimulusPair> = Vec::new();
    let mut seen: HashSet<(TokenId, TokenId)> = HashSet::new();
    let mut attempts = 0;
    while pairs.len() < request.pairs_per_group && attempts < request.restarts {
        let seed = search_seed(request.seed, group.index, attempts);
        attempts += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let Some(&x) = pool.choose(&mut rng) else {
            break;
        };
        let found: Vec<(TokenPair, usize)> = match request.method {
            SearchMethod::Gcg => {
                match gcg_search(backend, x, group, request.budget, request.layer, request.allowed, &mut rng)? {
                    SearchOutcome::Found(s) => vec![(s.pair, s.iterations)],
                    SearchOutcome::NotFound(_) => Vec::new(),
                }
            }
            SearchMethod::BruteForce => brute_force_search(backend, group, x, request.allowed, request.layer)?
                .into_iter()
                .map(|p| (p, 0))
                .collect(),
        };
        for (pair, iterations) in found {
            if pairs.len() >= request.pairs_per_group {
                break;
            }
            if seen.insert((pair.x, pair.y)) {
                pairs.push(StimulusPair {
                    pair,
                    search_seed: seed,
                    iterations,
                });
            }
        }
    }
    let fill = GroupFill {
        group_index: group.index,
        requested: request.pairs_per_group,
        achieved: pairs.len(),
        attempts,
    };
    Ok((pairs, fill))
}

/// Fills every group in order. A pair's similarity places it in exactly one
/// group, so pairs never repeat across groups.
pub fn build_stimulus_set<B: Backend + ?Sized>(
    backend: &B,
    request: &StimulusRequest<'_>,
) -> Result<StimulusSet> {
    check_disjoint(request.groups)?;
    let mut set = StimulusSet::default();
    for group in request.groups {
        let (pairs, fill) = fill_group(backend, group, request)?;
        set.pairs.extend(pairs);
        set.fills.push(fill);
    }
    Ok(set)
}
