//! Association trials: repetition sequences, per-repetition prediction
//! accuracy and pair representational change.

use std::collections::HashMap;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::backend::{argmax, cosine, Backend, BackendDescriptor, TokenId, TokenSequence};
use crate::error::{Error, Result};
use crate::search::{pair_similarity_before_learning, TokenPair};

/// Strictly increasing repetition counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct RepetitionSchedule {
    counts: Vec<usize>,
}

impl RepetitionSchedule {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.first().is_some_and(|&r| r == 0) {
            return Err(Error::Config("repetition counts must be positive".into()));
        }
        if counts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "repetition counts must be strictly increasing: {counts:?}"
            )));
        }
        Ok(Self { counts })
    }

    /// `1..=max`.
    pub fn range(max: usize) -> Self {
        Self {
            counts: (1..=max).collect(),
        }
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn max(&self) -> Option<usize> {
        self.counts.last().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Errors if the longest sequence does not fit the backend's context.
    pub fn check_fits(&self, descriptor: &BackendDescriptor) -> Result<()> {
        if let Some(r) = self.max() {
            let len = sequence_length(r, descriptor.has_bos);
            let max = descriptor.effective_context();
            if len > max {
                return Err(Error::ContextOverflow { len, max });
            }
        }
        Ok(())
    }
}

impl TryFrom<Vec<usize>> for RepetitionSchedule {
    type Error = Error;

    fn try_from(counts: Vec<usize>) -> Result<Self> {
        Self::new(counts)
    }
}

impl From<RepetitionSchedule> for Vec<usize> {
    fn from(s: RepetitionSchedule) -> Self {
        s.counts
    }
}

/// Length of the repetition-`r` sequence including BOS.
pub fn sequence_length(r: usize, bos: bool) -> usize {
    2 * r - 1 + usize::from(bos)
}

/// `[BOS, x, y, x, y, ..., x]` with `r` occurrences of `x`.
pub fn build_sequence<B: Backend + ?Sized>(
    backend: &B,
    x: TokenId,
    y: TokenId,
    r: usize,
) -> Result<TokenSequence> {
    if r == 0 {
        return Err(Error::OutOfRange("repetition count must be at least 1".into()));
    }
    let desc = backend.descriptor();
    desc.check_token(x)?;
    desc.check_token(y)?;
    let bos = backend.bos_id();
    let len = sequence_length(r, bos.is_some());
    let max = desc.effective_context();
    if len > max {
        return Err(Error::ContextOverflow { len, max });
    }
    let body: Vec<TokenId> = (0..2 * r - 1).map(|i| if i % 2 == 0 { x } else { y }).collect();
    Ok(TokenSequence::from_body(bos, &body))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRecord {
    pub r: usize,
    pub predicted: TokenId,
    pub correct: bool,
    pub pair_cosine: f64,
    pub delta_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionTrace {
    pub backend_id: String,
    pub pair: TokenPair,
    pub layer: usize,
    pub records: Vec<RepetitionRecord>,
}

impl RepetitionTrace {
    pub fn schedule(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.r).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct CacheKey {
    backend: String,
    layer: usize,
    x: TokenId,
    y: TokenId,
    r: usize,
}

/// Per-repetition observations shared across schedules and threads.
#[derive(Debug, Default)]
pub struct TraceCache {
    entries: RwLock<HashMap<CacheKey, (TokenId, f64)>>,
}

impl TraceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, key: &CacheKey) -> Option<(TokenId, f64)> {
        self.entries.read().get(key).copied()
    }

    fn insert(&self, key: CacheKey, value: (TokenId, f64)) {
        self.entries.write().insert(key, value);
    }
}

/// Prediction and pair cosine after `r` presentations of `x`.
///
/// At `r = 1` the cosine is the before-learning similarity; later it pairs
/// the last `x` (body position `2r - 2`) with the last `y` (`2r - 3`).
fn observe<B: Backend + ?Sized>(
    backend: &B,
    x: TokenId,
    y: TokenId,
    r: usize,
    layer: usize,
) -> Result<(TokenId, f64)> {
    let seq = build_sequence(backend, x, y, r)?;
    let out = backend.forward(&seq, layer)?;
    let predicted = argmax(out.final_logits());
    let cos = if r == 1 {
        pair_similarity_before_learning(backend, x, y, layer)?
    } else {
        let off = seq.body_offset();
        cosine(
            &out.hidden[off + 2 * r - 2].vector,
            &out.hidden[off + 2 * r - 3].vector,
        )
    };
    Ok((predicted, cos))
}

/// Runs one association trial over `schedule`.
pub fn run_trial<B: Backend + ?Sized>(
    backend: &B,
    pair: &TokenPair,
    schedule: &RepetitionSchedule,
    layer: usize,
    cache: Option<&TraceCache>,
) -> Result<RepetitionTrace> {
    let backend_id = backend.backend_id();
    let desc = backend.descriptor();
    desc.check_layer(layer)?;
    schedule.check_fits(desc)?;

    let lookup = |r: usize| -> Result<(TokenId, f64)> {
        let key = CacheKey {
            backend: backend_id.clone(),
            layer,
            x: pair.x,
            y: pair.y,
            r,
        };
        if let Some(hit) = cache.and_then(|c| c.get(&key)) {
            return Ok(hit);
        }
        let value = observe(backend, pair.x, pair.y, r, layer)?;
        if let Some(c) = cache {
            c.insert(key, value);
        }
        Ok(value)
    };

    let mut records = Vec::with_capacity(schedule.counts().len());
    if !schedule.is_empty() {
        let (_, first) = lookup(1)?;
        for &r in schedule.counts() {
            let (predicted, pair_cosine) = lookup(r)?;
            records.push(RepetitionRecord {
                r,
                predicted,
                correct: predicted == pair.y,
                pair_cosine,
                delta_s: if r == 1 { 0.0 } else { pair_cosine - first },
            });
        }
    }
    Ok(RepetitionTrace {
        backend_id,
        pair: pair.clone(),
        layer,
        records,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub r: usize,
    pub accuracy: f64,
    pub n: usize,
}

/// Mean correctness per repetition across traces sharing one schedule.
pub fn accuracy_curve(traces: &[RepetitionTrace]) -> Result<Vec<AccuracyPoint>> {
    let Some(first) = traces.first() else {
        return Ok(Vec::new());
    };
    let schedule = first.schedule();
    if let Some(bad) = traces.iter().find(|t| t.schedule() != schedule) {
        return Err(Error::Aggregation(format!(
            "trace for ({}, {}) has schedule {:?}, expected {:?}",
            bad.pair.x,
            bad.pair.y,
            bad.schedule(),
            schedule
        )));
    }
    let n = traces.len();
    Ok(schedule
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let hits = traces.iter().filter(|t| t.records[i].correct).count();
            AccuracyPoint {
                r,
                accuracy: hits as f64 / n as f64,
                n,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockPairRule, MockScript, MockToken, SyntheticBackend};

    fn pair(x: TokenId, y: TokenId) -> TokenPair {
        TokenPair {
            x,
            y,
            before_sim: 0.0,
            group_index: None,
            layer: 1,
            interference: None,
        }
    }

    fn mock() -> MockBackend {
        let tokens = ["<s>", "apple", "river", "stone"]
            .iter()
            .enumerate()
            .map(|(i, t)| MockToken {
                text: t.to_string(),
                special: i == 0,
            })
            .collect();
        MockBackend::from_script(MockScript {
            model_id: "engine".into(),
            hidden_dim: 6,
            layer_count: 1,
            max_context: 32,
            seed: 1,
            tokens,
            bos: Some(0),
            prefixes: vec![],
            pairs: vec![MockPairRule {
                x: 1,
                y: 2,
                before_sim: 0.5,
                correct_from: Some(2),
                correct: vec![],
                wrong: None,
                deltas: vec![],
            }],
        })
        .unwrap()
    }

    #[test]
    fn sequences_alternate_without_separators() {
        let b = SyntheticBackend::new(1, 10, 4, 1).unwrap();
        assert_eq!(build_sequence(&b, 3, 5, 3).unwrap().ids(), &[0, 3, 5, 3, 5, 3]);
        assert_eq!(build_sequence(&b, 3, 5, 1).unwrap().ids(), &[0, 3]);
        assert_eq!(build_sequence(&b, 3, 5, 2).unwrap().body().len(), 3);
        let capped = SyntheticBackend::new(1, 10, 4, 1).unwrap().with_memory_cap(6);
        assert!(build_sequence(&capped, 3, 5, 3).is_ok());
        assert!(matches!(
            build_sequence(&capped, 3, 5, 4),
            Err(Error::ContextOverflow { len: 8, max: 6 })
        ));
    }

    #[test]
    fn schedule_validation() {
        assert!(RepetitionSchedule::new(vec![1, 2, 5]).is_ok());
        assert!(RepetitionSchedule::new(vec![1, 1]).is_err());
        assert!(RepetitionSchedule::new(vec![0, 1]).is_err());
        assert!(RepetitionSchedule::new(vec![3, 2]).is_err());
        let parsed: RepetitionSchedule = serde_json::from_str("[1, 4, 9]").unwrap();
        assert_eq!(parsed.counts(), &[1, 4, 9]);
        assert!(serde_json::from_str::<RepetitionSchedule>("[2, 2]").is_err());
    }

    #[test]
    fn scripted_step_accuracy() {
        let b = mock();
        let trace = run_trial(&b, &pair(1, 2), &RepetitionSchedule::range(5), 1, None).unwrap();
        let flags: Vec<bool> = trace.records.iter().map(|r| r.correct).collect();
        assert_eq!(flags, [false, true, true, true, true]);
        assert_eq!(trace.records[0].delta_s, 0.0);
        assert!((trace.records[0].pair_cosine - 0.5).abs() < 1e-12);
        let curve = accuracy_curve(&[trace]).unwrap();
        assert_eq!(curve[0].accuracy, 0.0);
        assert_eq!(curve[4].accuracy, 1.0);
    }

    #[test]
    fn empty_schedule_gives_empty_trace() {
        let b = mock();
        let sched = RepetitionSchedule::new(vec![]).unwrap();
        assert!(run_trial(&b, &pair(1, 2), &sched, 1, None).unwrap().records.is_empty());
    }

    #[test]
    fn first_record_matches_before_learning_similarity() {
        let b = SyntheticBackend::new(7, 40, 8, 2).unwrap();
        let sched = RepetitionSchedule::new(vec![1, 3, 6]).unwrap();
        for (x, y) in [(3, 5), (7, 7), (12, 30)] {
            let t = run_trial(&b, &pair(x, y), &sched, 2, None).unwrap();
            assert_eq!(t.records[0].pair_cosine, pair_similarity_before_learning(&b, x, y, 2).unwrap());
            for rec in &t.records {
                assert!((rec.delta_s - (rec.pair_cosine - t.records[0].pair_cosine)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cache_reuse_is_transparent() {
        let b = SyntheticBackend::new(3, 30, 8, 1).unwrap();
        let cache = TraceCache::new();
        let a = run_trial(&b, &pair(4, 9), &RepetitionSchedule::range(4), 1, Some(&cache)).unwrap();
        assert_eq!(cache.len(), 4);
        let sub = RepetitionSchedule::new(vec![2, 4]).unwrap();
        let c = run_trial(&b, &pair(4, 9), &sub, 1, Some(&cache)).unwrap();
        assert_eq!(cache.len(), 4);
        assert_eq!(c.records[0], a.records[1]);
        assert_eq!(c.records[1], a.records[3]);
        let fresh = run_trial(&b, &pair(4, 9), &RepetitionSchedule::range(4), 1, None).unwrap();
        assert_eq!(fresh, a);
    }

    #[test]
    fn accuracy_means_and_schedule_mismatch() {
        let rec = |r, correct| RepetitionRecord {
            r,
            predicted: 0,
            correct,
            pair_cosine: 0.0,
            delta_s: 0.0,
        };
        let t = |records| RepetitionTrace {
            backend_id: "b".into(),
            pair: pair(1, 2),
            layer: 1,
            records,
        };
        let a = t(vec![rec(1, true), rec(2, true)]);
        let b = t(vec![rec(1, false), rec(2, true)]);
        let curve = accuracy_curve(&[a.clone(), b]).unwrap();
        assert_eq!(curve[0].accuracy, 0.5);
        assert_eq!(curve[1].accuracy, 1.0);
        assert!(curve.iter().all(|p| p.n == 2));
        let c = t(vec![rec(1, true), rec(3, true)]);
        assert!(matches!(accuracy_curve(&[a, c]), Err(Error::Aggregation(_))));
    }
}
