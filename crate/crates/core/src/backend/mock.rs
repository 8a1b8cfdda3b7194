//! Scripted backend for golden pipeline tests.
//!
//! A script maps exact sequence prefixes to hidden vectors and next-token
//! predictions, and can program whole association trials through pair
//! rules. Anything not scripted falls back to deterministic pseudo-random
//! unit vectors derived from the prefix.
//!
//! Pair rule geometry, for a rule `(x, y, before_sim = b)`:
//! * `h(y_k)` for every occurrence `k` is `b * u_x + sqrt(1 - b^2) * w`, with
//!   `u_x` the (unit) state of `x` in `[BOS, x]` and `w` a unit vector
//!   orthogonal to it, so `cos(h_x1, h_y1) = b`.
//! * `h(x_k)` for `k >= 2` is placed at cosine `clamp(b + delta(k))` from `h(y)`,
//!   where `delta(k)` comes from the rule's `deltas` spans (0 elsewhere).

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    check_logit_positions, Backend, BackendDescriptor, ForwardOutput, HiddenState, TokenId,
    TokenSequence, DEFAULT_MEMORY_CAP,
};
use crate::error::{Error, Result};

fn default_dim() -> usize {
    8
}
fn default_layers() -> usize {
    1
}
fn default_context() -> usize {
    4096
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockToken {
    pub text: String,
    #[serde(default)]
    pub special: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockPrefixRule {
    /// Exact prefix, BOS included when the script has one.
    pub tokens: Vec<TokenId>,
    /// State of the prefix's last position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<f64>>,
    /// Restricts `hidden` to one layer; all layers otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    /// Full next-token logits after the prefix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
    /// Shorthand for one-hot logits on this token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predict: Option<TokenId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaSpan {
    pub from: usize,
    pub to: usize,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockPairRule {
    pub x: TokenId,
    pub y: TokenId,
    pub before_sim: f64,
    /// Repetition from which `y` is predicted after the cue.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_from: Option<usize>,
    /// Inclusive repetition ranges where `y` is predicted.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub correct: Vec<[usize; 2]>,
    /// Prediction when not correct; defaults to `x` (or BOS when `x == y`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wrong: Option<TokenId>,
    /// Pair-cosine offsets from `before_sim` by repetition; first match wins.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deltas: Vec<DeltaSpan>,
}

impl MockPairRule {
    pub fn is_correct_at(&self, r: usize) -> bool {
        self.correct_from.is_some_and(|f| r >= f)
            || self.correct.iter().any(|[a, b]| (*a..=*b).contains(&r))
    }

    pub fn delta_at(&self, r: usize) -> f64 {
        self.deltas
            .iter()
            .find(|s| (s.from..=s.to).contains(&r))
            .map_or(0.0, |s| s.delta)
    }

    /// Scripted pair cosine at repetition `r`.
    pub fn pair_cosine_at(&self, r: usize) -> f64 {
        if r <= 1 {
            self.before_sim
        } else {
            (self.before_sim + self.delta_at(r)).clamp(-1.0, 1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    pub model_id: String,
    #[serde(default = "default_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_layers")]
    pub layer_count: usize,
    #[serde(default = "default_context")]
    pub max_context: usize,
    #[serde(default)]
    pub seed: u64,
    pub tokens: Vec<MockToken>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bos: Option<TokenId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prefixes: Vec<MockPrefixRule>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<MockPairRule>,
}

impl MockScript {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Input(format!("mock script: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("mock script serializes")
    }
}

#[derive(Clone, Debug)]
pub struct MockBackend {
    script: MockScript,
    descriptor: BackendDescriptor,
    id: String,
    prefix_index: HashMap<Vec<TokenId>, Vec<usize>>,
    pair_index: HashMap<(TokenId, TokenId), usize>,
}

impl MockBackend {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_script(MockScript::from_toml(&text)?)
    }

    /// The backend id is `mock:<model_id>`, independent of where the
    /// script lives.
    pub fn from_script(script: MockScript) -> Result<Self> {
        let id = format!("mock:{}", script.model_id);
        let vocab = script.tokens.len();
        let dim = script.hidden_dim;
        let bad = |msg: String| Err(Error::Input(format!("mock script: {msg}")));
        if dim < 3 {
            return bad(format!("hidden_dim must be >= 3, got {dim}"));
        }
        let in_vocab = |t: TokenId| (t as usize) < vocab;
        if let Some(b) = script.bos {
            if !in_vocab(b) {
                return bad(format!("bos id {b} outside vocabulary"));
            }
        }
        let mut prefix_index: HashMap<Vec<TokenId>, Vec<usize>> = HashMap::new();
        for (i, rule) in script.prefixes.iter().enumerate() {
            if rule.tokens.is_empty() || !rule.tokens.iter().all(|&t| in_vocab(t)) {
                return bad(format!("prefix rule {i} has empty or out-of-range tokens"));
            }
            if let Some(h) = &rule.hidden {
                if h.len() != dim || h.iter().all(|&v| v == 0.0) || !h.iter().all(|v| v.is_finite()) {
                    return bad(format!("prefix rule {i} hidden vector must be finite, non-zero, length {dim}"));
                }
            }
            if rule.logits.as_ref().is_some_and(|l| l.len() != vocab) {
                return bad(format!("prefix rule {i} logits must have length {vocab}"));
            }
            if rule.predict.is_some_and(|p| !in_vocab(p)) {
                return bad(format!("prefix rule {i} predicts an out-of-range token"));
            }
            prefix_index.entry(rule.tokens.clone()).or_default().push(i);
        }
        let mut pair_index = HashMap::new();
        for (i, rule) in script.pairs.iter().enumerate() {
            if !in_vocab(rule.x) || !in_vocab(rule.y) || rule.wrong.is_some_and(|w| !in_vocab(w)) {
                return bad(format!("pair rule {i} uses out-of-range tokens"));
            }
            if !(-1.0..=1.0).contains(&rule.before_sim) {
                return bad(format!("pair rule {i} before_sim outside [-1, 1]"));
            }
            if pair_index.insert((rule.x, rule.y), i).is_some() {
                return bad(format!("duplicate pair rule for ({}, {})", rule.x, rule.y));
            }
        }
        let descriptor = BackendDescriptor {
            model_id: script.model_id.clone(),
            vocab_size: vocab,
            layer_count: script.layer_count,
            max_context: script.max_context,
            hidden_dim: dim,
            has_bos: script.bos.is_some(),
            memory_cap: DEFAULT_MEMORY_CAP,
            revision: None,
        };
        descriptor.validate()?;
        Ok(Self {
            script,
            descriptor,
            id,
            prefix_index,
            pair_index,
        })
    }

    pub fn with_memory_cap(mut self, cap: usize) -> Self {
        self.descriptor.memory_cap = cap;
        self
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    fn offset(&self) -> usize {
        usize::from(self.script.bos.is_some())
    }

    fn hashed_unit(&self, tag: &str, tokens: &[TokenId], extra: u64) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.script.seed.to_le_bytes());
        hasher.update(tag.as_bytes());
        hasher.update(extra.to_le_bytes());
        for t in tokens {
            hasher.update(t.to_le_bytes());
        }
        let seed: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let v: Vec<f64> = (0..self.descriptor.hidden_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        normalized(&v)
    }

    fn prefix_rule_hidden(&self, prefix: &[TokenId], layer: usize) -> Option<&Vec<f64>> {
        let rules = self.prefix_index.get(prefix)?;
        let mut fallback = None;
        for &i in rules {
            let rule = &self.script.prefixes[i];
            match (&rule.hidden, rule.layer) {
                (Some(h), Some(l)) if l == layer => return Some(h),
                (Some(h), None) => fallback = fallback.or(Some(h)),
                _ => {}
            }
        }
        fallback
    }

    /// Pair rule and 1-based body length, when the body alternates `x, y, x, ...`.
    fn pair_pattern(&self, prefix: &[TokenId]) -> Option<(&MockPairRule, usize)> {
        let body = prefix.get(self.offset()..)?;
        if body.len() < 2 || (self.script.bos.is_some() && prefix[0] != self.script.bos?) {
            return None;
        }
        let rule = &self.script.pairs[*self.pair_index.get(&(body[0], body[1]))?];
        let alternates = body
            .iter()
            .enumerate()
            .all(|(i, &t)| t == if i % 2 == 0 { rule.x } else { rule.y });
        alternates.then_some((rule, body.len()))
    }

    fn state(&self, prefix: &[TokenId], layer: usize) -> Vec<f64> {
        if let Some(h) = self.prefix_rule_hidden(prefix, layer) {
            return h.clone();
        }
        if let Some((rule, len)) = self.pair_pattern(prefix) {
            let offset = self.offset();
            let u_x = normalized(&self.state(&prefix[..=offset], layer));
            let w = orthogonal_unit(&u_x, &self.hashed_unit("pair-y", &[rule.x, rule.y], 0));
            let b = rule.before_sim;
            let h_y = combine(b, &u_x, &w);
            if len % 2 == 0 {
                return h_y;
            }
            let r = len.div_ceil(2);
            let c = rule.pair_cosine_at(r);
            let w2 = orthogonal_unit(&h_y, &self.hashed_unit("pair-x", &[rule.x, rule.y], r as u64));
            return combine(c, &normalized(&h_y), &w2);
        }
        self.hashed_unit("state", prefix, 0)
    }

    fn wrong_prediction(&self, rule: &MockPairRule) -> TokenId {
        rule.wrong.unwrap_or(if rule.x != rule.y {
            rule.x
        } else {
            self.script.bos.unwrap_or(0)
        })
    }

    fn logits(&self, prefix: &[TokenId]) -> Vec<f64> {
        let vocab = self.descriptor.vocab_size;
        let one_hot = |t: TokenId| {
            let mut l = vec![0.0; vocab];
            l[t as usize] = 1.0;
            l
        };
        if let Some(rules) = self.prefix_index.get(prefix) {
            for &i in rules {
                let rule = &self.script.prefixes[i];
                if let Some(l) = &rule.logits {
                    return l.clone();
                }
                if let Some(p) = rule.predict {
                    return one_hot(p);
                }
            }
        }
        if let Some((rule, len)) = self.pair_pattern(prefix) {
            if len % 2 == 1 {
                let r = len.div_ceil(2);
                if rule.is_correct_at(r) {
                    return one_hot(rule.y);
                }
                return one_hot(self.wrong_prediction(rule));
            }
        }
        if prefix.len() == self.offset() + 1 {
            // [BOS, x] is repetition 1 of every rule cued by x; the first
            // such rule decides.
            if let Some(rule) = self.script.pairs.iter().find(|p| p.x == prefix[self.offset()]) {
                return one_hot(if rule.is_correct_at(1) {
                    rule.y
                } else {
                    self.wrong_prediction(rule)
                });
            }
        }
        let mut hasher = Sha256::new();
        hasher.update(self.script.seed.to_le_bytes());
        hasher.update(b"logits");
        for t in prefix {
            hasher.update(t.to_le_bytes());
        }
        let seed: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..vocab).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Component of `v` orthogonal to unit vector `u`, normalized.
fn orthogonal_unit(u: &[f64], v: &[f64]) -> Vec<f64> {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let w: Vec<f64> = v.iter().zip(u).map(|(b, a)| b - dot * a).collect();
    normalized(&w)
}

/// `c * u + sqrt(1 - c^2) * w` for orthonormal `u`, `w`.
fn combine(c: f64, u: &[f64], w: &[f64]) -> Vec<f64> {
    let s = (1.0 - c * c).max(0.0).sqrt();
    u.iter().zip(w).map(|(a, b)| c * a + s * b).collect()
}

impl Backend for MockBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn backend_id(&self) -> String {
        self.id.clone()
    }

    fn bos_id(&self) -> Option<TokenId> {
        self.script.bos
    }

    fn special_ids(&self) -> BTreeSet<TokenId> {
        self.script
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.special)
            .map(|(i, _)| i as TokenId)
            .chain(self.script.bos)
            .collect()
    }

    fn token_text(&self, id: TokenId) -> Result<String> {
        self.descriptor.check_token(id)?;
        Ok(self.script.tokens[id as usize].text.clone())
    }

    fn forward_at(
        &self,
        seq: &TokenSequence,
        layer: usize,
        logit_positions: &[usize],
    ) -> Result<ForwardOutput> {
        self.descriptor.check_sequence(seq, layer)?;
        check_logit_positions(seq, logit_positions)?;
        if seq.bos_included() != self.script.bos.is_some()
            || (seq.bos_included() && seq.ids()[0] != self.script.bos.unwrap_or_default())
        {
            return Err(Error::Input("sequence BOS does not match the mock script".into()));
        }
        let ids = seq.ids();
        Ok(ForwardOutput {
            hidden: (0..ids.len())
                .map(|p| HiddenState {
                    vector: self.state(&ids[..=p], layer),
                    layer,
                    position: p,
                })
                .collect(),
            logit_positions: logit_positions.to_vec(),
            logits: logit_positions.iter().map(|&p| self.logits(&ids[..=p])).collect(),
        })
    }
}
