//! Model backends: a uniform view over causal language models.
//!
//! Every backend exposes tokenization views, hidden states at a chosen
//! layer, next-token logits and (optionally) gradients of a scalar loss
//! with respect to relaxed token-selection coefficients at one position.

mod mock;
mod synthetic;
mod uri;
mod vocab;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mock::{DeltaSpan, MockBackend, MockPairRule, MockPrefixRule, MockScript, MockToken};
pub use synthetic::{SyntheticBackend, SyntheticLayer, SyntheticParams};
pub use uri::{BackendFactory, BackendOptions, BackendUri, DefaultBackendFactory};
pub use vocab::{filtered_vocabulary, load_allowlist, TextClass, VocabularyFilter, STOPWORDS_EN};

pub type TokenId = u32;

/// Default cap on sequence length imposed by available memory, in tokens.
pub const DEFAULT_MEMORY_CAP: usize = 40_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub model_id: String,
    pub vocab_size: usize,
    pub layer_count: usize,
    pub max_context: usize,
    pub hidden_dim: usize,
    pub has_bos: bool,
    pub memory_cap: usize,
    /// Content hash or revision of the model weights, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision: Option<String>,
}

impl BackendDescriptor {
    /// `min(max_context, memory_cap)`.
    pub fn effective_context(&self) -> usize {
        self.max_context.min(self.memory_cap)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.layer_count < 1 || self.max_context < 2 || self.hidden_dim < 1
        {
            return Err(Error::Backend(format!("invalid descriptor: {self:?}")));
        }
        Ok(())
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.layer_count {
            return Err(Error::LayerOutOfRange {
                layer,
                layer_count: self.layer_count,
            });
        }
        Ok(())
    }

    pub fn check_token(&self, id: TokenId) -> Result<()> {
        if id as usize >= self.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Validates a forward request against this descriptor.
    pub fn check_sequence(&self, seq: &TokenSequence, layer: usize) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if seq.len() > self.effective_context() {
            return Err(Error::ContextOverflow {
                len: seq.len(),
                max: self.effective_context(),
            });
        }
        self.check_layer(layer)?;
        seq.ids().iter().try_for_each(|&id| self.check_token(id))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    bos_included: bool,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, bos_included: bool) -> Self {
        Self { ids, bos_included }
    }

    /// `[bos, body...]` when a BOS id is given, otherwise just the body.
    pub fn from_body(bos: Option<TokenId>, body: &[TokenId]) -> Self {
        let mut ids = Vec::with_capacity(body.len() + 1);
        ids.extend(bos);
        ids.extend_from_slice(body);
        Self {
            ids,
            bos_included: bos.is_some(),
        }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn bos_included(&self) -> bool {
        self.bos_included
    }

    /// Offset of the first body token (1 when BOS is present).
    pub fn body_offset(&self) -> usize {
        usize::from(self.bos_included)
    }

    pub fn body(&self) -> &[TokenId] {
        &self.ids[self.body_offset()..]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub vector: Vec<f64>,
    pub layer: usize,
    pub position: usize,
}

impl HiddenState {
    pub fn cosine(&self, other: &HiddenState) -> f64 {
        cosine(&self.vector, &other.vector)
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Gradient of [`cosine`] with respect to `b`.
pub fn cosine_grad_wrt_second(a: &[f64], b: &[f64]) -> Vec<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb2 = b.iter().map(|x| x * x).sum::<f64>();
    let nb = nb2.sqrt();
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let s = dot / (na * nb);
    a.iter()
        .zip(b)
        .map(|(x, y)| x / (na * nb) - s * y / nb2)
        .collect()
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// One state per input position, at the requested layer.
    pub hidden: Vec<HiddenState>,
    /// Positions whose next-token logits were computed, ascending.
    pub logit_positions: Vec<usize>,
    /// Logits for each entry of `logit_positions`.
    pub logits: Vec<Vec<f64>>,
}

impl ForwardOutput {
    /// Logits after the final input position.
    pub fn final_logits(&self) -> &[f64] {
        self.logits.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn logits_at(&self, position: usize) -> Option<&[f64]> {
        self.logit_positions
            .iter()
            .position(|&p| p == position)
            .map(|i| self.logits[i].as_slice())
    }
}

/// Greedy argmax; ties resolve to the smallest id.
pub fn argmax(logits: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Gradient of a loss with respect to the forward outputs.
///
/// Positions not listed have zero gradient. `final_logits` refers to the
/// logits after the last input position.
#[derive(Clone, Debug, Default)]
pub struct LossGradient {
    pub hidden: Vec<(usize, Vec<f64>)>,
    pub final_logits: Option<Vec<f64>>,
}

/// A scalar loss over forward outputs, together with its output gradient.
pub trait OutputLoss {
    fn evaluate(&self, output: &ForwardOutput) -> (f64, LossGradient);
}

impl<F> OutputLoss for F
where
    F: Fn(&ForwardOutput) -> (f64, LossGradient),
{
    fn evaluate(&self, output: &ForwardOutput) -> (f64, LossGradient) {
        self(output)
    }
}

/// A causal language model.
///
/// Instances are used by one caller at a time; parallel work uses
/// separate instances.
pub trait Backend: Send {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Identifier recorded in exports (usually the backend URI).
    fn backend_id(&self) -> String;

    fn bos_id(&self) -> Option<TokenId>;

    /// BOS, EOS, padding and any other control tokens.
    fn special_ids(&self) -> BTreeSet<TokenId>;

    /// Surface rendering of a single token.
    fn token_text(&self, id: TokenId) -> Result<String>;

    /// Whether the token's rendering re-tokenizes to exactly this token.
    fn is_single_token(&self, id: TokenId) -> bool {
        let _ = id;
        true
    }

    /// Forward pass returning hidden states at every position for `layer`
    /// and next-token logits after each position in `logit_positions`.
    fn forward_at(
        &self,
        seq: &TokenSequence,
        layer: usize,
        logit_positions: &[usize],
    ) -> Result<ForwardOutput>;

    /// Forward pass with logits after the final position only.
    fn forward(&self, seq: &TokenSequence, layer: usize) -> Result<ForwardOutput> {
        let last = seq.len().saturating_sub(1);
        self.forward_at(seq, layer, &[last])
    }

    fn supports_gradients(&self) -> bool {
        false
    }

    /// Forward pass where the input at `position` is the mixture
    /// `sum_v coefficients[v] * embedding(v)` instead of a single token.
    fn forward_relaxed(
        &self,
        seq: &TokenSequence,
        layer: usize,
        position: usize,
        coefficients: &[f64],
    ) -> Result<ForwardOutput> {
        let _ = (seq, layer, position, coefficients);
        Err(Error::Capability("relaxed forward passes"))
    }

    /// Gradient of `loss` with respect to the token-selection coefficients
    /// at `position`, evaluated at the one-hot selection of the current token.
    fn input_gradient(
        &self,
        seq: &TokenSequence,
        layer: usize,
        position: usize,
        loss: &dyn OutputLoss,
    ) -> Result<Vec<f64>> {
        let _ = (seq, layer, position, loss);
        Err(Error::Capability("input gradients"))
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }
    fn bos_id(&self) -> Option<TokenId> {
        (**self).bos_id()
    }
    fn special_ids(&self) -> BTreeSet<TokenId> {
        (**self).special_ids()
    }
    fn token_text(&self, id: TokenId) -> Result<String> {
        (**self).token_text(id)
    }
    fn is_single_token(&self, id: TokenId) -> bool {
        (**self).is_single_token(id)
    }
    fn forward_at(
        &self,
        seq: &TokenSequence,
        layer: usize,
        logit_positions: &[usize],
    ) -> Result<ForwardOutput> {
        (**self).forward_at(seq, layer, logit_positions)
    }
    fn forward(&self, seq: &TokenSequence, layer: usize) -> Result<ForwardOutput> {
        (**self).forward(seq, layer)
    }
    fn supports_gradients(&self) -> bool {
        (**self).supports_gradients()
    }
    fn forward_relaxed(
        &self,
        seq: &TokenSequence,
        layer: usize,
        position: usize,
        coefficients: &[f64],
    ) -> Result<ForwardOutput> {
        (**self).forward_relaxed(seq, layer, position, coefficients)
    }
    fn input_gradient(
        &self,
        seq: &TokenSequence,
        layer: usize,
        position: usize,
        loss: &dyn OutputLoss,
    ) -> Result<Vec<f64>> {
        (**self).input_gradient(seq, layer, position, loss)
    }
}

/// Checks that `position` holds a replaceable (non-BOS) token.
pub fn check_replaceable(seq: &TokenSequence, position: usize) -> Result<()> {
    if position >= seq.len() || position < seq.body_offset() {
        return Err(Error::OutOfRange(format!(
            "position {position} is not a replaceable token in a sequence of length {}",
            seq.len()
        )));
    }
    Ok(())
}

/// Validates requested logit positions: within range, strictly ascending.
pub fn check_logit_positions(seq: &TokenSequence, positions: &[usize]) -> Result<()> {
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input("logit positions must be strictly ascending".into()));
    }
    if let Some(&p) = positions.last() {
        if p >= seq.len() {
            return Err(Error::OutOfRange(format!(
                "logit position {p} beyond sequence length {}",
                seq.len()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_of_vector_with_itself_is_one() {
        let v = [0.3, -1.7, 2.5, 1e-3];
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let a = [0.4, -0.2, 0.9];
        let b = [1.1, 0.3, -0.5];
        let g = cosine_grad_wrt_second(&a, &b);
        for k in 0..3 {
            let eps = 1e-6;
            let mut bp = b;
            let mut bm = b;
            bp[k] += eps;
            bm[k] -= eps;
            let fd = (cosine(&a, &bp) - cosine(&a, &bm)) / (2.0 * eps);
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn argmax_prefers_lowest_id_on_ties() {
        assert_eq!(argmax(&[0.0, 2.0, 2.0, 1.0]), 1);
    }

    #[test]
    fn sequence_body_skips_bos() {
        let s = TokenSequence::from_body(Some(0), &[4, 5]);
        assert_eq!(s.ids(), &[0, 4, 5]);
        assert_eq!(s.body(), &[4, 5]);
        let s = TokenSequence::from_body(None, &[4, 5]);
        assert_eq!(s.body(), &[4, 5]);
    }
}
