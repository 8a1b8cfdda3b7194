//! A small seeded causal transformer in `f64` with exact reverse-mode
//! gradients. Used as a deterministic, differentiable stand-in for real
//! models.
//!
//! Each layer applies single-head causal self-attention followed by a
//! `tanh` feed-forward block, both with residual connections:
//!
//! ```text
//! g_i = h_i + Wo * sum_{j<=i} softmax_j(q_i . k_j / sqrt(d)) v_j
//! h'_i = g_i + W2 * tanh(W1 g_i + b1)
//! ```
//!
//! Inputs are token embeddings plus a fixed sinusoidal position table;
//! logits are `E h_L / sqrt(d)` with the embedding matrix tied.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    check_logit_positions, check_replaceable, vocab, Backend, BackendDescriptor, ForwardOutput,
    HiddenState, LossGradient, OutputLoss, TokenId, TokenSequence, DEFAULT_MEMORY_CAP,
};
use crate::error::{Error, Result};

pub const SYNTHETIC_BOS: TokenId = 0;
pub const SYNTHETIC_EOS: TokenId = 1;
const SYNTHETIC_MAX_CONTEXT: usize = 2048;

#[derive(Clone, Debug)]
pub struct SyntheticLayer {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct SyntheticParams {
    /// `vocab × dim`; also the output projection.
    pub embedding: Array2<f64>,
    /// `max_context × dim`, added to the input at each position.
    pub positional: Array2<f64>,
    pub layers: Vec<SyntheticLayer>,
}

impl SyntheticParams {
    pub fn generate(seed: u64, vocab: usize, dim: usize, layers: usize, max_context: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = |rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal) * scale)
        };

        // A shared direction with per-token weight gives the anisotropy seen
        // in real hidden states, spreading pair cosines over a wide range.
        let mut shared: Array1<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = shared.dot(&shared).sqrt();
        shared /= norm;
        let noise = normal(vocab, dim, 1.0 / (dim as f64).sqrt(), &mut rng);
        let mut embedding = noise;
        for mut row in embedding.axis_iter_mut(Axis(0)) {
            let weight: f64 = rng.random_range(0.0..2.5);
            row.scaled_add(weight, &shared);
        }

        let positional = Array2::from_shape_fn((max_context, dim), |(i, k)| {
            let rate = 1.0 / 10_000f64.powf((2 * (k / 2)) as f64 / dim as f64);
            let angle = i as f64 * rate;
            0.3 * if k % 2 == 0 { angle.sin() } else { angle.cos() }
        });

        let ffn = 2 * dim;
        let d_scale = 1.0 / (dim as f64).sqrt();
        let layers = (0..layers)
            .map(|_| SyntheticLayer {
                wq: normal(dim, dim, 1.5 * d_scale, &mut rng),
                wk: normal(dim, dim, 1.5 * d_scale, &mut rng),
                wv: normal(dim, dim, d_scale, &mut rng),
                wo: normal(dim, dim, 0.8 * d_scale, &mut rng),
                w1: normal(ffn, dim, d_scale, &mut rng),
                b1: (0..ffn).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect(),
                w2: normal(dim, ffn, 0.8 / (ffn as f64).sqrt(), &mut rng),
            })
            .collect();

        Self {
            embedding,
            positional,
            layers,
        }
    }

    pub fn dim(&self) -> usize {
        self.embedding.ncols()
    }
}

struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Array2<f64>,
    act: Array2<f64>,
}

fn layer_forward(p: &SyntheticLayer, h: &Array2<f64>) -> (Array2<f64>, LayerCache) {
    let n = h.nrows();
    let scale = 1.0 / (h.ncols() as f64).sqrt();
    let q = h.dot(&p.wq.t());
    let k = h.dot(&p.wk.t());
    let v = h.dot(&p.wv.t());
    let mut probs = q.dot(&k.t()) * scale;
    for i in 0..n {
        let mut row = probs.row_mut(i);
        let max = row
            .iter()
            .take(i + 1)
            .fold(f64::NEG_INFINITY, |m, &s| m.max(s));
        let mut total = 0.0;
        for (j, s) in row.iter_mut().enumerate() {
            if j <= i {
                *s = (*s - max).exp();
                total += *s;
            } else {
                *s = 0.0;
            }
        }
        row.mapv_inplace(|s| s / total);
    }
    let attended = probs.dot(&v);
    let mid = h + &attended.dot(&p.wo.t());
    let act = (mid.dot(&p.w1.t()) + &p.b1).mapv(f64::tanh);
    let out = &mid + &act.dot(&p.w2.t());
    let cache = LayerCache {
        input: h.clone(),
        q,
        k,
        v,
        probs,
        act,
    };
    (out, cache)
}

fn layer_backward(p: &SyntheticLayer, c: &LayerCache, d_out: &Array2<f64>) -> Array2<f64> {
    let scale = 1.0 / (c.input.ncols() as f64).sqrt();
    let d_act = d_out.dot(&p.w2);
    let d_pre = d_act * &c.act.mapv(|a| 1.0 - a * a);
    let d_mid = d_out + &d_pre.dot(&p.w1);
    let d_attended = d_mid.dot(&p.wo);

    let d_probs = d_attended.dot(&c.v.t());
    let d_v = c.probs.t().dot(&d_attended);
    let mut d_scores = Array2::<f64>::zeros(c.probs.raw_dim());
    for i in 0..c.probs.nrows() {
        let pr = c.probs.row(i);
        let dp = d_probs.row(i);
        let inner: f64 = pr.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
        for j in 0..=i {
            d_scores[[i, j]] = pr[j] * (dp[j] - inner);
        }
    }
    let d_q = d_scores.dot(&c.k) * scale;
    let d_k = d_scores.t().dot(&c.q) * scale;

    d_mid + d_q.dot(&p.wq) + d_k.dot(&p.wk) + d_v.dot(&p.wv)
}

/// Seeded synthetic backend addressed as `synthetic:<seed>:<vocab>:<dim>:<layers>`.
#[derive(Clone, Debug)]
pub struct SyntheticBackend {
    descriptor: BackendDescriptor,
    params: SyntheticParams,
    seed: u64,
    texts: Vec<String>,
}

impl SyntheticBackend {
    pub fn new(seed: u64, vocab: usize, dim: usize, layers: usize) -> Result<Self> {
        if vocab < 3 || dim < 2 || layers < 1 {
            return Err(Error::Config(format!(
                "synthetic backend needs vocab >= 3, dim >= 2, layers >= 1 (got {vocab}, {dim}, {layers})"
            )));
        }
        let descriptor = BackendDescriptor {
            model_id: format!("synthetic-{seed}-{vocab}-{dim}-{layers}"),
            vocab_size: vocab,
            layer_count: layers,
            max_context: SYNTHETIC_MAX_CONTEXT,
            hidden_dim: dim,
            has_bos: true,
            memory_cap: DEFAULT_MEMORY_CAP,
            revision: None,
        };
        let texts = (0..vocab).map(synthetic_token_text).collect();
        Ok(Self {
            descriptor,
            params: SyntheticParams::generate(seed, vocab, dim, layers, SYNTHETIC_MAX_CONTEXT),
            seed,
            texts,
        })
    }

    pub fn with_memory_cap(mut self, cap: usize) -> Self {
        self.descriptor.memory_cap = cap;
        self
    }

    pub fn params(&self) -> &SyntheticParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn embed(&self, seq: &TokenSequence) -> Array2<f64> {
        let dim = self.params.dim();
        let mut x = Array2::zeros((seq.len(), dim));
        for (i, &id) in seq.ids().iter().enumerate() {
            let row = &self.params.embedding.row(id as usize) + &self.params.positional.row(i);
            x.row_mut(i).assign(&row);
        }
        x
    }

    /// Runs layers `1..=upto`, returning the output of each.
    fn run(&self, input: Array2<f64>, upto: usize, caches: Option<&mut Vec<LayerCache>>) -> Vec<Array2<f64>> {
        let mut outs = Vec::with_capacity(upto);
        let mut h = input;
        let mut caches = caches;
        for layer in &self.params.layers[..upto] {
            let (out, cache) = layer_forward(layer, &h);
            if let Some(c) = caches.as_deref_mut() {
                c.push(cache);
            }
            outs.push(out.clone());
            h = out;
        }
        outs
    }

    fn logits_for(&self, h: ndarray::ArrayView1<f64>) -> Vec<f64> {
        let scale = 1.0 / (self.params.dim() as f64).sqrt();
        (self.params.embedding.dot(&h) * scale).to_vec()
    }

    fn assemble(
        &self,
        states: &[Array2<f64>],
        layer: usize,
        logit_positions: &[usize],
    ) -> ForwardOutput {
        let at_layer = &states[layer - 1];
        let last = states.last().expect("at least one layer");
        ForwardOutput {
            hidden: at_layer
                .axis_iter(Axis(0))
                .enumerate()
                .map(|(position, row)| HiddenState {
                    vector: row.to_vec(),
                    layer,
                    position,
                })
                .collect(),
            logit_positions: logit_positions.to_vec(),
            logits: logit_positions
                .iter()
                .map(|&p| self.logits_for(last.row(p)))
                .collect(),
        }
    }

    fn relaxed_input(&self, seq: &TokenSequence, position: usize, coefficients: &[f64]) -> Array2<f64> {
        let mut x = self.embed(seq);
        let coeffs = Array1::from(coefficients.to_vec());
        let mixed = self.params.embedding.t().dot(&coeffs) + self.params.positional.row(position);
        x.row_mut(position).assign(&mixed);
        x
    }
}

impl Backend for SyntheticBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn backend_id(&self) -> String {
        format!(
            "synthetic:{}:{}:{}:{}",
            self.seed, self.descriptor.vocab_size, self.descriptor.hidden_dim, self.descriptor.layer_count
        )
    }

    fn bos_id(&self) -> Option<TokenId> {
        Some(SYNTHETIC_BOS)
    }

    fn special_ids(&self) -> BTreeSet<TokenId> {
        [SYNTHETIC_BOS, SYNTHETIC_EOS].into_iter().collect()
    }

    fn token_text(&self, id: TokenId) -> Result<String> {
        self.descriptor.check_token(id)?;
        Ok(self.texts[id as usize].clone())
    }

    fn forward_at(
        &self,
        seq: &TokenSequence,
        layer: usize,
        logit_positions: &[usize],
    ) -> Result<ForwardOutput> {
        self.descriptor.check_sequence(seq, layer)?;
        check_logit_positions(seq, logit_positions)?;
        let states = self.run(self.embed(seq), self.descriptor.layer_count, None);
        Ok(self.assemble(&states, layer, logit_positions))
    }

    fn supports_gradients(&self) -> bool {
        true
    }

    fn forward_relaxed(
        &self,
        seq: &TokenSequence,
        layer: usize,
        position: usize,
        coefficients: &[f64],
    ) -> Result<ForwardOutput> {
        self.descriptor.check_sequence(seq, layer)?;
        check_replaceable(seq, position)?;
        if coefficients.len() != self.descriptor.vocab_size {
            return Err(Error::Input(format!(
                "expected {} coefficients, got {}",
                self.descriptor.vocab_size,
                coefficients.len()
            )));
        }
        let input = self.relaxed_input(seq, position, coefficients);
        let states = self.run(input, self.descriptor.layer_count, None);
        Ok(self.assemble(&states, layer, &[seq.len() - 1]))
    }

    fn input_gradient(
        &self,
        seq: &TokenSequence,
        layer: usize,
        position: usize,
        loss: &dyn OutputLoss,
    ) -> Result<Vec<f64>> {
        self.descriptor.check_sequence(seq, layer)?;
        check_replaceable(seq, position)?;
        let n = seq.len();
        let dim = self.params.dim();
        let total_layers = self.descriptor.layer_count;

        let mut caches = Vec::with_capacity(total_layers);
        let states = self.run(self.embed(seq), total_layers, Some(&mut caches));
        let output = self.assemble(&states, layer, &[n - 1]);
        let (_, grad) = loss.evaluate(&output);
        let LossGradient {
            hidden,
            final_logits,
        } = grad;

        let mut d_hidden = Array2::<f64>::zeros((n, dim));
        for (pos, g) in hidden {
            if pos >= n || g.len() != dim {
                return Err(Error::Input(format!(
                    "loss gradient for position {pos} has wrong shape"
                )));
            }
            let mut row = d_hidden.row_mut(pos);
            row += &Array1::from(g);
        }

        let mut d = Array2::<f64>::zeros((n, dim));
        if let Some(gl) = final_logits {
            if gl.len() != self.descriptor.vocab_size {
                return Err(Error::Input("logit gradient has wrong length".into()));
            }
            let scale = 1.0 / (dim as f64).sqrt();
            let back = self.params.embedding.t().dot(&Array1::from(gl)) * scale;
            d.row_mut(n - 1).assign(&back);
        }
        for l in (1..=total_layers).rev() {
            if l == layer {
                d += &d_hidden;
            }
            d = layer_backward(&self.params.layers[l - 1], &caches[l - 1], &d);
        }
        Ok(self.params.embedding.dot(&d.row(position)).to_vec())
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Pronounceable rendering for synthetic ids: `<s>`, `</s>`, then words of
/// two or more consonant-vowel syllables.
fn synthetic_token_text(id: usize) -> String {
    match id as TokenId {
        SYNTHETIC_BOS => return "<s>".into(),
        SYNTHETIC_EOS => return "</s>".into(),
        _ => {}
    }
    let base = CONSONANTS.len() * VOWELS.len();
    let mut rest = id - 2;
    let mut word = String::new();
    let mut syllables = 0;
    while syllables < 2 || rest > 0 {
        let s = rest % base;
        rest /= base;
        word.push(CONSONANTS[s / VOWELS.len()] as char);
        word.push(VOWELS[s % VOWELS.len()] as char);
        syllables += 1;
    }
    if vocab::is_stopword(&word) {
        word.push('n');
    }
    word
}
