//! Llama-family decoder written directly against tensor ops, so that
//! gradients flow back to relaxed input embeddings.

use std::path::{Path, PathBuf};

use candle_core::safetensors::MmapedSafetensors;
use candle_core::{DType, Device, Tensor, D};
use icl_assoc_core::{Error, Result};

use crate::config::LlamaConfig;

pub(crate) fn tensor_err(e: candle_core::Error) -> Error {
    Error::Backend(e.to_string())
}

/// `x @ w^T (+ b)`, with `w` stored as `(out, in)`.
struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => y.broadcast_add(b),
            None => Ok(y),
        }
    }
}

struct Block {
    input_norm: Tensor,
    post_attention_norm: Tensor,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    gate: Linear,
    up: Linear,
    down: Linear,
}

pub struct LlamaModel {
    pub config: LlamaConfig,
    embedding: Tensor,
    blocks: Vec<Block>,
    norm: Tensor,
    /// `None` when tied to the embedding.
    lm_head: Option<Tensor>,
    dtype: DType,
    device: Device,
}

/// Weight files of a checkpoint directory, sorted by name.
pub fn weight_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no .safetensors files in {}", dir.display())));
    }
    Ok(files)
}

impl LlamaModel {
    /// Loads a checkpoint directory (`config.json` plus safetensors shards),
    /// converting every weight to `dtype`.
    pub fn load(dir: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let config = LlamaConfig::load(&dir.join("config.json"))?;
        let files = weight_files(dir)?;
        // The files are mapped read-only and every tensor is copied out
        // during conversion, so nothing outlives the mapping.
        let st = unsafe { MmapedSafetensors::multi(&files) }.map_err(tensor_err)?;
        let get = |name: &str| -> Result<Tensor> {
            st.load(name, device)
                .and_then(|t| t.to_dtype(dtype))
                .map_err(|e| Error::Backend(format!("weight `{name}`: {e}")))
        };
        let has = |name: &str| st.get(name).is_ok();
        let linear = |prefix: &str| -> Result<Linear> {
            let bias = format!("{prefix}.bias");
            Ok(Linear {
                weight: get(&format!("{prefix}.weight"))?,
                bias: if has(&bias) { Some(get(&bias)?) } else { None },
            })
        };

        let embedding = get("model.embed_tokens.weight")?;
        let (rows, dim) = embedding.dims2().map_err(tensor_err)?;
        if dim != config.hidden_size || rows != config.vocab_size {
            return Err(Error::Config(format!(
                "embedding is {rows}x{dim}, config says {}x{}",
                config.vocab_size, config.hidden_size
            )));
        }
        let mut blocks = Vec::with_capacity(config.num_hidden_layers);
        for i in 0..config.num_hidden_layers {
            let p = format!("model.layers.{i}");
            blocks.push(Block {
                input_norm: get(&format!("{p}.input_layernorm.weight"))?,
                post_attention_norm: get(&format!("{p}.post_attention_layernorm.weight"))?,
                q: linear(&format!("{p}.self_attn.q_proj"))?,
                k: linear(&format!("{p}.self_attn.k_proj"))?,
                v: linear(&format!("{p}.self_attn.v_proj"))?,
                o: linear(&format!("{p}.self_attn.o_proj"))?,
                gate: linear(&format!("{p}.mlp.gate_proj"))?,
                up: linear(&format!("{p}.mlp.up_proj"))?,
                down: linear(&format!("{p}.mlp.down_proj"))?,
            });
        }
        let lm_head = if has("lm_head.weight") {
            Some(get("lm_head.weight")?)
        } else if config.tie_word_embeddings {
            None
        } else {
            return Err(Error::Config("checkpoint has no lm_head.weight and untied embeddings".into()));
        };
        Ok(Self {
            norm: get("model.norm.weight")?,
            config,
            embedding,
            blocks,
            lm_head,
            dtype,
            device: device.clone(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn layer_count(&self) -> usize {
        self.blocks.len()
    }

    /// Input embeddings `(len, hidden)` for the given ids.
    pub fn embed(&self, ids: &[u32]) -> candle_core::Result<Tensor> {
        let idx = Tensor::new(ids, &self.device)?;
        self.embedding.index_select(&idx, 0)
    }

    /// `coefficients (1, vocab) @ embedding`.
    pub fn mix(&self, coefficients: &Tensor) -> candle_core::Result<Tensor> {
        coefficients.matmul(&self.embedding)
    }

    /// Next-token logits `(rows, vocab)` for final-normed states.
    pub fn logits(&self, normed: &Tensor) -> candle_core::Result<Tensor> {
        let head = self.lm_head.as_ref().unwrap_or(&self.embedding);
        normed.matmul(&head.t()?)
    }

    fn rms_norm(&self, x: &Tensor, weight: &Tensor) -> candle_core::Result<Tensor> {
        let eps = self.config.rms_norm_eps;
        let scale = (x.sqr()?.mean_keepdim(D::Minus1)? + eps)?.sqrt()?;
        x.broadcast_div(&scale)?.broadcast_mul(weight)
    }

    fn rotary(&self, len: usize) -> candle_core::Result<(Tensor, Tensor)> {
        let freqs = self.config.inverse_frequencies();
        let half = freqs.len();
        let mut cos = Vec::with_capacity(len * 2 * half);
        let mut sin = Vec::with_capacity(len * 2 * half);
        for pos in 0..len {
            for _ in 0..2 {
                for f in &freqs {
                    let a = pos as f64 * f;
                    cos.push(a.cos());
                    sin.push(a.sin());
                }
            }
        }
        let shape = (len, 2 * half);
        Ok((
            Tensor::from_vec(cos, shape, &self.device)?.to_dtype(self.dtype)?,
            Tensor::from_vec(sin, shape, &self.device)?.to_dtype(self.dtype)?,
        ))
    }

    fn mask(&self, len: usize) -> candle_core::Result<Tensor> {
        let window = self.config.attention_window();
        let mut m = vec![0.0f64; len * len];
        for i in 0..len {
            for j in 0..len {
                let outside = window.is_some_and(|w| i >= j + w);
                if j > i || outside {
                    m[i * len + j] = f64::NEG_INFINITY;
                }
            }
        }
        Tensor::from_vec(m, (len, len), &self.device)?.to_dtype(self.dtype)
    }

    fn attention(&self, b: &Block, x: &Tensor, rope: &(Tensor, Tensor), mask: &Tensor) -> candle_core::Result<Tensor> {
        let len = x.dim(0)?;
        let heads = self.config.num_attention_heads;
        let kv_heads = self.config.num_kv_heads();
        let hd = self.config.head_dim();
        let split = |t: Tensor, n: usize| -> candle_core::Result<Tensor> {
            t.reshape((len, n, hd))?.transpose(0, 1)?.contiguous()
        };
        let rotate = |t: &Tensor| -> candle_core::Result<Tensor> {
            let x1 = t.narrow(D::Minus1, 0, hd / 2)?;
            let x2 = t.narrow(D::Minus1, hd / 2, hd / 2)?;
            let rotated = Tensor::cat(&[&x2.neg()?, &x1], D::Minus1)?;
            t.broadcast_mul(&rope.0)? + rotated.broadcast_mul(&rope.1)?
        };
        let repeat = |t: Tensor| -> candle_core::Result<Tensor> {
            let n = heads / kv_heads;
            if n == 1 {
                return Ok(t);
            }
            t.unsqueeze(1)?.broadcast_as((kv_heads, n, len, hd))?.reshape((heads, len, hd))
        };

        let q = rotate(&split(b.q.forward(x)?, heads)?)?;
        let k = repeat(rotate(&split(b.k.forward(x)?, kv_heads)?)?)?;
        let v = repeat(split(b.v.forward(x)?, kv_heads)?)?;

        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?.broadcast_add(mask)?;
        let shifted = scores.broadcast_sub(&scores.max_keepdim(D::Minus1)?.detach())?;
        let e = shifted.exp()?;
        let p = e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?;
        let out = p.matmul(&v.contiguous()?)?.transpose(0, 1)?.reshape((len, heads * hd))?;
        b.o.forward(&out)
    }

    fn block(&self, b: &Block, h: &Tensor, rope: &(Tensor, Tensor), mask: &Tensor) -> candle_core::Result<Tensor> {
        let a = self.attention(b, &self.rms_norm(h, &b.input_norm)?, rope, mask)?;
        let h = (h + a)?;
        let x = self.rms_norm(&h, &b.post_attention_norm)?;
        let m = b.down.forward(&(b.gate.forward(&x)?.silu()? * b.up.forward(&x)?)?)?;
        h + m
    }

    /// Runs the decoder on input embeddings `(len, hidden)`.
    ///
    /// Returns the states at `layer` (1-based; the last layer is reported
    /// after the final norm) and, when `need_final`, the final-normed states.
    pub fn run(&self, input: Tensor, layer: usize, need_final: bool) -> candle_core::Result<(Tensor, Option<Tensor>)> {
        let total = self.blocks.len();
        let len = input.dim(0)?;
        let rope = self.rotary(len)?;
        let mask = self.mask(len)?;
        let mut h = input;
        let mut captured = None;
        for (i, b) in self.blocks.iter().enumerate() {
            h = self.block(b, &h, &rope, &mask)?;
            if i + 1 == layer && layer < total {
                captured = Some(h.clone());
                if !need_final {
                    return Ok((h, None));
                }
            }
        }
        let normed = self.rms_norm(&h, &self.norm)?;
        Ok((captured.unwrap_or_else(|| normed.clone()), Some(normed)))
    }
}
