//! Tiny deterministic checkpoints in the Hugging Face layout.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde_json::{json, Value};

pub const TOKENIZER_WORDS: usize = 60;

#[derive(Clone, Debug)]
pub struct Tiny {
    pub model_type: &'static str,
    pub vocab: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub bias: bool,
    pub tied: bool,
    pub extra: Value,
}

impl Default for Tiny {
    fn default() -> Self {
        Self {
            model_type: "llama",
            vocab: 64,
            hidden: 16,
            intermediate: 32,
            layers: 3,
            heads: 4,
            kv_heads: 2,
            bias: false,
            tied: false,
            extra: json!({}),
        }
    }
}

/// Splitmix-style generator in `[-1, 1)`.
struct Values(u64);

impl Values {
    fn next(&mut self) -> f32 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        ((z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) as f32
    }

    fn tensor(&mut self, rows: usize, cols: usize, scale: f32, offset: f32) -> Tensor {
        let v: Vec<f32> = (0..rows * cols).map(|_| offset + scale * self.next()).collect();
        if rows == 1 {
            Tensor::from_vec(v, cols, &Device::Cpu).unwrap()
        } else {
            Tensor::from_vec(v, (rows, cols), &Device::Cpu).unwrap()
        }
    }
}

pub fn word(i: usize) -> String {
    let letters = b"bdfgklmnprstvz";
    let vowels = b"aeiou";
    let mut s = String::new();
    let mut n = i;
    for _ in 0..2 {
        s.push(letters[n % letters.len()] as char);
        n /= letters.len();
        s.push(vowels[n % vowels.len()] as char);
    }
    s
}

fn tokenizer_json() -> Value {
    let special = |id: u32, content: &str| {
        json!({"id": id, "content": content, "single_word": false, "lstrip": false,
               "rstrip": false, "normalized": false, "special": true})
    };
    let mut vocab = serde_json::Map::new();
    for (id, s) in ["<unk>", "<s>", "</s>"].iter().enumerate() {
        vocab.insert(s.to_string(), json!(id));
    }
    for i in 3..TOKENIZER_WORDS {
        vocab.insert(word(i), json!(i));
    }
    json!({
        "version": "1.0", "truncation": null, "padding": null,
        "added_tokens": [special(0, "<unk>"), special(1, "<s>"), special(2, "</s>")],
        "normalizer": null,
        "pre_tokenizer": {"type": "Whitespace"},
        "post_processor": {
            "type": "TemplateProcessing",
            "single": [{"SpecialToken": {"id": "<s>", "type_id": 0}}, {"Sequence": {"id": "A", "type_id": 0}}],
            "pair": [{"SpecialToken": {"id": "<s>", "type_id": 0}}, {"Sequence": {"id": "A", "type_id": 0}},
                     {"Sequence": {"id": "B", "type_id": 1}}],
            "special_tokens": {"<s>": {"id": "<s>", "ids": [1], "tokens": ["<s>"]}}
        },
        "decoder": null,
        "model": {"type": "WordLevel", "vocab": vocab, "unk_token": "<unk>"}
    })
}

/// Writes `config.json`, `tokenizer.json` and `model.safetensors` to `dir`.
pub fn write_checkpoint(dir: &Path, t: &Tiny, seed: u64) {
    let hd = t.hidden / t.heads;
    let mut config = json!({
        "model_type": t.model_type,
        "architectures": [match t.model_type {
            "qwen2" => "Qwen2ForCausalLM",
            "mistral" => "MistralForCausalLM",
            _ => "LlamaForCausalLM",
        }],
        "hidden_size": t.hidden, "intermediate_size": t.intermediate,
        "num_hidden_layers": t.layers, "num_attention_heads": t.heads,
        "num_key_value_heads": t.kv_heads, "vocab_size": t.vocab,
        "max_position_embeddings": 128, "rms_norm_eps": 1e-5, "rope_theta": 10000.0,
        "tie_word_embeddings": t.tied, "bos_token_id": 1, "eos_token_id": 2,
        "hidden_act": "silu", "torch_dtype": "float32"
    });
    for (k, v) in t.extra.as_object().unwrap() {
        config[k] = v.clone();
    }
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config).unwrap()).unwrap();
    std::fs::write(dir.join("tokenizer.json"), tokenizer_json().to_string()).unwrap();

    let mut g = Values(seed);
    let mut w: HashMap<String, Tensor> = HashMap::new();
    let lin = |g: &mut Values, out: usize, inp: usize| g.tensor(out, inp, (3.0 / inp as f32).sqrt(), 0.0);
    w.insert("model.embed_tokens.weight".into(), g.tensor(t.vocab, t.hidden, 1.0, 0.0));
    for i in 0..t.layers {
        let p = format!("model.layers.{i}");
        w.insert(format!("{p}.input_layernorm.weight"), g.tensor(1, t.hidden, 0.2, 1.0));
        w.insert(format!("{p}.post_attention_layernorm.weight"), g.tensor(1, t.hidden, 0.2, 1.0));
        for (name, out) in [("q", t.heads * hd), ("k", t.kv_heads * hd), ("v", t.kv_heads * hd)] {
            w.insert(format!("{p}.self_attn.{name}_proj.weight"), lin(&mut g, out, t.hidden));
            if t.bias {
                w.insert(format!("{p}.self_attn.{name}_proj.bias"), g.tensor(1, out, 0.3, 0.0));
            }
        }
        w.insert(format!("{p}.self_attn.o_proj.weight"), lin(&mut g, t.hidden, t.heads * hd));
        w.insert(format!("{p}.mlp.gate_proj.weight"), lin(&mut g, t.intermediate, t.hidden));
        w.insert(format!("{p}.mlp.up_proj.weight"), lin(&mut g, t.intermediate, t.hidden));
        w.insert(format!("{p}.mlp.down_proj.weight"), lin(&mut g, t.hidden, t.intermediate));
    }
    w.insert("model.norm.weight".into(), g.tensor(1, t.hidden, 0.2, 1.0));
    if !t.tied {
        w.insert("lm_head.weight".into(), lin(&mut g, t.vocab, t.hidden));
    }
    candle_core::safetensors::save(&w, dir.join("model.safetensors")).unwrap();
}
