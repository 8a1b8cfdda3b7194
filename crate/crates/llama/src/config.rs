use std::path::Path;

use icl_assoc_core::{Error, Result};
use serde::Deserialize;

/// Architectures sharing the Llama block structure.
pub const SUPPORTED_MODEL_TYPES: &[&str] = &["llama", "mistral", "qwen2"];

/// `eos_token_id` is a number in some checkpoints and a list in others.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum TokenIds {
    One(u32),
    Many(Vec<u32>),
}

impl TokenIds {
    pub fn to_vec(&self) -> Vec<u32> {
        match self {
            TokenIds::One(id) => vec![*id],
            TokenIds::Many(ids) => ids.clone(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
pub struct RopeScaling {
    #[serde(alias = "type")]
    pub rope_type: String,
    pub factor: Option<f64>,
    pub low_freq_factor: Option<f64>,
    pub high_freq_factor: Option<f64>,
    pub original_max_position_embeddings: Option<usize>,
}

/// The subset of a Hugging Face `config.json` the forward pass needs.
#[derive(Clone, Debug, Deserialize, PartialEq)]
pub struct LlamaConfig {
    #[serde(default = "default_model_type")]
    pub model_type: String,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub num_key_value_heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub vocab_size: usize,
    #[serde(default = "default_max_positions")]
    pub max_position_embeddings: usize,
    #[serde(default = "default_eps")]
    pub rms_norm_eps: f64,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
    pub rope_scaling: Option<RopeScaling>,
    #[serde(default)]
    pub tie_word_embeddings: bool,
    pub bos_token_id: Option<u32>,
    pub eos_token_id: Option<TokenIds>,
    pub pad_token_id: Option<u32>,
    pub sliding_window: Option<usize>,
    pub use_sliding_window: Option<bool>,
    pub hidden_act: Option<String>,
}

fn default_model_type() -> String {
    "llama".into()
}
fn default_max_positions() -> usize {
    2048
}
fn default_eps() -> f64 {
    1e-6
}
fn default_theta() -> f64 {
    10_000.0
}

impl LlamaConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: LlamaConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("model config.json: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn validate(&self) -> Result<()> {
        if !SUPPORTED_MODEL_TYPES.contains(&self.model_type.as_str()) {
            return Err(Error::Config(format!(
                "unsupported model type `{}` (supported: {})",
                self.model_type,
                SUPPORTED_MODEL_TYPES.join(", ")
            )));
        }
        if let Some(act) = &self.hidden_act {
            if act != "silu" {
                return Err(Error::Config(format!("unsupported activation `{act}`")));
            }
        }
        if self.num_attention_heads == 0 || self.num_kv_heads() == 0 {
            return Err(Error::Config("attention head counts must be positive".into()));
        }
        if !self.num_attention_heads.is_multiple_of(self.num_kv_heads()) {
            return Err(Error::Config(format!(
                "{} attention heads cannot share {} key/value heads",
                self.num_attention_heads,
                self.num_kv_heads()
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!("head dimension {} is odd", self.head_dim())));
        }
        if let Some(s) = &self.rope_scaling {
            match s.rope_type.as_str() {
                "default" => {}
                "linear" if s.factor.is_some() => {}
                "llama3"
                    if s.factor.is_some()
                        && s.low_freq_factor.is_some()
                        && s.high_freq_factor.is_some()
                        && s.original_max_position_embeddings.is_some() => {}
                other => return Err(Error::Config(format!("unsupported rope scaling `{other}`"))),
            }
        }
        Ok(())
    }

    pub fn num_kv_heads(&self) -> usize {
        self.num_key_value_heads.unwrap_or(self.num_attention_heads)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim.unwrap_or(self.hidden_size / self.num_attention_heads)
    }

    /// Attention window, if the architecture restricts it.
    pub fn attention_window(&self) -> Option<usize> {
        match self.model_type.as_str() {
            "mistral" => self.sliding_window,
            "qwen2" if self.use_sliding_window == Some(true) => self.sliding_window,
            _ => None,
        }
    }

    /// Rotary inverse frequencies, one per pair of head dimensions.
    pub fn inverse_frequencies(&self) -> Vec<f64> {
        let d = self.head_dim();
        let base: Vec<f64> = (0..d / 2)
            .map(|i| 1.0 / self.rope_theta.powf(2.0 * i as f64 / d as f64))
            .collect();
        let Some(s) = &self.rope_scaling else {
            return base;
        };
        match s.rope_type.as_str() {
            "linear" => base.iter().map(|f| f / s.factor.unwrap()).collect(),
            "llama3" => {
                let factor = s.factor.unwrap();
                let (low, high) = (s.low_freq_factor.unwrap(), s.high_freq_factor.unwrap());
                let old = s.original_max_position_embeddings.unwrap() as f64;
                let low_wavelen = old / low;
                let high_wavelen = old / high;
                base.iter()
                    .map(|&f| {
                        let wavelen = 2.0 * std::f64::consts::PI / f;
                        if wavelen < high_wavelen {
                            f
                        } else if wavelen > low_wavelen {
                            f / factor
                        } else {
                            let smooth = (old / wavelen - low) / (high - low);
                            (1.0 - smooth) * f / factor + smooth * f
                        }
                    })
                    .collect()
            }
            _ => base,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"{
        "model_type": "llama", "hidden_size": 8, "intermediate_size": 16,
        "num_hidden_layers": 2, "num_attention_heads": 2, "num_key_value_heads": 1,
        "vocab_size": 32, "eos_token_id": [2, 3], "bos_token_id": 1
    }"#;

    #[test]
    fn defaults_and_derived_sizes() {
        let c = LlamaConfig::from_json(TINY).unwrap();
        assert_eq!(c.head_dim(), 4);
        assert_eq!(c.num_kv_heads(), 1);
        assert_eq!(c.eos_token_id.clone().unwrap().to_vec(), vec![2, 3]);
        assert_eq!(c.inverse_frequencies(), vec![1.0, 0.01]);
        assert_eq!(c.attention_window(), None);
    }

    #[test]
    fn rejects_other_architectures() {
        let text = TINY.replace("\"llama\"", "\"gemma2\"");
        assert!(matches!(LlamaConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn llama3_scaling_keeps_high_and_divides_low_frequencies() {
        let text = TINY.replace(
            "\"bos_token_id\": 1",
            r#""bos_token_id": 1, "rope_theta": 500000.0, "head_dim": 64,
               "rope_scaling": {"rope_type": "llama3", "factor": 8.0, "low_freq_factor": 1.0,
                                "high_freq_factor": 4.0, "original_max_position_embeddings": 8192}"#,
        );
        let c = LlamaConfig::from_json(&text).unwrap();
        let plain = LlamaConfig { rope_scaling: None, ..c.clone() }.inverse_frequencies();
        let scaled = c.inverse_frequencies();
        assert_eq!(scaled[0], plain[0]);
        let last = plain.len() - 1;
        assert!((scaled[last] - plain[last] / 8.0).abs() < 1e-18);
        for (s, p) in scaled.iter().zip(&plain) {
            assert!(*s <= *p && *s >= p / 8.0 - 1e-18);
        }
    }
}
