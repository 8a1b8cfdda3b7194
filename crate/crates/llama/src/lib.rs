//! Pretrained Llama-family checkpoints (Llama, Mistral, Qwen2) as
//! experiment backends.
//!
//! Checkpoints are read from a local directory or the Hugging Face hub
//! cache: `config.json`, `tokenizer.json` and safetensors weights.
//! Hidden states follow the `output_hidden_states` convention of the
//! reference implementation: layer `l` is the residual stream after block
//! `l`, and the last layer is reported after the final norm.

mod backend;
mod config;
mod model;

use candle_core::DType;
use icl_assoc_core::backend::{Backend, BackendFactory, BackendOptions, BackendUri, DefaultBackendFactory};
use icl_assoc_core::Result;

pub use backend::{resolve_model_dir, LlamaBackend};
pub use config::{LlamaConfig, RopeScaling, TokenIds, SUPPORTED_MODEL_TYPES};
pub use model::LlamaModel;

pub use candle_core::DType as ComputeDType;

/// Opens `real:` URIs with [`LlamaBackend`] and everything else with the
/// default factory.
#[derive(Clone, Copy, Debug)]
pub struct ModelBackendFactory {
    pub dtype: DType,
}

impl Default for ModelBackendFactory {
    fn default() -> Self {
        Self { dtype: DType::F32 }
    }
}

impl BackendFactory for ModelBackendFactory {
    fn open(&self, uri: &BackendUri, options: &BackendOptions) -> Result<Box<dyn Backend>> {
        match uri {
            BackendUri::Real { model_id } => Ok(Box::new(LlamaBackend::open(model_id, options, self.dtype)?)),
            other => DefaultBackendFactory.open(other, options),
        }
    }
}
