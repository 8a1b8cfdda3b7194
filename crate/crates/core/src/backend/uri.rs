use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use super::{Backend, MockBackend, SyntheticBackend, DEFAULT_MEMORY_CAP};
use crate::error::{Error, Result};

/// Backend selector: `real:<model_id>`, `synthetic:<seed>:<vocab>:<dim>:<layers>`
/// or `mock:<script-path>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackendUri {
    Real {
        model_id: String,
    },
    Synthetic {
        seed: u64,
        vocab: usize,
        dim: usize,
        layers: usize,
    },
    Mock {
        script: PathBuf,
    },
}

impl FromStr for BackendUri {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (scheme, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("backend URI `{s}` has no scheme")))?;
        match scheme {
            "real" if !rest.is_empty() => Ok(BackendUri::Real {
                model_id: rest.to_string(),
            }),
            "mock" if !rest.is_empty() => Ok(BackendUri::Mock {
                script: PathBuf::from(rest),
            }),
            "synthetic" => {
                let parts: Vec<&str> = rest.split(':').collect();
                let bad = || Error::Config(format!("expected synthetic:<seed>:<vocab>:<dim>:<layers>, got `{s}`"));
                if parts.len() != 4 {
                    return Err(bad());
                }
                let num = |p: &str| p.parse::<u64>().map_err(|_| bad());
                Ok(BackendUri::Synthetic {
                    seed: num(parts[0])?,
                    vocab: num(parts[1])? as usize,
                    dim: num(parts[2])? as usize,
                    layers: num(parts[3])? as usize,
                })
            }
            _ => Err(Error::Config(format!("unsupported backend URI `{s}`"))),
        }
    }
}

impl fmt::Display for BackendUri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendUri::Real { model_id } => write!(f, "real:{model_id}"),
            BackendUri::Synthetic {
                seed,
                vocab,
                dim,
                layers,
            } => write!(f, "synthetic:{seed}:{vocab}:{dim}:{layers}"),
            BackendUri::Mock { script } => write!(f, "mock:{}", script.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackendOptions {
    pub memory_cap: usize,
    /// Device hint for adapters that support more than one.
    pub device: Option<String>,
}

impl Default for BackendOptions {
    fn default() -> Self {
        Self {
            memory_cap: DEFAULT_MEMORY_CAP,
            device: None,
        }
    }
}

/// Opens backend instances; the pipeline asks for one per worker.
pub trait BackendFactory: Sync {
    fn open(&self, uri: &BackendUri, options: &BackendOptions) -> Result<Box<dyn Backend>>;
}

/// Opens synthetic and mock backends. Real models need an adapter crate.
#[derive(Clone, Copy, Debug, Default)]
pub struct DefaultBackendFactory;

impl BackendFactory for DefaultBackendFactory {
    fn open(&self, uri: &BackendUri, options: &BackendOptions) -> Result<Box<dyn Backend>> {
        match uri {
            BackendUri::Synthetic {
                seed,
                vocab,
                dim,
                layers,
            } => Ok(Box::new(
                SyntheticBackend::new(*seed, *vocab, *dim, *layers)?.with_memory_cap(options.memory_cap),
            )),
            BackendUri::Mock { script } => Ok(Box::new(
                MockBackend::from_path(script)?.with_memory_cap(options.memory_cap),
            )),
            BackendUri::Real { .. } => Err(Error::Capability(
                "pretrained models without a model adapter (use the CLI build)",
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_displays_all_schemes() {
        for s in ["real:meta-llama/Llama-3.2-1B", "synthetic:7:50:16:2", "mock:golden.toml"] {
            let uri: BackendUri = s.parse().unwrap();
            assert_eq!(uri.to_string(), s);
        }
        assert!("synthetic:7:50:16".parse::<BackendUri>().is_err());
        assert!("synthetic:x:50:16:2".parse::<BackendUri>().is_err());
        assert!("hf:model".parse::<BackendUri>().is_err());
        assert!("real:".parse::<BackendUri>().is_err());
    }
}
