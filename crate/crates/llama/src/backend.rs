use std::collections::{BTreeSet, HashMap};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use icl_assoc_core::backend::{
    check_logit_positions, check_replaceable, Backend, BackendDescriptor, BackendOptions, ForwardOutput, HiddenState,
    LossGradient, OutputLoss, TokenId, TokenSequence,
};
use icl_assoc_core::{Error, Result};
use parking_lot::Mutex;
use sha2::{Digest, Sha256};
use tokenizers::Tokenizer;

use crate::model::{tensor_err, weight_files, LlamaModel};

/// Everything shared between instances opened on the same checkpoint.
struct Loaded {
    model: LlamaModel,
    tokenizer: Tokenizer,
    revision: String,
    bos: Option<TokenId>,
    special: BTreeSet<TokenId>,
}

type CacheKey = (PathBuf, DType);

fn cache() -> &'static Mutex<HashMap<CacheKey, Arc<Loaded>>> {
    static CACHE: std::sync::OnceLock<Mutex<HashMap<CacheKey, Arc<Loaded>>>> = std::sync::OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Finds a checkpoint directory for `model_id`: a local path, or a snapshot
/// in the Hugging Face hub cache. Nothing is downloaded.
pub fn resolve_model_dir(model_id: &str) -> Result<PathBuf> {
    let direct = PathBuf::from(model_id);
    if direct.is_dir() {
        return Ok(direct);
    }
    let hub = std::env::var_os("HF_HUB_CACHE")
        .map(PathBuf::from)
        .or_else(|| std::env::var_os("HF_HOME").map(|h| PathBuf::from(h).join("hub")))
        .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache/huggingface/hub")));
    if let Some(hub) = hub {
        let repo = hub.join(format!("models--{}", model_id.replace('/', "--")));
        if let Ok(rev) = std::fs::read_to_string(repo.join("refs/main")) {
            let snapshot = repo.join("snapshots").join(rev.trim());
            if snapshot.is_dir() {
                return Ok(snapshot);
            }
        }
    }
    Err(Error::Config(format!(
        "model `{model_id}` is neither a directory nor a cached hub snapshot"
    )))
}

/// Hub snapshot commit when the directory is one, otherwise a sha256 over
/// the config, tokenizer and weight files.
fn revision(dir: &Path) -> Result<String> {
    let parent = dir.parent().and_then(Path::file_name);
    if parent.is_some_and(|p| p == "snapshots") {
        if let Some(commit) = dir.file_name() {
            return Ok(commit.to_string_lossy().into_owned());
        }
    }
    let mut files = vec![dir.join("config.json"), dir.join("tokenizer.json")];
    files.extend(weight_files(dir)?);
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    for f in files {
        hasher.update(f.file_name().unwrap().to_string_lossy().as_bytes());
        let mut file = std::fs::File::open(&f).map_err(|e| Error::io(&f, e))?;
        loop {
            let n = file.read(&mut buf).map_err(|e| Error::io(&f, e))?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
    }
    Ok(format!("sha256:{}", hex::encode(hasher.finalize())))
}

fn load(dir: &Path, dtype: DType, device: &Device) -> Result<Loaded> {
    let model = LlamaModel::load(dir, dtype, device)?;
    let path = dir.join("tokenizer.json");
    let tokenizer =
        Tokenizer::from_file(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg = &model.config;

    // BOS counts only if the tokenizer actually prepends it.
    let probe = tokenizer
        .encode("a", true)
        .map_err(|e| Error::Backend(format!("tokenizer: {e}")))?;
    let bos = cfg.bos_token_id.filter(|b| probe.get_ids().first() == Some(b));

    let mut special: BTreeSet<TokenId> = tokenizer
        .get_added_tokens_decoder()
        .iter()
        .filter(|(_, t)| t.special)
        .map(|(&id, _)| id)
        .collect();
    special.extend(cfg.bos_token_id);
    special.extend(cfg.eos_token_id.iter().flat_map(|e| e.to_vec()));
    special.extend(cfg.pad_token_id);
    // Embedding rows the tokenizer never produces.
    let known = tokenizer.get_vocab_size(true) as TokenId;
    special.extend(known..cfg.vocab_size as TokenId);
    special.retain(|&id| (id as usize) < cfg.vocab_size);

    Ok(Loaded {
        revision: revision(dir)?,
        model,
        tokenizer,
        bos,
        special,
    })
}

/// A pretrained Llama-family checkpoint on the CPU.
pub struct LlamaBackend {
    shared: Arc<Loaded>,
    model_id: String,
    descriptor: BackendDescriptor,
}

impl LlamaBackend {
    /// Opens `model_id` (see [`resolve_model_dir`]). Instances opened on the
    /// same checkpoint and dtype share their weights.
    pub fn open(model_id: &str, options: &BackendOptions, dtype: DType) -> Result<Self> {
        match options.device.as_deref() {
            None | Some("cpu") => {}
            Some(_) => return Err(Error::Capability("devices other than cpu")),
        }
        let dir = resolve_model_dir(model_id)?;
        let key = (dir.canonicalize().map_err(|e| Error::io(&dir, e))?, dtype);
        let shared = {
            let mut cache = cache().lock();
            match cache.get(&key) {
                Some(l) => l.clone(),
                None => {
                    log::info!("loading {} as {dtype:?}", key.0.display());
                    let l = Arc::new(load(&key.0, dtype, &Device::Cpu)?);
                    cache.insert(key, l.clone());
                    l
                }
            }
        };
        let cfg = &shared.model.config;
        let descriptor = BackendDescriptor {
            model_id: model_id.to_string(),
            vocab_size: cfg.vocab_size,
            layer_count: cfg.num_hidden_layers,
            max_context: cfg.max_position_embeddings,
            hidden_dim: cfg.hidden_size,
            has_bos: shared.bos.is_some(),
            memory_cap: options.memory_cap,
            revision: Some(shared.revision.clone()),
        };
        descriptor.validate()?;
        Ok(Self {
            shared,
            model_id: model_id.to_string(),
            descriptor,
        })
    }

    fn model(&self) -> &LlamaModel {
        &self.shared.model
    }

    fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        self.shared
            .tokenizer
            .encode(text, false)
            .map(|e| e.get_ids().to_vec())
            .map_err(|e| Error::Backend(format!("tokenizer: {e}")))
    }

    fn assemble(&self, hidden: &Tensor, normed: Option<&Tensor>, layer: usize, positions: &[usize]) -> Result<ForwardOutput> {
        let rows: Vec<Vec<f64>> = hidden.to_dtype(DType::F64).and_then(|t| t.to_vec2()).map_err(tensor_err)?;
        let hidden = rows
            .into_iter()
            .enumerate()
            .map(|(position, vector)| HiddenState { vector, layer, position })
            .collect();
        let logits = match (normed, positions.is_empty()) {
            (Some(n), false) => {
                let idx = Tensor::new(positions.iter().map(|&p| p as u32).collect::<Vec<_>>(), n.device())
                    .map_err(tensor_err)?;
                n.index_select(&idx, 0)
                    .and_then(|rows| self.model().logits(&rows))
                    .and_then(|l| l.to_dtype(DType::F64))
                    .and_then(|l| l.to_vec2())
                    .map_err(tensor_err)?
            }
            _ => Vec::new(),
        };
        Ok(ForwardOutput {
            hidden,
            logit_positions: positions.to_vec(),
            logits,
        })
    }

    /// Embeddings of `seq` with the input at `position` replaced by
    /// `coefficients @ embedding`.
    fn relaxed_input(&self, seq: &TokenSequence, position: usize, coefficients: &Tensor) -> candle_core::Result<Tensor> {
        let ids = seq.ids();
        let mut parts = Vec::with_capacity(3);
        if position > 0 {
            parts.push(self.model().embed(&ids[..position])?);
        }
        parts.push(self.model().mix(coefficients)?);
        if position + 1 < ids.len() {
            parts.push(self.model().embed(&ids[position + 1..])?);
        }
        Tensor::cat(&parts, 0)
    }

    fn check_coefficients(&self, coefficients: &[f64]) -> Result<()> {
        if coefficients.len() != self.descriptor.vocab_size {
            return Err(Error::Input(format!(
                "expected {} coefficients, got {}",
                self.descriptor.vocab_size,
                coefficients.len()
            )));
        }
        Ok(())
    }

    fn coefficient_tensor(&self, coefficients: &[f64]) -> candle_core::Result<Tensor> {
        Tensor::from_slice(coefficients, (1, coefficients.len()), self.model().device())?.to_dtype(self.model().dtype())
    }

    fn row_tensor(&self, values: Vec<f64>) -> candle_core::Result<Tensor> {
        let n = values.len();
        Tensor::from_vec(values, (1, n), self.model().device())?.to_dtype(self.model().dtype())
    }
}

impl Backend for LlamaBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn backend_id(&self) -> String {
        format!("real:{}", self.model_id)
    }

    fn bos_id(&self) -> Option<TokenId> {
        self.shared.bos
    }

    fn special_ids(&self) -> BTreeSet<TokenId> {
        self.shared.special.clone()
    }

    fn token_text(&self, id: TokenId) -> Result<String> {
        self.descriptor.check_token(id)?;
        self.shared
            .tokenizer
            .decode(&[id], false)
            .map_err(|e| Error::Backend(format!("tokenizer: {e}")))
    }

    fn is_single_token(&self, id: TokenId) -> bool {
        match self.token_text(id) {
            Ok(text) if !text.is_empty() => self.encode(&text).is_ok_and(|ids| ids == [id]),
            _ => false,
        }
    }

    fn forward_at(&self, seq: &TokenSequence, layer: usize, logit_positions: &[usize]) -> Result<ForwardOutput> {
        self.descriptor.check_sequence(seq, layer)?;
        check_logit_positions(seq, logit_positions)?;
        let input = self.model().embed(seq.ids()).map_err(tensor_err)?;
        let (hidden, normed) = self
            .model()
            .run(input, layer, !logit_positions.is_empty())
            .map_err(tensor_err)?;
        self.assemble(&hidden, normed.as_ref(), layer, logit_positions)
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
        self.check_coefficients(coefficients)?;
        let (hidden, normed) = self
            .coefficient_tensor(coefficients)
            .and_then(|c| self.relaxed_input(seq, position, &c))
            .and_then(|input| self.model().run(input, layer, true))
            .map_err(tensor_err)?;
        self.assemble(&hidden, normed.as_ref(), layer, &[seq.len() - 1])
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
        let vocab = self.descriptor.vocab_size;
        let n = seq.len();
        let mut one_hot = vec![0.0; vocab];
        one_hot[seq.ids()[position] as usize] = 1.0;
        let coefficients = self
            .coefficient_tensor(&one_hot)
            .and_then(|t| Var::from_tensor(&t))
            .map_err(tensor_err)?;
        let (hidden, normed) = self
            .relaxed_input(seq, position, coefficients.as_tensor())
            .and_then(|input| self.model().run(input, layer, true))
            .map_err(tensor_err)?;
        let normed = normed.expect("final states requested");
        let output = self.assemble(&hidden, Some(&normed), layer, &[n - 1])?;
        let (_, LossGradient { hidden: g_hidden, final_logits }) = loss.evaluate(&output);

        // Vector-Jacobian product through a linear surrogate of the loss.
        let mut terms = Vec::new();
        for (pos, g) in g_hidden {
            if pos >= n || g.len() != self.descriptor.hidden_dim {
                return Err(Error::Input(format!("loss gradient for position {pos} has wrong shape")));
            }
            let term = hidden
                .narrow(0, pos, 1)
                .and_then(|h| h * self.row_tensor(g)?)
                .and_then(|t| t.sum_all())
                .map_err(tensor_err)?;
            terms.push(term);
        }
        if let Some(gl) = final_logits {
            if gl.len() != vocab {
                return Err(Error::Input("logit gradient has wrong length".into()));
            }
            let term = normed
                .narrow(0, n - 1, 1)
                .and_then(|row| self.model().logits(&row))
                .and_then(|l| l * self.row_tensor(gl)?)
                .and_then(|t| t.sum_all())
                .map_err(tensor_err)?;
            terms.push(term);
        }
        let Some(first) = terms.pop() else {
            return Ok(vec![0.0; vocab]);
        };
        let surrogate = terms.iter().try_fold(first, |acc, t| acc + t).map_err(tensor_err)?;
        let grads = surrogate.backward().map_err(tensor_err)?;
        match grads.get(coefficients.as_tensor()) {
            Some(g) => g
                .flatten_all()
                .and_then(|g| g.to_dtype(DType::F64))
                .and_then(|g| g.to_vec1())
                .map_err(tensor_err),
            None => Ok(vec![0.0; vocab]),
        }
    }
}
