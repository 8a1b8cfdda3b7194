mod common;

use std::path::Path;
use std::process::Command;

use common::{word, write_checkpoint, Tiny, TOKENIZER_WORDS};
use icl_assoc_core::backend::{
    cosine, cosine_grad_wrt_second, Backend, BackendFactory, BackendOptions, BackendUri, ForwardOutput, LossGradient,
    TokenSequence,
};
use icl_assoc_llama::{ComputeDType, LlamaBackend, ModelBackendFactory};
use serde_json::{json, Value};

fn open(dir: &Path, dtype: ComputeDType) -> LlamaBackend {
    LlamaBackend::open(dir.to_str().unwrap(), &BackendOptions::default(), dtype).unwrap()
}

fn checkpoint(t: &Tiny, seed: u64) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(dir.path(), t, seed);
    dir
}

#[test]
fn descriptor_and_vocabulary_views() {
    let dir = checkpoint(&Tiny::default(), 1);
    let b = open(dir.path(), ComputeDType::F32);
    let d = b.descriptor();
    assert_eq!((d.vocab_size, d.layer_count, d.hidden_dim, d.max_context), (64, 3, 16, 128));
    assert!(d.has_bos);
    assert!(d.revision.as_ref().unwrap().starts_with("sha256:"));
    assert_eq!(b.bos_id(), Some(1));
    assert_eq!(b.backend_id(), format!("real:{}", dir.path().display()));

    let special = b.special_ids();
    for id in [0, 1, 2, 60, 63] {
        assert!(special.contains(&id), "{id}");
    }
    assert!(!special.contains(&3));

    assert_eq!(b.token_text(7).unwrap(), word(7));
    assert!(b.is_single_token(7));
    assert!(!b.is_single_token(TOKENIZER_WORDS as u32 + 1));
    assert!(b.token_text(64).is_err());
}

#[test]
fn unsupported_device_is_a_capability_error() {
    let dir = checkpoint(&Tiny::default(), 1);
    let options = BackendOptions {
        device: Some("cuda:0".into()),
        ..Default::default()
    };
    let err = LlamaBackend::open(dir.path().to_str().unwrap(), &options, ComputeDType::F32).err().unwrap();
    assert_eq!(err.kind(), "capability");
}

#[test]
fn factory_routes_by_scheme() {
    let dir = checkpoint(&Tiny::default(), 2);
    let f = ModelBackendFactory::default();
    let uri: BackendUri = format!("real:{}", dir.path().display()).parse().unwrap();
    assert_eq!(f.open(&uri, &BackendOptions::default()).unwrap().descriptor().layer_count, 3);
    let uri: BackendUri = "synthetic:1:50:8:2".parse().unwrap();
    assert_eq!(f.open(&uri, &BackendOptions::default()).unwrap().descriptor().vocab_size, 50);
}

#[test]
fn forward_is_deterministic_and_shared_instances_agree() {
    let dir = checkpoint(&Tiny::default(), 3);
    let a = open(dir.path(), ComputeDType::F32);
    let b = open(dir.path(), ComputeDType::F32);
    let seq = TokenSequence::from_body(Some(1), &[5, 9, 5, 9, 5]);
    let x = a.forward_at(&seq, 2, &[2, 5]).unwrap();
    let y = b.forward_at(&seq, 2, &[2, 5]).unwrap();
    assert_eq!(x.hidden.len(), 6);
    assert_eq!(x.logits.len(), 2);
    assert_eq!(x.logits[0].len(), 64);
    for (h, k) in x.hidden.iter().zip(&y.hidden) {
        assert_eq!(h.vector, k.vector);
    }
    assert_eq!(x.logits, y.logits);
}

#[test]
fn context_and_layer_limits_are_enforced() {
    let dir = checkpoint(&Tiny::default(), 3);
    let options = BackendOptions {
        memory_cap: 4,
        ..Default::default()
    };
    let b = LlamaBackend::open(dir.path().to_str().unwrap(), &options, ComputeDType::F32).unwrap();
    let long = TokenSequence::from_body(Some(1), &[5, 6, 7, 8]);
    assert_eq!(b.forward(&long, 1).unwrap_err().kind(), "context_overflow");
    let short = TokenSequence::from_body(Some(1), &[5]);
    assert_eq!(b.forward(&short, 4).unwrap_err().kind(), "layer_out_of_range");
    assert_eq!(b.forward(&short, 0).unwrap_err().kind(), "layer_out_of_range");
}

#[test]
fn last_layer_is_reported_after_the_final_norm() {
    let t = Tiny {
        tied: true,
        ..Tiny::default()
    };
    let dir = checkpoint(&t, 4);
    let b = open(dir.path(), ComputeDType::F64);
    let seq = TokenSequence::from_body(Some(1), &[11, 12, 13]);
    let out = b.forward(&seq, 3).unwrap();
    // With tied weights each logit is the final state against an embedding row.
    let weights = candle_core::safetensors::load(dir.path().join("model.safetensors"), &candle_core::Device::Cpu).unwrap();
    let embedding: Vec<Vec<f64>> = weights["model.embed_tokens.weight"]
        .to_dtype(candle_core::DType::F64)
        .unwrap()
        .to_vec2()
        .unwrap();
    let last = &out.hidden[3].vector;
    for (k, row) in embedding.iter().enumerate() {
        let dot: f64 = row.iter().zip(last).map(|(a, b)| a * b).sum();
        assert!((dot - out.final_logits()[k]).abs() < 1e-10, "{k}");
    }
    // An earlier layer is not normalized the same way.
    let mid = b.forward(&seq, 2).unwrap();
    assert_ne!(mid.hidden[3].vector, *last);
}

fn one_hot(n: usize, id: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[id] = 1.0;
    v
}

#[test]
fn relaxed_forward_at_one_hot_matches_plain_forward() {
    let dir = checkpoint(&Tiny::default(), 5);
    let b = open(dir.path(), ComputeDType::F64);
    let seq = TokenSequence::from_body(Some(1), &[21, 22, 23, 24]);
    let plain = b.forward(&seq, 2).unwrap();
    let relaxed = b.forward_relaxed(&seq, 2, 3, &one_hot(64, 23)).unwrap();
    for (p, r) in plain.hidden.iter().zip(&relaxed.hidden) {
        for (x, y) in p.vector.iter().zip(&r.vector) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    for (x, y) in plain.final_logits().iter().zip(relaxed.final_logits()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert_eq!(b.forward_relaxed(&seq, 2, 0, &one_hot(64, 1)).unwrap_err().kind(), "out_of_range");
    assert_eq!(b.forward_relaxed(&seq, 2, 1, &[1.0]).unwrap_err().kind(), "input");
}

/// Cosine between two positions plus a scaled logit.
fn probe_loss(a: usize, b: usize, k: usize) -> impl Fn(&ForwardOutput) -> (f64, LossGradient) {
    move |out: &ForwardOutput| {
        let (ha, hb) = (&out.hidden[a].vector, &out.hidden[b].vector);
        let logits = out.final_logits();
        let value = cosine(ha, hb) + 0.1 * logits[k];
        let mut gl = vec![0.0; logits.len()];
        gl[k] = 0.1;
        let grad = LossGradient {
            hidden: vec![(a, cosine_grad_wrt_second(hb, ha)), (b, cosine_grad_wrt_second(ha, hb))],
            final_logits: Some(gl),
        };
        (value, grad)
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let t = Tiny {
        model_type: "qwen2",
        bias: true,
        ..Tiny::default()
    };
    let dir = checkpoint(&t, 6);
    let b = open(dir.path(), ComputeDType::F64);
    let seq = TokenSequence::from_body(Some(1), &[30, 31, 32, 30, 31]);
    let (layer, position) = (2, 2);
    let loss = probe_loss(1, 5, 40);
    let grad = b.input_gradient(&seq, layer, position, &loss).unwrap();
    assert_eq!(grad.len(), 64);

    let base = one_hot(64, 31);
    let eps = 1e-5;
    for v in [0, 3, 17, 31, 50, 63] {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[v] += eps;
        minus[v] -= eps;
        let fp = loss(&b.forward_relaxed(&seq, layer, position, &plus).unwrap()).0;
        let fm = loss(&b.forward_relaxed(&seq, layer, position, &minus).unwrap()).0;
        let fd = (fp - fm) / (2.0 * eps);
        assert!((fd - grad[v]).abs() < 1e-6 * (1.0 + fd.abs()), "v={v}: fd {fd} vs {}", grad[v]);
    }
}

#[test]
fn constant_loss_has_zero_gradient() {
    let dir = checkpoint(&Tiny::default(), 7);
    let b = open(dir.path(), ComputeDType::F32);
    let seq = TokenSequence::from_body(Some(1), &[30, 31]);
    let zero = |_: &ForwardOutput| (1.0, LossGradient::default());
    assert_eq!(b.input_gradient(&seq, 1, 2, &zero).unwrap(), vec![0.0; 64]);
}

const REFERENCE_SCRIPT: &str = r#"
import json, sys, torch
from transformers import AutoModelForCausalLM
path, ids = sys.argv[1], json.loads(sys.argv[2])
model = AutoModelForCausalLM.from_pretrained(path, dtype=torch.float64, attn_implementation="eager")
model.eval()
with torch.no_grad():
    out = model(torch.tensor([ids]), output_hidden_states=True)
print(json.dumps({
    "hidden": [h[0].tolist() for h in out.hidden_states[1:]],
    "logits": out.logits[0].tolist(),
}))
"#;

fn reference_available() -> bool {
    Command::new("python3")
        .args(["-c", "import torch, transformers"])
        .output()
        .is_ok_and(|o| o.status.success())
}

fn max_abs_gap(a: &[f64], b: &Value) -> f64 {
    a.iter()
        .zip(b.as_array().unwrap())
        .map(|(x, y)| (x - y.as_f64().unwrap()).abs())
        .fold(0.0, f64::max)
}

/// Every layer's states and every position's logits agree with the
/// reference implementation, for each supported architecture variant.
#[test]
fn matches_the_reference_implementation() {
    if !reference_available() {
        eprintln!("reference implementation unavailable; skipped");
        return;
    }
    let variants = [
        Tiny::default(),
        Tiny {
            tied: true,
            kv_heads: 1,
            extra: json!({"rope_theta": 500000.0, "rope_scaling": {
                "rope_type": "llama3", "factor": 8.0, "low_freq_factor": 1.0,
                "high_freq_factor": 4.0, "original_max_position_embeddings": 16}}),
            ..Tiny::default()
        },
        Tiny {
            model_type: "qwen2",
            bias: true,
            extra: json!({"use_sliding_window": false}),
            ..Tiny::default()
        },
        Tiny {
            model_type: "mistral",
            extra: json!({"sliding_window": 3}),
            ..Tiny::default()
        },
    ];
    let body: Vec<u32> = vec![5, 9, 14, 5, 9, 22, 40, 5, 9];
    let seq = TokenSequence::from_body(Some(1), &body);
    for (i, t) in variants.iter().enumerate() {
        let dir = checkpoint(t, 100 + i as u64);
        let out = Command::new("python3")
            .args(["-c", REFERENCE_SCRIPT, dir.path().to_str().unwrap(), &json!(seq.ids()).to_string()])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let reference: Value = serde_json::from_slice(&out.stdout).unwrap();

        let b = open(dir.path(), ComputeDType::F64);
        let positions: Vec<usize> = (0..seq.len()).collect();
        for layer in 1..=t.layers {
            let ours = b.forward_at(&seq, layer, &positions).unwrap();
            for (p, h) in ours.hidden.iter().enumerate() {
                let gap = max_abs_gap(&h.vector, &reference["hidden"][layer - 1][p]);
                assert!(gap < 1e-4, "{} layer {layer} position {p}: gap {gap}", t.model_type);
            }
            for (p, l) in ours.logits.iter().enumerate() {
                let gap = max_abs_gap(l, &reference["logits"][p]);
                assert!(gap < 1e-4, "{} logits at {p}: gap {gap}", t.model_type);
            }
        }
    }
}
