//! Browser bindings. Every export takes and returns plain values or JSON
//! strings so the same functions run natively in tests.

use mlp4str::corpus::{build_corpus, CorpusOptions, SplitPart};
use mlp4str::encoder::EncoderMode;
use mlp4str::eval::{evaluate_split, metrics_at_k};
use mlp4str::mixer::{forward_stack, LayerParams, MixerConfig};
use mlp4str::model::{AblationMode, WeightMode};
use mlp4str::synth::{generate, SynthConfig};
use mlp4str::train::{model_config, train_loop, TrainConfig};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use wasm_bindgen::prelude::wasm_bindgen;

fn error_json(message: impl std::fmt::Display) -> String {
    json!({ "error": message.to_string() }).to_string()
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

/// Runs a freshly initialized mixer stack on a random history and returns
/// the input and output of both streams as nested arrays.
#[wasm_bindgen]
pub fn mixer_demo(u: usize, d_h: usize, layers: usize, seed: u64) -> String {
    let cfg = MixerConfig {
        u,
        d_h,
        n_layers: layers,
        dropout: 0.0,
        ..MixerConfig::default()
    };
    if let Err(e) = cfg.validate() {
        return error_json(e);
    }
    if u * d_h > 4096 {
        return error_json("u * d_h must not exceed 4096 in the demo");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<LayerParams<f64>> = (0..layers).map(|_| LayerParams::init(&cfg, &mut rng)).collect();
    let doc = Array2::from_shape_fn((u, d_h), |_| rng.gen_range(-1.0..1.0));
    let tag = Array2::from_shape_fn((u, d_h), |_| rng.gen_range(-1.0..1.0));
    match forward_stack(doc.view(), tag.view(), &params, cfg.activation, &mut None) {
        Ok((doc_out, tag_out, _)) => json!({
            "doc_in": rows(&doc),
            "tag_in": rows(&tag),
            "doc_out": rows(&doc_out),
            "tag_out": rows(&tag_out),
        })
        .to_string(),
        Err(e) => error_json(e),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CompareRequest {
    users: usize,
    posts_per_user: usize,
    tags: usize,
    carry: f64,
    text_signal: f64,
    d_h: usize,
    u: usize,
    epochs: usize,
    seed: u64,
}

impl Default for CompareRequest {
    fn default() -> Self {
        CompareRequest {
            users: 40,
            posts_per_user: 10,
            tags: 12,
            carry: 1.0,
            text_signal: 1.0,
            d_h: 16,
            u: 4,
            epochs: 15,
            seed: 0,
        }
    }
}

#[derive(Debug, Serialize)]
struct ModeResult {
    mode: &'static str,
    val_loss: Vec<f64>,
    best_epoch: usize,
    test: Vec<(usize, f64, f64, f64)>,
}

/// Trains the full model and the pooling ablation on the same synthetic
/// corpus. `request` is a JSON object; missing keys take demo defaults.
#[wasm_bindgen]
pub fn train_compare(request: &str) -> String {
    let req: CompareRequest = match serde_json::from_str(request) {
        Ok(r) => r,
        Err(e) => return error_json(e),
    };
    if req.users * req.posts_per_user > 2000 || req.d_h > 64 || req.epochs > 60 {
        return error_json("demo limits: at most 2000 posts, d_h 64 and 60 epochs");
    }
    let raw = generate(&SynthConfig {
        users: req.users,
        posts_per_user: req.posts_per_user,
        tags: req.tags,
        carry: req.carry,
        text_signal: req.text_signal,
        seed: req.seed,
        ..SynthConfig::default()
    });
    let opts = CorpusOptions {
        min_tag_count: 1,
        ..CorpusOptions::default()
    };
    let corpus = match build_corpus(raw, &opts) {
        Ok(c) => c,
        Err(e) => return error_json(e),
    };
    let mixer = MixerConfig {
        u: req.u,
        d_h: req.d_h,
        ..MixerConfig::default()
    };
    let train = TrainConfig {
        max_epochs: req.epochs,
        patience: req.epochs,
        seed: req.seed,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let mut results = Vec::new();
    for mode in [AblationMode::Full, AblationMode::NoMixerPooling] {
        let cfg = model_config(&corpus, mixer, EncoderMode::Internal, WeightMode::Learned, mode);
        let outcome = train_loop::<f32>(&corpus, None, cfg, &train).and_then(|t| {
            let report = evaluate_split(&t.model, &t.tags, &corpus, None, SplitPart::Test, &[1, 3, 5], mode, false)?;
            Ok((t, report))
        });
        let (trained, report) = match outcome {
            Ok(x) => x,
            Err(e) => return error_json(e),
        };
        results.push(ModeResult {
            mode: mode.label(),
            val_loss: trained.history.iter().map(|s| s.val_loss).collect(),
            best_epoch: trained.epoch,
            test: report.metrics.iter().map(|m| (m.k, m.precision, m.recall, m.f1)).collect(),
        });
    }
    json!({
        "posts": corpus.posts.len(),
        "tags": corpus.n_tags(),
        "results": results,
    })
    .to_string()
}

fn parse_ids(s: &str) -> Result<Vec<u32>, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u32>().map_err(|_| format!("{t:?} is not a tag id")))
        .collect()
}

/// P@K, R@K and F1@K for a ranking and a ground-truth set, both given as
/// comma-separated tag ids.
#[wasm_bindgen]
pub fn metrics(predicted: &str, actual: &str, k: usize) -> String {
    let (predicted, actual) = match (parse_ids(predicted), parse_ids(actual)) {
        (Ok(p), Ok(a)) => (p, a),
        (Err(e), _) | (_, Err(e)) => return error_json(e),
    };
    let mut actual = actual;
    actual.sort_unstable();
    actual.dedup();
    if actual.is_empty() || k == 0 {
        return error_json("need at least one actual tag and k >= 1");
    }
    let (p, r, f1) = metrics_at_k(&predicted, &actual, k);
    json!({ "precision": p, "recall": r, "f1": f1 }).to_string()
}
