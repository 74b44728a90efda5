//! Browser playground over the `coit` core: a CRF decoder, the co-attention
//! maps of a randomly initialised model, and the BIO chunk scorer.
//!
//! Every export takes one JSON string and returns one JSON string. The
//! `*_json` functions hold the logic and run natively as well; the
//! `#[wasm_bindgen]` wrappers only convert errors into JS exceptions.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use coit::config::{AblationMode, ModelConfig};
use coit::data::{Batch, Utterance, Vocab};
use coit::decoders::{initial_transitions, Chain};
use coit::metrics::{evaluate, extract_chunks, Chunk, EvalReport, Frame};
use coit::model::Model;
use coit::numerics::Tape;

type Result<T> = std::result::Result<T, String>;

fn parse<'a, T: Deserialize<'a>>(input: &'a str) -> Result<T> {
    serde_json::from_str(input).map_err(|e| format!("bad input: {e}"))
}

fn render<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- CRF

#[derive(Deserialize)]
pub struct CrfInput {
    pub labels: Vec<String>,
    /// n rows of S label scores.
    pub emissions: Vec<Vec<f64>>,
    /// S×S, row = previous label.
    pub transitions: Vec<Vec<f64>>,
    #[serde(default)]
    pub start: Option<Vec<f64>>,
    #[serde(default)]
    pub end: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CrfOutput {
    pub path: Vec<usize>,
    pub tags: Vec<String>,
    pub score: f64,
    pub log_partition: f64,
    /// Probability of the Viterbi path.
    pub path_probability: f64,
    /// n×S posterior label marginals.
    pub marginals: Vec<Vec<f64>>,
}

pub fn crf_decode_json(input: &str) -> Result<String> {
    let q: CrfInput = parse(input)?;
    let s = q.labels.len();
    let n = q.emissions.len();
    if s == 0 || n == 0 {
        return Err("need at least one label and one token".into());
    }
    if q.emissions.iter().any(|r| r.len() != s) {
        return Err(format!("every emission row needs {s} scores"));
    }
    if q.transitions.len() != s || q.transitions.iter().any(|r| r.len() != s) {
        return Err(format!("transitions must be {s}×{s}"));
    }
    let zeros = vec![0.0; s];
    let (start, end) = (q.start.unwrap_or_else(|| zeros.clone()), q.end.unwrap_or(zeros));
    if start.len() != s || end.len() != s {
        return Err(format!("start and end need {s} scores"));
    }
    // Full (S+2)² matrix: index S is the start state, S+1 the end state.
    let k = s + 2;
    let mut full = initial_transitions::<f64>(s);
    let t = full.data_mut();
    for i in 0..s {
        t[s * k + i] = start[i];
        t[i * k + s + 1] = end[i];
        for j in 0..s {
            t[i * k + j] = q.transitions[i][j];
        }
    }
    let flat: Vec<f64> = q.emissions.concat();
    if flat.iter().chain(t.iter()).any(|x| !x.is_finite()) {
        return Err("scores must be finite".into());
    }
    let chain = Chain::new(&flat, full.data(), s).map_err(|e| e.to_string())?;
    let (path, score) = chain.viterbi();
    let (log_partition, node, _) = chain.marginals();
    render(&CrfOutput {
        tags: path.iter().map(|&y| q.labels[y].clone()).collect(),
        path,
        score,
        log_partition,
        path_probability: (score - log_partition).exp(),
        marginals: node.chunks(s).map(<[f64]>::to_vec).collect(),
    })
}

// ---------------------------------------------------------------- co-attention

#[derive(Deserialize)]
pub struct AttentionInput {
    pub tokens: Vec<String>,
    pub slot_labels: Vec<String>,
    pub intent_labels: Vec<String>,
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_layers")]
    pub layers: usize,
}

fn default_mode() -> String {
    AblationMode::Full.to_string()
}

fn default_layers() -> usize {
    2
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layer: usize,
    /// `intent_to_slot`, `slot_to_intent` or `self`.
    pub path: String,
    /// n×n, head-averaged; row = query token, column = key token.
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AttentionOutput {
    pub tokens: Vec<String>,
    pub maps: Vec<AttentionMap>,
    pub intent: String,
    pub tags: Vec<String>,
}

fn path_names(mode: AblationMode) -> Vec<&'static str> {
    match mode {
        AblationMode::SelfAttention => vec!["self"],
        _ => [("intent_to_slot", mode.intent_to_slot()), ("slot_to_intent", mode.slot_to_intent())]
            .into_iter()
            .filter_map(|(name, on)| on.then_some(name))
            .collect(),
    }
}

pub fn co_attention_json(input: &str) -> Result<String> {
    let q: AttentionInput = parse(input)?;
    if q.tokens.is_empty() || q.slot_labels.is_empty() || q.intent_labels.is_empty() {
        return Err("tokens, slot_labels and intent_labels must be non-empty".into());
    }
    if q.tokens.len() > 64 || q.layers == 0 || q.layers > 4 {
        return Err("keep to at most 64 tokens and 1 to 4 layers".into());
    }
    let mode: AblationMode = q.mode.parse().map_err(|e: coit::Error| e.to_string())?;
    let lower: Vec<String> = q.tokens.iter().map(|t| t.to_lowercase()).collect();
    // One utterance carries the words; one per label registers the label sets.
    let mut data = vec![Utterance {
        tokens: lower.clone(),
        slots: vec![q.slot_labels[0].clone(); lower.len()],
        intent: q.intent_labels[0].clone(),
    }];
    for (i, slot) in q.slot_labels.iter().enumerate() {
        data.push(Utterance {
            tokens: vec![lower[0].clone()],
            slots: vec![slot.clone()],
            intent: q.intent_labels[i.min(q.intent_labels.len() - 1)].clone(),
        });
    }
    for intent in &q.intent_labels {
        data.push(Utterance {
            tokens: vec![lower[0].clone()],
            slots: vec![q.slot_labels[0].clone()],
            intent: intent.clone(),
        });
    }
    let vocab = Vocab::build(&data, 1).map_err(|e| e.to_string())?;
    let config = ModelConfig {
        hidden_dim: 16,
        embedding_dim: 12,
        heads: 2,
        ffn_dim: 24,
        layers: q.layers,
        ablation: mode,
        seed: q.seed,
        ..ModelConfig::default()
    };
    let model = Model::<f64>::new(config, vocab, None).map_err(|e| e.to_string())?;
    let encoded = model.vocab.encode(&data[0]).map_err(|e| e.to_string())?;
    let batch = Batch::from_encoded(&[&encoded], vec![0]);

    let mut tape = Tape::new();
    let forward = model.forward(&mut tape, &batch, None).map_err(|e| e.to_string())?;
    let n = lower.len();
    let names = path_names(mode);
    let mut maps = Vec::new();
    for (layer, out) in forward.layers.iter().enumerate() {
        for (&var, name) in out.attention.iter().zip(&names) {
            // [heads×n×n] for a single-row batch.
            let probs = tape.value(var).data();
            let heads = probs.len() / (n * n);
            let weights = (0..n)
                .map(|i| (0..n).map(|j| (0..heads).map(|h| probs[h * n * n + i * n + j]).sum::<f64>() / heads as f64).collect())
                .collect();
            maps.push(AttentionMap {
                layer,
                path: name.to_string(),
                weights,
            });
        }
    }
    let decoded = model.decode(&batch).map_err(|e| e.to_string())?;
    render(&AttentionOutput {
        tokens: q.tokens,
        maps,
        intent: model.vocab.intents.label(decoded.intents[0]).unwrap_or_default().to_string(),
        tags: decoded.slots[0].iter().map(|&s| model.vocab.slots.label(s).unwrap_or_default().to_string()).collect(),
    })
}

// ---------------------------------------------------------------- chunk scorer

#[derive(Deserialize)]
pub struct ScoreInput {
    /// One tag sequence per sentence.
    pub gold: Vec<Vec<String>>,
    pub pred: Vec<Vec<String>>,
    #[serde(default)]
    pub gold_intents: Option<Vec<String>>,
    #[serde(default)]
    pub pred_intents: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SentenceChunks {
    pub gold: Vec<Chunk>,
    pub pred: Vec<Chunk>,
    pub matched: Vec<Chunk>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreOutput {
    pub report: EvalReport,
    pub sentences: Vec<SentenceChunks>,
}

pub fn score_chunks_json(input: &str) -> Result<String> {
    let q: ScoreInput = parse(input)?;
    let m = q.gold.len();
    let intents = |v: Option<Vec<String>>| v.unwrap_or_else(|| vec![String::new(); m]);
    let (gi, pi) = (intents(q.gold_intents), intents(q.pred_intents));
    if q.pred.len() != m || gi.len() != m || pi.len() != m {
        return Err("gold, pred and intent lists must have the same length".into());
    }
    let frames = |tags: &[Vec<String>], intents: Vec<String>| -> Vec<Frame> {
        tags.iter().zip(intents).map(|(t, intent)| Frame { intent, tags: t.clone() }).collect()
    };
    let report = evaluate(&frames(&q.pred, pi), &frames(&q.gold, gi)).map_err(|e| e.to_string())?;
    let sentences = q
        .gold
        .iter()
        .zip(&q.pred)
        .map(|(g, p)| {
            let (gold, pred) = (extract_chunks(g), extract_chunks(p));
            let matched = pred.iter().filter(|c| gold.contains(c)).cloned().collect();
            SentenceChunks { gold, pred, matched }
        })
        .collect();
    render(&ScoreOutput { report, sentences })
}

// ---------------------------------------------------------------- exports

fn to_js(r: Result<String>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn crf_decode(input: &str) -> std::result::Result<String, JsValue> {
    to_js(crf_decode_json(input))
}

#[wasm_bindgen]
pub fn co_attention(input: &str) -> std::result::Result<String, JsValue> {
    to_js(co_attention_json(input))
}

#[wasm_bindgen]
pub fn score_chunks(input: &str) -> std::result::Result<String, JsValue> {
    to_js(score_chunks_json(input))
}
