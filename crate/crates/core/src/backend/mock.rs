//! Deterministic stand-in for a real model.
//!
//! The hidden state for `(prompt, layer)` is a splitmix64 stream seeded with
//! `fnv1a64(prompt) ^ seed ^ layer` (layer as its two's-complement 64-bit
//! pattern), each draw mapped to `[-1, 1]` through its top 53 bits. These
//! choices are fixed so recorded goldens stay valid across platforms.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{Backend, BackendError, HiddenStates, ModelInfo, PromptError, TokenProb, TopKPrediction};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [-1, 1).
    pub fn next_signed(&mut self) -> f64 {
        2.0 * self.next_unit() - 1.0
    }
}

// Salt separating the next-token logits stream from every hidden-state stream.
const TOPK_SALT: u64 = 0x746f_706b_5f6c_6f67;

/// Vocabulary the mock "predicts" over. Mixes stop words, content words and
/// subword-marked pieces so stop-word accounting has something to do.
pub const MOCK_VOCAB: &[&str] = &[
    "the",
    "a",
    "an",
    "I",
    "one",
    "it",
    "is",
    "of",
    "and",
    "to",
    "in",
    "that",
    "this",
    "\u{2581}the",
    "\u{2581}a",
    "\u{0120}and",
    "thing",
    "movie",
    "film",
    "positive",
    "negative",
    "good",
    "bad",
    "pos",
    "neg",
    "joy",
    "sadness",
    "anger",
    "fact",
    "opinion",
    "news",
    "science",
    "health",
    "sports",
    "politics",
    "culture",
    "yes",
    "no",
    "similar",
    "different",
    "\u{2581}great",
    "\u{2581}terrible",
    "person",
    "place",
    "number",
    "question",
    "answer",
    "\"",
    ":",
    ".",
];

/// Pure, reentrant mock backend. Counts the prompts it evaluates so tests can
/// observe caching.
#[derive(Debug)]
pub struct MockBackend {
    seed: u64,
    num_layers: usize,
    hidden_dim: usize,
    context_limit: Option<usize>,
    top_k_supported: bool,
    prompt_evals: AtomicU64,
    requests: AtomicU64,
}

impl MockBackend {
    pub fn new(seed: u64, num_layers: usize, hidden_dim: usize) -> Self {
        assert!(num_layers >= 1 && hidden_dim >= 1, "mock needs L >= 1 and d >= 1");
        MockBackend {
            seed,
            num_layers,
            hidden_dim,
            context_limit: None,
            top_k_supported: true,
            prompt_evals: AtomicU64::new(0),
            requests: AtomicU64::new(0),
        }
    }

    /// Prompts longer than `bytes` fail with `ContextOverflow`.
    pub fn with_context_limit(mut self, bytes: usize) -> Self {
        self.context_limit = Some(bytes);
        self
    }

    /// Makes `top_k` answer `NotSupported`, like a hidden-state-only deployment.
    pub fn without_top_k(mut self) -> Self {
        self.top_k_supported = false;
        self
    }

    pub fn model_id(&self) -> String {
        format!("mock-l{}-d{}-s{}", self.num_layers, self.hidden_dim, self.seed)
    }

    /// Number of prompts sent through `hidden_states` so far.
    pub fn prompt_evaluations(&self) -> u64 {
        self.prompt_evals.load(Ordering::Relaxed)
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn vector(&self, prompt: &str, layer_index: i32) -> Vec<f32> {
        let mut rng = SplitMix64::new(fnv1a64(prompt.as_bytes()) ^ self.seed ^ (layer_index as i64 as u64));
        (0..self.hidden_dim).map(|_| rng.next_signed() as f32).collect()
    }

    fn check_layer(&self, layer_index: i32) -> Result<(), BackendError> {
        let k = layer_index.unsigned_abs() as usize;
        if layer_index >= 0 || k > self.num_layers {
            return Err(BackendError::LayerOutOfRange {
                k,
                num_layers: self.num_layers,
            });
        }
        Ok(())
    }
}

impl Backend for MockBackend {
    fn info(&self) -> Result<ModelInfo, BackendError> {
        Ok(ModelInfo {
            model_id: self.model_id(),
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
        })
    }

    fn hidden_states(&self, prompts: &[String], layer_index: i32) -> Result<HiddenStates, BackendError> {
        self.check_layer(layer_index)?;
        self.requests.fetch_add(1, Ordering::Relaxed);
        self.prompt_evals.fetch_add(prompts.len() as u64, Ordering::Relaxed);
        Ok(prompts
            .iter()
            .map(|p| match self.context_limit {
                Some(limit) if p.len() > limit => Err(PromptError::ContextOverflow {
                    detail: format!("{} bytes > limit {limit}", p.len()),
                }),
                _ => Ok(self.vector(p, layer_index)),
            })
            .collect())
    }

    fn top_k(&self, prompt: &str, k: usize) -> Result<TopKPrediction, BackendError> {
        if !self.top_k_supported {
            return Err(BackendError::NotSupported(
                "this mock was built without next-token prediction".into(),
            ));
        }
        let mut rng = SplitMix64::new(fnv1a64(prompt.as_bytes()) ^ self.seed ^ TOPK_SALT);
        let logits: Vec<f64> = MOCK_VOCAB.iter().map(|_| 4.0 * rng.next_signed()).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut ranked: Vec<(usize, f64)> = exps.iter().map(|e| e / z).enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(TopKPrediction {
            entries: ranked
                .into_iter()
                .take(k)
                .map(|(id, p)| TokenProb {
                    token: MOCK_VOCAB[id].to_string(),
                    p,
                })
                .collect(),
        })
    }
}
