//! Model-backend contract: per-layer last-token hidden states and the
//! next-token distribution at the last position.

mod http;
mod mock;

pub use http::{HttpBackend, HttpConfig};
pub use mock::{fnv1a64, MockBackend, SplitMix64};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("operation not supported by this backend: {0}")]
    NotSupported(String),
    #[error("layer index -{k} out of range for a model with {num_layers} layers")]
    LayerOutOfRange { k: usize, num_layers: usize },
    #[error("backend protocol error: {0}")]
    Protocol(String),
}

impl BackendError {
    /// Transport failures may succeed on retry; everything else is final.
    pub fn is_retriable(&self) -> bool {
        matches!(self, BackendError::Unavailable(_))
    }
}

/// Failure scoped to one prompt of a batch; the rest of the batch is unaffected.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("prompt exceeds the model context ({detail})")]
    ContextOverflow { detail: String },
}

pub type HiddenStates = Vec<Result<Vec<f32>, PromptError>>;

/// A model that can be asked for hidden states and next-token distributions.
///
/// Implementations must be deterministic and batch-invariant: the vector for a
/// prompt never depends on what else is in the batch.
pub trait Backend: Send + Sync {
    fn info(&self) -> Result<ModelInfo, BackendError>;

    /// Last-token hidden state of every prompt at `layer_index` (negative,
    /// `-1` is the final normalized representation).
    fn hidden_states(&self, prompts: &[String], layer_index: i32) -> Result<HiddenStates, BackendError>;

    /// Up to `k` most probable next tokens, descending, ties by token id.
    fn top_k(&self, prompt: &str, k: usize) -> Result<TopKPrediction, BackendError>;
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn info(&self) -> Result<ModelInfo, BackendError> {
        (**self).info()
    }
    fn hidden_states(&self, prompts: &[String], layer_index: i32) -> Result<HiddenStates, BackendError> {
        (**self).hidden_states(prompts, layer_index)
    }
    fn top_k(&self, prompt: &str, k: usize) -> Result<TopKPrediction, BackendError> {
        (**self).top_k(prompt, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum LayerSelector {
    #[default]
    Final,
    NegIndex(usize),
    Proportional(f64),
}

impl LayerSelector {
    pub const DEFAULT_FRACTION: f64 = 0.1;

    /// Maps the selector onto a negative layer index for a model with
    /// `num_layers` blocks. `Proportional(f)` reads the block `max(1, floor(f*L))`
    /// from the top.
    pub fn resolve(self, num_layers: usize) -> Result<i32, BackendError> {
        assert!(num_layers >= 1, "models have at least one layer");
        let k = match self {
            LayerSelector::Final => 1,
            LayerSelector::NegIndex(k) => {
                if k == 0 || k > num_layers {
                    return Err(BackendError::LayerOutOfRange { k, num_layers });
                }
                k
            }
            LayerSelector::Proportional(f) => {
                // products like 0.29 * 100 come out as 28.999999999999996
                let raw = (f * num_layers as f64 + 1e-9).floor() as usize;
                raw.clamp(1, num_layers)
            }
        };
        Ok(-(k as i32))
    }
}

impl fmt::Display for LayerSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelector::Final => f.write_str("final"),
            LayerSelector::NegIndex(k) => write!(f, "-{k}"),
            LayerSelector::Proportional(p) => write!(f, "prop:{p}"),
        }
    }
}

impl FromStr for LayerSelector {
    type Err = String;

    /// Accepts `final`, `-k`, `prop` and `prop:<fraction>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "final" {
            return Ok(LayerSelector::Final);
        }
        if s == "prop" {
            return Ok(LayerSelector::Proportional(Self::DEFAULT_FRACTION));
        }
        if let Some(frac) = s.strip_prefix("prop:") {
            let f: f64 = frac.parse().map_err(|_| format!("bad layer fraction `{frac}`"))?;
            if !(f > 0.0 && f <= 1.0) {
                return Err(format!("layer fraction must be in (0, 1], got {f}"));
            }
            return Ok(LayerSelector::Proportional(f));
        }
        if let Some(k) = s.strip_prefix('-') {
            let k: usize = k.parse().map_err(|_| format!("bad layer index `{s}`"))?;
            if k == 0 {
                return Err("layer index must be negative".into());
            }
            return Ok(LayerSelector::NegIndex(k));
        }
        Err(format!("bad layer selector `{s}` (expected final, -k or prop:<f>)"))
    }
}

pub fn resolve_layer(selector: LayerSelector, num_layers: usize) -> Result<i32, BackendError> {
    selector.resolve(num_layers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub token: String,
    pub p: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TopKPrediction {
    pub entries: Vec<TokenProb>,
}

impl TopKPrediction {
    pub fn total_mass(&self) -> f64 {
        self.entries.iter().fold(0.0, |acc, e| acc + e.p)
    }

    /// Sorted descending, probabilities in [0, 1], total at most 1 (+1e-6).
    pub fn validate(&self) -> Result<(), BackendError> {
        for e in &self.entries {
            if !(0.0..=1.0).contains(&e.p) {
                return Err(BackendError::Protocol(format!(
                    "probability {} for token {:?} outside [0, 1]",
                    e.p, e.token
                )));
            }
        }
        if self.entries.windows(2).any(|w| w[0].p < w[1].p) {
            return Err(BackendError::Protocol("top-k entries not sorted".into()));
        }
        if self.total_mass() > 1.0 + 1e-6 {
            return Err(BackendError::Protocol(format!(
                "top-k mass {} exceeds 1",
                self.total_mass()
            )));
        }
        Ok(())
    }
}

/// Resolves `selector`, queries the backend, and checks arity, dimension and
/// finiteness of what comes back.
pub fn last_token_hidden_states(
    backend: &dyn Backend,
    prompts: &[String],
    selector: LayerSelector,
) -> Result<(i32, HiddenStates), BackendError> {
    let info = backend.info()?;
    let layer = selector.resolve(info.num_layers)?;
    if prompts.is_empty() {
        return Ok((layer, Vec::new()));
    }
    let states = backend.hidden_states(prompts, layer)?;
    check_states(&states, prompts.len(), info.hidden_dim)?;
    Ok((layer, states))
}

pub(crate) fn check_states(states: &HiddenStates, expected: usize, dim: usize) -> Result<(), BackendError> {
    if states.len() != expected {
        return Err(BackendError::Protocol(format!(
            "expected {expected} vectors, got {}",
            states.len()
        )));
    }
    for v in states.iter().flatten() {
        if v.len() != dim {
            return Err(BackendError::Protocol(format!(
                "vector of length {} where hidden_dim is {dim}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(BackendError::Protocol("non-finite hidden state".into()));
        }
    }
    Ok(())
}

pub fn top_k_next_tokens(backend: &dyn Backend, prompt: &str, k: usize) -> Result<TopKPrediction, BackendError> {
    if k == 0 {
        return Ok(TopKPrediction::default());
    }
    let pred = backend.top_k(prompt, k)?;
    if pred.entries.len() > k {
        return Err(BackendError::Protocol(format!(
            "asked for {k} tokens, got {}",
            pred.entries.len()
        )));
    }
    pred.validate()?;
    Ok(pred)
}
