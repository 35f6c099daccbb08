//! Sentence embeddings: render every template of a prompt set around the
//! sentence, read the last-token hidden state of each rendered prompt, and
//! aggregate the per-prompt vectors.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{check_states, Backend, BackendError, LayerSelector, ModelInfo};
use crate::prompts::{PromptSet, PromptTemplate, Registry, RegistryError};
use crate::storage::{Cache, CacheKey};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("template `{template_id}` overflowed the model context: {detail}")]
    ContextOverflow { template_id: String, detail: String },
    #[error("cannot aggregate vectors of length {expected} and {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("nothing to aggregate")]
    EmptyInput,
    #[error("failed to start worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AggregationMethod {
    #[default]
    Mean,
    Concat,
    MaxPool,
}

impl AggregationMethod {
    pub fn tag(self) -> &'static str {
        match self {
            AggregationMethod::Mean => "mean",
            AggregationMethod::Concat => "concat",
            AggregationMethod::MaxPool => "max",
        }
    }

    /// Output length for `k` inputs of length `dim`.
    pub fn output_dim(self, k: usize, dim: usize) -> usize {
        match self {
            AggregationMethod::Concat => k * dim,
            _ => dim,
        }
    }
}

impl fmt::Display for AggregationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for AggregationMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(AggregationMethod::Mean),
            "concat" => Ok(AggregationMethod::Concat),
            "max" | "maxpool" => Ok(AggregationMethod::MaxPool),
            other => Err(format!("unknown aggregation `{other}` (expected mean, concat or max)")),
        }
    }
}

/// Combines per-prompt vectors. Mean accumulates in f64; concat keeps input
/// order.
pub fn aggregate<V: AsRef<[f32]>>(vectors: &[V], method: AggregationMethod) -> Result<Vec<f32>, EmbedError> {
    let first = vectors.first().ok_or(EmbedError::EmptyInput)?.as_ref();
    let dim = first.len();
    if let Some(bad) = vectors.iter().find(|v| v.as_ref().len() != dim) {
        return Err(EmbedError::DimensionMismatch {
            expected: dim,
            found: bad.as_ref().len(),
        });
    }
    Ok(match method {
        AggregationMethod::Mean => {
            let mut acc = vec![0f64; dim];
            for v in vectors {
                for (a, &x) in acc.iter_mut().zip(v.as_ref()) {
                    *a += x as f64;
                }
            }
            let k = vectors.len() as f64;
            acc.into_iter().map(|a| (a / k) as f32).collect()
        }
        AggregationMethod::MaxPool => {
            let mut out = first.to_vec();
            for v in &vectors[1..] {
                for (o, &x) in out.iter_mut().zip(v.as_ref()) {
                    if x > *o {
                        *o = x;
                    }
                }
            }
            out
        }
        AggregationMethod::Concat => vectors.iter().flat_map(|v| v.as_ref().iter().copied()).collect(),
    })
}

fn l2_normalized(v: &[f32]) -> Vec<f32> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|&x| (x as f64 / norm) as f32).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub prompt_set: String,
    pub layer: LayerSelector,
    pub aggregation: AggregationMethod,
    /// L2-normalize each per-prompt vector before aggregating. Off for
    /// replication runs.
    pub normalize: bool,
    pub parallelism: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            prompt_set: "metaeol8".into(),
            layer: LayerSelector::Final,
            aggregation: AggregationMethod::Mean,
            normalize: false,
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    /// Prompt set id, or template id for single-prompt sources.
    pub source: String,
    pub layer_index: i32,
    pub aggregation: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f32>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub embedding: Embedding,
    /// Raw per-template vectors in prompt-set order.
    pub per_prompt: Vec<(String, Vec<f32>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FailurePolicy {
    FailFast,
    #[default]
    SkipAndReport,
}

/// A sentence skipped because one of its prompts overflowed the context.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceFailure {
    pub index: usize,
    pub template_id: String,
    pub detail: String,
}

/// Rows in input order; `None` marks a sentence that failed under
/// [`FailurePolicy::SkipAndReport`].
#[derive(Debug)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub provenance: Provenance,
    pub rows: Vec<Option<Vec<f32>>>,
    pub failures: Vec<SentenceFailure>,
}

impl EmbeddingMatrix {
    pub fn row(&self, i: usize) -> Option<&[f32]> {
        self.rows.get(i).and_then(|r| r.as_deref())
    }
}

/// Embeds sentences for one (backend, prompt set, layer, aggregation) setup.
pub struct Embedder<'a> {
    backend: &'a dyn Backend,
    cache: Option<&'a Cache>,
    info: ModelInfo,
    set: PromptSet,
    templates: Vec<Arc<PromptTemplate>>,
    layer_index: i32,
    config: EmbedConfig,
}

impl<'a> Embedder<'a> {
    pub fn new(
        backend: &'a dyn Backend,
        registry: &Registry,
        config: EmbedConfig,
        cache: Option<&'a Cache>,
    ) -> Result<Self, EmbedError> {
        let set = registry.load_set(&config.prompt_set)?;
        Self::with_set(backend, registry, set, config, cache)
    }

    /// Like [`Embedder::new`] but with an explicit, possibly ad-hoc, set.
    pub fn with_set(
        backend: &'a dyn Backend,
        registry: &Registry,
        set: PromptSet,
        mut config: EmbedConfig,
        cache: Option<&'a Cache>,
    ) -> Result<Self, EmbedError> {
        if set.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        let templates = registry.templates_of(&set)?;
        let info = backend.info()?;
        let layer_index = config.layer.resolve(info.num_layers)?;
        config.prompt_set = set.id.clone();
        config.parallelism = config.parallelism.max(1);
        Ok(Embedder {
            backend,
            cache,
            info,
            set,
            templates,
            layer_index,
            config,
        })
    }

    pub fn model_info(&self) -> &ModelInfo {
        &self.info
    }

    pub fn prompt_set(&self) -> &PromptSet {
        &self.set
    }

    pub fn layer_index(&self) -> i32 {
        self.layer_index
    }

    pub fn config(&self) -> &EmbedConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        self.config
            .aggregation
            .output_dim(self.templates.len(), self.info.hidden_dim)
    }

    pub fn provenance(&self) -> Provenance {
        let mut aggregation = self.config.aggregation.tag().to_string();
        if self.config.normalize {
            aggregation.push_str("+l2");
        }
        let source = match self.templates.as_slice() {
            [only] if self.set.id.starts_with("transfer:") => only.id.clone(),
            _ => self.set.id.clone(),
        };
        Provenance {
            model_id: self.info.model_id.clone(),
            source,
            layer_index: self.layer_index,
            aggregation,
        }
    }

    /// Raw per-template vectors, from the cache where possible. Prompts that
    /// miss go to the backend as one batch.
    pub fn per_prompt(&self, sentence: &str) -> Result<Vec<(String, Vec<f32>)>, EmbedError> {
        let keys: Vec<CacheKey> = self
            .templates
            .iter()
            .map(|t| CacheKey::new(&self.info.model_id, &t.id, self.layer_index, sentence))
            .collect();
        let mut vectors: Vec<Option<Vec<f32>>> = keys.iter().map(|k| self.cache.and_then(|c| c.lookup(k))).collect();
        let missing: Vec<usize> = (0..vectors.len()).filter(|&i| vectors[i].is_none()).collect();
        if !missing.is_empty() {
            let prompts: Vec<String> = missing.iter().map(|&i| self.templates[i].render(sentence)).collect();
            let states = self.backend.hidden_states(&prompts, self.layer_index)?;
            check_states(&states, prompts.len(), self.info.hidden_dim)?;
            for (&i, state) in missing.iter().zip(states) {
                let v = state.map_err(|e| match e {
                    crate::backend::PromptError::ContextOverflow { detail } => EmbedError::ContextOverflow {
                        template_id: self.templates[i].id.clone(),
                        detail,
                    },
                })?;
                if let Some(cache) = self.cache {
                    cache.insert(&keys[i], &v);
                }
                vectors[i] = Some(v);
            }
        }
        Ok(self
            .templates
            .iter()
            .zip(vectors)
            .map(|(t, v)| (t.id.clone(), v.expect("filled above")))
            .collect())
    }

    pub fn embed_sentence(&self, sentence: &str) -> Result<SentenceEmbedding, EmbedError> {
        let per_prompt = self.per_prompt(sentence)?;
        let values = if self.config.normalize {
            let normed: Vec<Vec<f32>> = per_prompt.iter().map(|(_, v)| l2_normalized(v)).collect();
            aggregate(&normed, self.config.aggregation)?
        } else {
            let raw: Vec<&[f32]> = per_prompt.iter().map(|(_, v)| v.as_slice()).collect();
            aggregate(&raw, self.config.aggregation)?
        };
        Ok(SentenceEmbedding {
            embedding: Embedding {
                values,
                provenance: self.provenance(),
            },
            per_prompt,
        })
    }

    /// Embeds every sentence; duplicates are embedded once. Context overflows
    /// are handled per `policy`; any other error aborts the corpus.
    pub fn embed_corpus<S: AsRef<str> + Sync>(
        &self,
        sentences: &[S],
        policy: FailurePolicy,
    ) -> Result<EmbeddingMatrix, EmbedError> {
        let mut unique: Vec<&str> = Vec::new();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        let row_slots: Vec<usize> = sentences
            .iter()
            .map(|s| {
                *slot.entry(s.as_ref()).or_insert_with(|| {
                    unique.push(s.as_ref());
                    unique.len() - 1
                })
            })
            .collect();

        let results: Vec<Result<Vec<f32>, EmbedError>> = if self.config.parallelism > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.config.parallelism)
                .build()
                .map_err(|e| EmbedError::Pool(e.to_string()))?;
            pool.install(|| {
                unique
                    .par_iter()
                    .map(|s| self.embed_sentence(s).map(|e| e.embedding.values))
                    .collect()
            })
        } else {
            unique
                .iter()
                .map(|s| self.embed_sentence(s).map(|e| e.embedding.values))
                .collect()
        };

        let mut unique_rows = Vec::with_capacity(results.len());
        let mut overflowed: HashMap<usize, (String, String)> = HashMap::new();
        for (u, r) in results.into_iter().enumerate() {
            match r {
                Ok(v) => unique_rows.push(Some(v)),
                Err(EmbedError::ContextOverflow { template_id, detail }) if policy == FailurePolicy::SkipAndReport => {
                    overflowed.insert(u, (template_id, detail));
                    unique_rows.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        let failures = row_slots
            .iter()
            .enumerate()
            .filter_map(|(index, u)| {
                overflowed.get(u).map(|(template_id, detail)| SentenceFailure {
                    index,
                    template_id: template_id.clone(),
                    detail: detail.clone(),
                })
            })
            .collect();
        let rows = row_slots.iter().map(|&u| unique_rows[u].clone()).collect();
        Ok(EmbeddingMatrix {
            dim: self.output_dim(),
            provenance: self.provenance(),
            rows,
            failures,
        })
    }
}
