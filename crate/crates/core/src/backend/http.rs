//! Client for the inference bridge sidecar.
//!
//! Wire protocol (JSON over HTTP/1.1):
//! - `GET  /v1/info` -> `{"model_id", "num_layers", "hidden_dim"}`
//! - `POST /v1/hidden_states {"prompts": [..], "layer_index": -k}` ->
//!   `{"dim": d, "vectors": [[..], ..]}`; 422 carries
//!   `{"error": "context_overflow", "prompt_errors": [{"index": i, "error": ".."}]}`
//! - `POST /v1/topk {"prompt": "..", "k": k}` -> `{"entries": [{"token", "p"}]}`
//!
//! Floats arrive as shortest round-trip decimals and are parsed straight to
//! `f32`; that parse defines the canonical value.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Duration;

use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::{check_states, Backend, BackendError, HiddenStates, ModelInfo, PromptError, TopKPrediction};

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub base_url: String,
    pub timeout_ms: u64,
    /// Extra attempts after a transport failure or 503.
    pub retries: u32,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "http://127.0.0.1:8000".into(),
            timeout_ms: 120_000,
            retries: 2,
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: Client,
    info: OnceLock<ModelInfo>,
}

#[derive(Serialize)]
struct HiddenStatesRequest<'a> {
    prompts: &'a [String],
    layer_index: i32,
}

#[derive(Deserialize)]
struct HiddenStatesResponse<'a> {
    dim: usize,
    #[serde(borrow)]
    vectors: Vec<Vec<&'a RawValue>>,
}

#[derive(Deserialize)]
struct OverflowResponse {
    #[serde(default)]
    prompt_errors: Vec<PromptErrorEntry>,
}

#[derive(Deserialize)]
struct PromptErrorEntry {
    index: usize,
    #[serde(default)]
    error: String,
}

#[derive(Serialize)]
struct TopKRequest<'a> {
    prompt: &'a str,
    k: usize,
}

/// Vectors for the whole batch, or the per-prompt overflow errors.
type BatchOutcome = Result<Vec<Vec<f32>>, BTreeMap<usize, String>>;

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(HttpBackend {
            config,
            client,
            info: OnceLock::new(),
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn send(
        &self,
        build: impl Fn() -> reqwest::blocking::RequestBuilder,
    ) -> Result<(StatusCode, String), BackendError> {
        let mut attempt = 0;
        loop {
            let result = build().send().and_then(|r: Response| {
                let status = r.status();
                r.text().map(|body| (status, body))
            });
            let err = match result {
                Ok((status, _)) if status == StatusCode::SERVICE_UNAVAILABLE => {
                    BackendError::Unavailable("bridge returned 503".into())
                }
                Ok(ok) => return Ok(ok),
                Err(e) => BackendError::Unavailable(e.to_string()),
            };
            if attempt >= self.config.retries {
                return Err(err);
            }
            attempt += 1;
            std::thread::sleep(Duration::from_millis(100 * (1 << attempt.min(5))));
        }
    }

    fn fetch_info(&self) -> Result<ModelInfo, BackendError> {
        let (status, body) = self.send(|| self.client.get(self.url("/v1/info")))?;
        if !status.is_success() {
            return Err(BackendError::Protocol(format!("/v1/info returned {status}: {body}")));
        }
        let info: ModelInfo =
            serde_json::from_str(&body).map_err(|e| BackendError::Protocol(format!("bad /v1/info body: {e}")))?;
        if info.num_layers == 0 || info.hidden_dim == 0 {
            return Err(BackendError::Protocol("bridge reported an empty model".into()));
        }
        Ok(info)
    }

    fn request_states(&self, prompts: &[String], layer_index: i32) -> Result<BatchOutcome, BackendError> {
        let req = HiddenStatesRequest { prompts, layer_index };
        let (status, body) = self.send(|| self.client.post(self.url("/v1/hidden_states")).json(&req))?;
        match status {
            StatusCode::OK => {}
            StatusCode::UNPROCESSABLE_ENTITY => {
                let parsed: OverflowResponse =
                    serde_json::from_str(&body).map_err(|e| BackendError::Protocol(format!("bad 422 body: {e}")))?;
                let errors: BTreeMap<usize, String> = parsed
                    .prompt_errors
                    .into_iter()
                    .filter(|e| e.index < prompts.len())
                    .map(|e| (e.index, e.error))
                    .collect();
                if errors.is_empty() {
                    return Err(BackendError::Protocol(format!("422 without prompt errors: {body}")));
                }
                return Ok(Err(errors));
            }
            StatusCode::BAD_REQUEST => return Err(BackendError::Protocol(format!("bridge rejected request: {body}"))),
            other => {
                return Err(BackendError::Protocol(format!(
                    "/v1/hidden_states returned {other}: {body}"
                )))
            }
        }
        let parsed: HiddenStatesResponse =
            serde_json::from_str(&body).map_err(|e| BackendError::Protocol(format!("bad hidden_states body: {e}")))?;
        let vectors = parsed
            .vectors
            .into_iter()
            .map(|row| {
                if row.len() != parsed.dim {
                    return Err(BackendError::Protocol(format!(
                        "row of length {} in a response declaring dim {}",
                        row.len(),
                        parsed.dim
                    )));
                }
                row.into_iter()
                    .map(|raw| {
                        raw.get()
                            .parse::<f32>()
                            .map_err(|_| BackendError::Protocol(format!("bad float `{}`", raw.get())))
                    })
                    .collect()
            })
            .collect::<Result<Vec<Vec<f32>>, _>>()?;
        Ok(Ok(vectors))
    }
}

impl Backend for HttpBackend {
    fn info(&self) -> Result<ModelInfo, BackendError> {
        if let Some(info) = self.info.get() {
            return Ok(info.clone());
        }
        let info = self.fetch_info()?;
        Ok(self.info.get_or_init(|| info).clone())
    }

    fn hidden_states(&self, prompts: &[String], layer_index: i32) -> Result<HiddenStates, BackendError> {
        let dim = self.info()?.hidden_dim;
        let mut out: Vec<Option<Result<Vec<f32>, PromptError>>> = vec![None; prompts.len()];
        let mut pending: Vec<usize> = (0..prompts.len()).collect();
        // a 422 names the overflowing prompts; resend the rest without them
        while !pending.is_empty() {
            let batch: Vec<String> = pending.iter().map(|&i| prompts[i].clone()).collect();
            match self.request_states(&batch, layer_index)? {
                Ok(vectors) => {
                    if vectors.len() != batch.len() {
                        return Err(BackendError::Protocol(format!(
                            "sent {} prompts, got {} vectors",
                            batch.len(),
                            vectors.len()
                        )));
                    }
                    for (&i, v) in pending.iter().zip(vectors) {
                        out[i] = Some(Ok(v));
                    }
                    pending.clear();
                }
                Err(errors) => {
                    let mut rest = Vec::with_capacity(pending.len());
                    for (pos, &i) in pending.iter().enumerate() {
                        match errors.get(&pos) {
                            Some(detail) => out[i] = Some(Err(PromptError::ContextOverflow { detail: detail.clone() })),
                            None => rest.push(i),
                        }
                    }
                    pending = rest;
                }
            }
        }
        let states: HiddenStates = out.into_iter().map(|s| s.expect("every prompt resolved")).collect();
        check_states(&states, prompts.len(), dim)?;
        Ok(states)
    }

    fn top_k(&self, prompt: &str, k: usize) -> Result<TopKPrediction, BackendError> {
        let req = TopKRequest { prompt, k };
        let (status, body) = self.send(|| self.client.post(self.url("/v1/topk")).json(&req))?;
        match status {
            StatusCode::OK => {}
            StatusCode::NOT_FOUND | StatusCode::NOT_IMPLEMENTED => {
                return Err(BackendError::NotSupported(format!(
                    "bridge has no top-k endpoint ({status})"
                )))
            }
            other => return Err(BackendError::Protocol(format!("/v1/topk returned {other}: {body}"))),
        }
        let pred: TopKPrediction =
            serde_json::from_str(&body).map_err(|e| BackendError::Protocol(format!("bad topk body: {e}")))?;
        Ok(pred)
    }
}
