//! Next-token probing: what each prompt makes the model want to say next, and
//! how much of that probability goes to stop words.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::OnceLock;

use crate::backend::{top_k_next_tokens, Backend, BackendError, TopKPrediction};
use crate::prompts::{PromptSet, Registry, RegistryError};

use thiserror::Error;

const STOPWORDS_TXT: &str = include_str!("../data/stopwords.txt");

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

pub fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS_TXT.lines().map(str::trim).filter(|w| !w.is_empty()).collect())
}

/// Token text with subword-tokenizer word-start markers and surrounding
/// whitespace removed, lowercased.
pub fn normalize_token(token: &str) -> String {
    token
        .trim_start_matches(|c: char| c.is_whitespace() || c == '\u{2581}' || c == '\u{0120}')
        .trim_end()
        .to_lowercase()
}

pub fn is_stopword(token: &str) -> bool {
    stopwords().contains(normalize_token(token).as_str())
}

/// Probability mass of the stop-word entries in `pred`.
pub fn stopword_mass(pred: &TopKPrediction) -> f64 {
    pred.entries
        .iter()
        .filter(|e| is_stopword(&e.token))
        .fold(0.0, |acc, e| acc + e.p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub template_id: String,
    pub prediction: TopKPrediction,
    pub stopword_mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub model_id: String,
    pub sentence: String,
    pub k: usize,
    /// Sorted by template id.
    pub rows: Vec<ProbeRow>,
}

/// Top-k next tokens for every template of `set` rendered around `sentence`.
/// A backend that cannot predict tokens fails the whole probe.
pub fn probe_top_tokens(
    backend: &dyn Backend,
    registry: &Registry,
    sentence: &str,
    set: &PromptSet,
    k: usize,
) -> Result<ProbeReport, ProbeError> {
    let model_id = backend.info()?.model_id;
    let mut rows = Vec::with_capacity(set.len());
    for template in registry.templates_of(set)? {
        let prediction = top_k_next_tokens(backend, &template.render(sentence), k)?;
        rows.push(ProbeRow {
            template_id: template.id.clone(),
            stopword_mass: stopword_mass(&prediction),
            prediction,
        });
    }
    rows.sort_by(|a, b| a.template_id.cmp(&b.template_id));
    Ok(ProbeReport {
        model_id,
        sentence: sentence.to_string(),
        k,
        rows,
    })
}

impl ProbeReport {
    /// `template_id | top tokens | stopword_mass`.
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.template_id.len()).max().unwrap_or(0).max(8);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$} | top tokens | stopword_mass", "template");
        for r in &self.rows {
            let tokens: Vec<String> = r.prediction.entries.iter().map(|e| format!("{:?}", e.token)).collect();
            let _ = writeln!(
                out,
                "{:<width$} | {} | {:.4}",
                r.template_id,
                tokens.join(" "),
                r.stopword_mass
            );
        }
        out
    }

    /// `template<TAB>rank<TAB>token<TAB>p` lines plus a
    /// `template<TAB>stopword_mass<TAB>value` line per template.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            for (rank, e) in r.prediction.entries.iter().enumerate() {
                let _ = writeln!(out, "{}\t{}\t{:?}\t{}", r.template_id, rank + 1, e.token, e.p);
            }
            let _ = writeln!(out, "{}\tstopword_mass\t{}", r.template_id, r.stopword_mass);
        }
        out
    }
}
