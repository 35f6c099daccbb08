//! Prompt registry: the shipped template corpus, grouped into named sets.
//!
//! Templates live under `templates/<set_id>/<template_id>.txt` with a
//! `manifest.tsv` per set (`id<TAB>meta_task<TAB>source`). Bodies carry the
//! placeholder [`PLACEHOLDER`] exactly once; rendering swaps it for the input
//! sentence and touches nothing else.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Marker standing in for the input sentence inside template bodies.
pub const PLACEHOLDER: &str = "⟦TEXT⟧";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown prompt set `{0}`")]
    UnknownSet(String),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("template `{id}` must contain the placeholder exactly once (found {count})")]
    Placeholder { id: String, count: usize },
    #[error("manifest for set `{set}` line {line}: {msg}")]
    Manifest { set: String, line: usize, msg: String },
    #[error("template `{0}` appears in several sets with different bodies")]
    ConflictingBody(String),
    #[error("prompt set `{0}` is empty")]
    EmptySet(String),
    #[error("io error reading templates: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetaTask {
    TextClassification,
    SentimentAnalysis,
    ParaphraseIdentification,
    InformationExtraction,
    Baseline,
    TaskSpecific,
    Perturbed,
}

impl MetaTask {
    pub const ALL: [MetaTask; 7] = [
        MetaTask::TextClassification,
        MetaTask::SentimentAnalysis,
        MetaTask::ParaphraseIdentification,
        MetaTask::InformationExtraction,
        MetaTask::Baseline,
        MetaTask::TaskSpecific,
        MetaTask::Perturbed,
    ];

    /// The four meta-tasks whose prompts make up the general-purpose set.
    pub const CORE: [MetaTask; 4] = [
        MetaTask::TextClassification,
        MetaTask::SentimentAnalysis,
        MetaTask::ParaphraseIdentification,
        MetaTask::InformationExtraction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetaTask::TextClassification => "TextClassification",
            MetaTask::SentimentAnalysis => "SentimentAnalysis",
            MetaTask::ParaphraseIdentification => "ParaphraseIdentification",
            MetaTask::InformationExtraction => "InformationExtraction",
            MetaTask::Baseline => "Baseline",
            MetaTask::TaskSpecific => "TaskSpecific",
            MetaTask::Perturbed => "Perturbed",
        }
    }

    pub fn abbrev(self) -> &'static str {
        match self {
            MetaTask::TextClassification => "TC",
            MetaTask::SentimentAnalysis => "SA",
            MetaTask::ParaphraseIdentification => "PI",
            MetaTask::InformationExtraction => "IE",
            MetaTask::Baseline => "Baseline",
            MetaTask::TaskSpecific => "TaskSpecific",
            MetaTask::Perturbed => "Perturbed",
        }
    }
}

impl fmt::Display for MetaTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetaTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetaTask::ALL
            .into_iter()
            .find(|m| m.name() == s || m.abbrev() == s)
            .ok_or_else(|| format!("unknown meta-task `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub meta_task: MetaTask,
    body: String,
    pub source: String,
}

impl PromptTemplate {
    pub fn new(
        id: impl Into<String>,
        meta_task: MetaTask,
        body: impl Into<String>,
        source: impl Into<String>,
    ) -> Result<Self, RegistryError> {
        let id = id.into();
        let body = body.into();
        let count = body.matches(PLACEHOLDER).count();
        if count != 1 {
            return Err(RegistryError::Placeholder { id, count });
        }
        Ok(PromptTemplate {
            id,
            meta_task,
            body,
            source: source.into(),
        })
    }

    /// Template text with the placeholder marker still in place.
    pub fn body(&self) -> &str {
        &self.body
    }

    /// Substitutes `sentence` for the placeholder. Nothing is escaped, trimmed
    /// or appended.
    pub fn render(&self, sentence: &str) -> String {
        // constructor guarantees exactly one marker
        let (head, tail) = self
            .body
            .split_once(PLACEHOLDER)
            .expect("placeholder checked at construction");
        let mut out = String::with_capacity(head.len() + sentence.len() + tail.len());
        out.push_str(head);
        out.push_str(sentence);
        out.push_str(tail);
        out
    }
}

/// Ordered group of template ids. Order is lexicographic by id; concat
/// aggregation depends on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub id: String,
    template_ids: Vec<String>,
}

impl PromptSet {
    pub fn new(id: impl Into<String>, ids: impl IntoIterator<Item = impl Into<String>>) -> Self {
        let mut template_ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        template_ids.sort();
        template_ids.dedup();
        PromptSet {
            id: id.into(),
            template_ids,
        }
    }

    pub fn template_ids(&self) -> &[String] {
        &self.template_ids
    }

    pub fn len(&self) -> usize {
        self.template_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.template_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetSummary {
    pub set_id: String,
    pub count: usize,
    pub breakdown: BTreeMap<MetaTask, usize>,
}

macro_rules! builtin_set {
    ($set:literal: $($tid:literal),+ $(,)?) => {
        (
            $set,
            include_str!(concat!("../templates/", $set, "/manifest.tsv")),
            &[$(($tid, include_str!(concat!("../templates/", $set, "/", $tid, ".txt")))),+],
        )
    };
}

type EmbeddedSet = (&'static str, &'static str, &'static [(&'static str, &'static str)]);

const BUILTIN: &[EmbeddedSet] = &[
    builtin_set!("eol": "eol-base"),
    builtin_set!("eol-paraphrases8":
        "eol-base", "eol-para-1", "eol-para-2", "eol-para-3",
        "eol-para-4", "eol-para-5", "eol-para-6", "eol-para-7"),
    builtin_set!("metaeol8":
        "tc-category", "tc-opinion-fact", "sa-review-rating", "sa-emotion",
        "pi-similarity", "pi-synonym", "ie-key-fact", "ie-entity-relation"),
    builtin_set!("sa5":
        "sa-review-rating", "sa-emotion", "sa-polarity", "sa-intensity", "sa-aspect"),
    builtin_set!("sa-perturbed":
        "sa-review-rating", "sa-perturbed-1", "sa-perturbed-2", "sa-perturbed-3", "sa-perturbed-4"),
    builtin_set!("transfer":
        "task-mr", "task-cr", "task-subj", "task-mpqa", "task-sst", "task-trec", "task-mrpc"),
];

/// Benchmark names with a task-specific prompt in the `transfer` set.
pub const TRANSFER_TASKS: [&str; 7] = ["mr", "cr", "subj", "mpqa", "sst", "trec", "mrpc"];

/// Immutable after construction; cheap to clone and share across threads.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    templates: HashMap<String, Arc<PromptTemplate>>,
    sets: BTreeMap<String, PromptSet>,
}

impl Registry {
    /// Registry over the corpus compiled into the crate.
    pub fn builtin() -> Self {
        let mut reg = Registry::default();
        for (set_id, manifest, files) in BUILTIN {
            let bodies: HashMap<&str, &str> = files.iter().copied().collect();
            reg.add_set(set_id, manifest, |tid| {
                bodies
                    .get(tid)
                    .map(|b| b.to_string())
                    .ok_or_else(|| RegistryError::UnknownTemplate(tid.to_string()))
            })
            .expect("builtin template corpus is well-formed");
        }
        reg
    }

    /// Adds every `<dir>/<set_id>/manifest.tsv` set found under `dir`.
    pub fn load_dir(mut self, dir: &Path) -> Result<Self, RegistryError> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(Result::ok)
            .filter(|e| e.path().join("manifest.tsv").is_file())
            .collect();
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let set_id = entry.file_name().to_string_lossy().into_owned();
            let set_dir = entry.path();
            let manifest = std::fs::read_to_string(set_dir.join("manifest.tsv"))?;
            self.add_set(&set_id, &manifest, |tid| {
                Ok(std::fs::read_to_string(set_dir.join(format!("{tid}.txt")))?)
            })?;
        }
        Ok(self)
    }

    fn add_set(
        &mut self,
        set_id: &str,
        manifest: &str,
        mut read_body: impl FnMut(&str) -> Result<String, RegistryError>,
    ) -> Result<(), RegistryError> {
        let mut ids = Vec::new();
        for (i, line) in manifest.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| RegistryError::Manifest {
                set: set_id.to_string(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let mut fields = line.split('\t');
            let (Some(id), Some(task), Some(source), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(bad("expected `id<TAB>meta_task<TAB>source`"));
            };
            let meta_task: MetaTask = task.parse().map_err(|e: String| bad(&e))?;
            let template = PromptTemplate::new(id, meta_task, read_body(id)?, source)?;
            match self.templates.get(id) {
                Some(existing) if existing.body != template.body => {
                    return Err(RegistryError::ConflictingBody(id.to_string()))
                }
                Some(_) => {}
                None => {
                    self.templates.insert(id.to_string(), Arc::new(template));
                }
            }
            ids.push(id.to_string());
        }
        if ids.is_empty() {
            return Err(RegistryError::EmptySet(set_id.to_string()));
        }
        self.sets.insert(set_id.to_string(), PromptSet::new(set_id, ids));
        Ok(())
    }

    pub fn template(&self, id: &str) -> Result<&Arc<PromptTemplate>, RegistryError> {
        self.templates
            .get(id)
            .ok_or_else(|| RegistryError::UnknownTemplate(id.to_string()))
    }

    /// Resolves a set id. Besides the named sets, `transfer:<task>` selects
    /// the single task-specific prompt for that benchmark.
    pub fn load_set(&self, set_id: &str) -> Result<PromptSet, RegistryError> {
        if let Some(task) = set_id.strip_prefix("transfer:") {
            let tid = format!("task-{task}");
            if !self.templates.contains_key(&tid) {
                return Err(RegistryError::UnknownSet(set_id.to_string()));
            }
            return Ok(PromptSet::new(set_id, [tid]));
        }
        self.sets
            .get(set_id)
            .cloned()
            .ok_or_else(|| RegistryError::UnknownSet(set_id.to_string()))
    }

    pub fn templates_of(&self, set: &PromptSet) -> Result<Vec<Arc<PromptTemplate>>, RegistryError> {
        set.template_ids().iter().map(|id| self.template(id).cloned()).collect()
    }

    /// Sub-set of `set` restricted to the given meta-tasks.
    pub fn filter_set(
        &self,
        set: &PromptSet,
        tasks: &[MetaTask],
        new_id: impl Into<String>,
    ) -> Result<PromptSet, RegistryError> {
        let ids = self
            .templates_of(set)?
            .into_iter()
            .filter(|t| tasks.contains(&t.meta_task))
            .map(|t| t.id.clone());
        Ok(PromptSet::new(new_id, ids))
    }

    pub fn list_sets(&self) -> Vec<SetSummary> {
        self.sets
            .values()
            .map(|set| {
                let mut breakdown = BTreeMap::new();
                for id in set.template_ids() {
                    *breakdown.entry(self.templates[id].meta_task).or_insert(0) += 1;
                }
                SetSummary {
                    set_id: set.id.clone(),
                    count: set.len(),
                    breakdown,
                }
            })
            .collect()
    }
}

/// Convenience wrapper over [`Registry::builtin`].
pub fn load_builtin(set_id: &str) -> Result<PromptSet, RegistryError> {
    Registry::builtin().load_set(set_id)
}
