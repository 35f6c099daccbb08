//! Run configuration: a flat `key=value` file, overridable key by key, and
//! echoed into every report as a snapshot that can be replayed.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::backend::{Backend, BackendError, HttpBackend, HttpConfig, LayerSelector, MockBackend};
use crate::embed::{AggregationMethod, EmbedConfig};
use crate::prompts::{Registry, RegistryError};

/// Prefix of snapshot lines inside a report.
pub const SNAPSHOT_PREFIX: &str = "#! ";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {msg}")]
    BadValue { key: String, value: String, msg: String },
    #[error("line {line}: expected key=value, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Mock,
    Http,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Mock => "mock",
            BackendKind::Http => "http",
        })
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(BackendKind::Mock),
            "http" => Ok(BackendKind::Http),
            other => Err(format!("unknown backend `{other}` (expected mock or http)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub url: String,
    pub timeout_ms: u64,
    pub retries: u32,
    pub seed: u64,
    pub mock_layers: usize,
    pub mock_dim: usize,
    pub prompts: String,
    /// Extra template directory layered over the built-in registry.
    pub templates: Option<PathBuf>,
    pub layer: LayerSelector,
    pub agg: AggregationMethod,
    pub normalize: bool,
    pub parallelism: usize,
    pub cache: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let http = HttpConfig::default();
        RunConfig {
            backend: BackendKind::Mock,
            url: http.base_url,
            timeout_ms: http.timeout_ms,
            retries: http.retries,
            seed: 0,
            mock_layers: 32,
            mock_dim: 32,
            prompts: "metaeol8".into(),
            templates: None,
            layer: LayerSelector::Final,
            agg: AggregationMethod::Mean,
            normalize: false,
            parallelism: 1,
            cache: None,
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        msg: e.to_string(),
    })
}

impl RunConfig {
    pub const KEYS: [&'static str; 15] = [
        "backend",
        "url",
        "timeout_ms",
        "retries",
        "seed",
        "mock_layers",
        "mock_dim",
        "prompts",
        "templates",
        "layer",
        "agg",
        "normalize",
        "parallelism",
        "cache",
        "out",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key.trim() {
            "backend" => self.backend = parse(key, value)?,
            "url" => self.url = value.to_string(),
            "timeout_ms" => self.timeout_ms = parse(key, value)?,
            "retries" => self.retries = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "mock_layers" => self.mock_layers = positive(key, value)?,
            "mock_dim" => self.mock_dim = positive(key, value)?,
            "prompts" => self.prompts = value.to_string(),
            "templates" => self.templates = (!value.is_empty()).then(|| PathBuf::from(value)),
            "layer" => self.layer = parse(key, value)?,
            "agg" => self.agg = parse(key, value)?,
            "normalize" => self.normalize = parse(key, value)?,
            "parallelism" => self.parallelism = positive(key, value)?,
            "cache" => self.cache = (!value.is_empty()).then(|| PathBuf::from(value)),
            "out" => self.out = (!value.is_empty()).then(|| PathBuf::from(value)),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies a config file's settings. Accepts plain `key=value` files
    /// (`#` starts a comment) and reports, whose snapshot lines are used and
    /// everything else ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let is_report = text.lines().any(|l| l.starts_with(SNAPSHOT_PREFIX));
        for (n, line) in text.lines().enumerate() {
            let body = match line.strip_prefix(SNAPSHOT_PREFIX) {
                Some(b) => b,
                None if is_report => continue,
                None => line,
            };
            let body = body.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                text: line.to_string(),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.apply_text(&text)
    }

    /// Settings that determine a report's numbers, in a fixed order. File
    /// locations (`cache`, `out`) are left out: they never change results.
    pub fn snapshot(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![("backend", self.backend.to_string())];
        match self.backend {
            BackendKind::Mock => {
                out.push(("seed", self.seed.to_string()));
                out.push(("mock_layers", self.mock_layers.to_string()));
                out.push(("mock_dim", self.mock_dim.to_string()));
            }
            BackendKind::Http => {
                out.push(("url", self.url.clone()));
                out.push(("timeout_ms", self.timeout_ms.to_string()));
                out.push(("retries", self.retries.to_string()));
            }
        }
        out.push(("prompts", self.prompts.clone()));
        if let Some(t) = &self.templates {
            out.push(("templates", t.display().to_string()));
        }
        out.push(("layer", self.layer.to_string()));
        out.push(("agg", self.agg.to_string()));
        out.push(("normalize", self.normalize.to_string()));
        out.push(("parallelism", self.parallelism.to_string()));
        out
    }

    /// Snapshot as `#! key=value` lines.
    pub fn snapshot_text(&self) -> String {
        self.snapshot()
            .into_iter()
            .map(|(k, v)| format!("{SNAPSHOT_PREFIX}{k}={v}\n"))
            .collect()
    }

    pub fn embed_config(&self) -> EmbedConfig {
        EmbedConfig {
            prompt_set: self.prompts.clone(),
            layer: self.layer,
            aggregation: self.agg,
            normalize: self.normalize,
            parallelism: self.parallelism,
        }
    }

    pub fn registry(&self) -> Result<Registry, RegistryError> {
        let registry = Registry::builtin();
        match &self.templates {
            Some(dir) => registry.load_dir(dir),
            None => Ok(registry),
        }
    }

    pub fn build_backend(&self) -> Result<Box<dyn Backend>, BackendError> {
        Ok(match self.backend {
            BackendKind::Mock => Box::new(MockBackend::new(self.seed, self.mock_layers, self.mock_dim)),
            BackendKind::Http => Box::new(HttpBackend::new(HttpConfig {
                base_url: self.url.clone(),
                timeout_ms: self.timeout_ms,
                retries: self.retries,
            })?),
        })
    }
}

fn positive(key: &str, value: &str) -> Result<usize, ConfigError> {
    let n: usize = parse(key, value)?;
    if n == 0 {
        return Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            msg: "must be at least 1".into(),
        });
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_override() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nlayer = -3\nagg=concat\n\nseed=7\n").unwrap();
        assert_eq!(c.layer, LayerSelector::NegIndex(3));
        assert_eq!(c.agg, AggregationMethod::Concat);
        c.set("seed", "9").unwrap();
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn errors() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("colour", "red"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(c.set("agg", "median"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(c.set("parallelism", "0"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(
            c.apply_text("layer\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn snapshot_replays() {
        let mut c = RunConfig::default();
        c.apply_text("layer=prop:0.1\nprompts=sa5\nseed=3\nnormalize=true\ncache=/tmp/x\n")
            .unwrap();
        let report = format!("{}sts12\t1.5\navg\t1.5\n", c.snapshot_text());
        let mut replay = RunConfig::default();
        replay.apply_text(&report).unwrap();
        assert_eq!(replay.snapshot(), c.snapshot());
        assert_eq!(replay.cache, None);
    }

    #[test]
    fn distinct_layers_distinct_snapshots() {
        let mut a = RunConfig::default();
        let mut b = RunConfig::default();
        a.set("layer", "-3").unwrap();
        b.set("layer", "-1").unwrap();
        assert_ne!(a.snapshot_text(), b.snapshot_text());
    }
}
