//! Experiment series built on STS evaluation: cumulative meta-task sets,
//! exhaustive prompt subsets, layer sweeps and prompt-perturbation variance.
//!
//! All runs in a series share one cache, so each (template, sentence, layer)
//! reaches the backend at most once.

use std::fmt::Write as _;

use thiserror::Error;

use crate::backend::{Backend, LayerSelector};
use crate::embed::{EmbedConfig, EmbedError, Embedder};
use crate::prompts::{MetaTask, PromptSet, Registry, RegistryError};
use crate::storage::Cache;
use crate::sts::{evaluate_sts, StsDataset, StsError, StsReport};

/// Template the variance study swaps out when the variant set names none of
/// the base set's templates.
pub const DEFAULT_VARIED_TEMPLATE: &str = "sa-review-rating";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sts(#[from] StsError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRow {
    pub label: String,
    pub prompts: usize,
    pub report: StsReport,
}

impl SeriesRow {
    pub fn average(&self) -> f64 {
        self.report.average().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeMean {
    pub size: usize,
    pub combinations: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSummary {
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation; `None` for a single run.
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub kind: String,
    pub rows: Vec<SeriesRow>,
    pub size_means: Vec<SizeMean>,
    pub variance: Option<VarianceSummary>,
}

impl Series {
    fn new(kind: &str, rows: Vec<SeriesRow>) -> Self {
        Series {
            kind: kind.to_string(),
            rows,
            size_means: Vec::new(),
            variance: None,
        }
    }

    /// Machine-readable lines at full precision:
    /// `row<TAB>label<TAB>prompts<TAB>avg[<TAB>dataset=score]...`, then
    /// `size<TAB>k<TAB>combinations<TAB>mean` or
    /// `variance<TAB>runs<TAB>mean<TAB>std`.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = write!(out, "row\t{}\t{}\t{}", r.label, r.prompts, r.average());
            for s in &r.report.scores {
                let _ = write!(out, "\t{}={}", s.name, s.score);
            }
            out.push('\n');
        }
        for m in &self.size_means {
            let _ = writeln!(out, "size\t{}\t{}\t{}", m.size, m.combinations, m.mean);
        }
        if let Some(v) = &self.variance {
            let std = v.std.map_or("n/a".to_string(), |s| s.to_string());
            let _ = writeln!(out, "variance\t{}\t{}\t{std}", v.runs, v.mean);
        }
        out
    }

    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
        let names: Vec<&str> = self
            .rows
            .first()
            .map(|r| r.report.scores.iter().map(|s| s.name.as_str()).collect())
            .unwrap_or_default();
        let mut out = String::new();
        let _ = write!(out, "{:<width$} {:>7}", "run", "prompts");
        for n in &names {
            let _ = write!(out, " {n:>8}");
        }
        let _ = writeln!(out, " {:>8}", "avg");
        for r in &self.rows {
            let _ = write!(out, "{:<width$} {:>7}", r.label, r.prompts);
            for s in &r.report.scores {
                let _ = write!(out, " {:>8.2}", s.score);
            }
            let _ = writeln!(out, " {:>8.2}", r.average());
        }
        for m in &self.size_means {
            let _ = writeln!(
                out,
                "size {}: mean {:.2} over {} combinations",
                m.size, m.mean, m.combinations
            );
        }
        if let Some(v) = &self.variance {
            match v.std {
                Some(s) => {
                    let _ = writeln!(out, "{} runs: {:.2} ± {:.2}", v.runs, v.mean, s);
                }
                None => {
                    let _ = writeln!(out, "{} run: {:.2}", v.runs, v.mean);
                }
            }
        }
        out
    }
}

/// Shared state for one series of STS runs.
pub struct Study<'a> {
    pub backend: &'a dyn Backend,
    pub registry: &'a Registry,
    pub base: EmbedConfig,
    pub datasets: &'a [StsDataset],
    pub cache: &'a Cache,
}

impl Study<'_> {
    fn run(&self, label: String, set: PromptSet, layer: Option<LayerSelector>) -> Result<SeriesRow, ExperimentError> {
        let mut config = self.base.clone();
        if let Some(l) = layer {
            config.layer = l;
        }
        let prompts = set.len();
        let embedder = Embedder::with_set(self.backend, self.registry, set, config, Some(self.cache))?;
        Ok(SeriesRow {
            label,
            prompts,
            report: evaluate_sts(&embedder, self.datasets)?,
        })
    }

    /// Cumulative meta-task sets TC, TC+SA, TC+SA+PI, TC+SA+PI+IE drawn from
    /// the base prompt set.
    pub fn ablate_tasks(&self) -> Result<Series, ExperimentError> {
        let base = self.registry.load_set(&self.base.prompt_set)?;
        let mut rows = Vec::new();
        for n in 1..=MetaTask::CORE.len() {
            let tasks = &MetaTask::CORE[..n];
            let label = tasks.iter().map(|t| t.abbrev()).collect::<Vec<_>>().join("+");
            let set = self
                .registry
                .filter_set(&base, tasks, format!("{}[{label}]", base.id))?;
            if set.is_empty() {
                return Err(ExperimentError::Invalid(format!(
                    "set {} has no templates for {label}",
                    base.id
                )));
            }
            rows.push(self.run(label, set, None)?);
        }
        Ok(Series::new("tasks", rows))
    }

    /// Every non-empty subset of `set_id`, ordered by size and then by the
    /// subset's bitmask over the set's sorted template ids, plus the mean
    /// average per subset size.
    pub fn ablate_prompts(&self, set_id: &str) -> Result<Series, ExperimentError> {
        let set = self.registry.load_set(set_id)?;
        let ids = set.template_ids();
        if ids.is_empty() || ids.len() > 16 {
            return Err(ExperimentError::Invalid(format!(
                "prompt ablation needs 1 to 16 templates, {set_id} has {}",
                ids.len()
            )));
        }
        let mut masks: Vec<u32> = (1..(1u32 << ids.len())).collect();
        masks.sort_by_key(|m| (m.count_ones(), *m));
        let mut rows = Vec::with_capacity(masks.len());
        for mask in masks {
            let chosen: Vec<&String> = ids
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, id)| id)
                .collect();
            let label = chosen.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("+");
            let sub = PromptSet::new(format!("{set_id}[{label}]"), chosen.iter().map(|s| s.as_str()));
            rows.push(self.run(label, sub, None)?);
        }
        let mut series = Series::new("prompts", rows);
        series.size_means = (1..=ids.len())
            .map(|size| {
                let avgs: Vec<f64> = series
                    .rows
                    .iter()
                    .filter(|r| r.prompts == size)
                    .map(SeriesRow::average)
                    .collect();
                SizeMean {
                    size,
                    combinations: avgs.len(),
                    mean: avgs.iter().sum::<f64>() / avgs.len() as f64,
                }
            })
            .collect();
        Ok(series)
    }

    /// One run per layer index from `-from` to `-to` inclusive, either way.
    pub fn ablate_layers(&self, from: usize, to: usize) -> Result<Series, ExperimentError> {
        if from == 0 || to == 0 {
            return Err(ExperimentError::Invalid("layer indices start at -1".into()));
        }
        let ks: Vec<usize> = if from <= to {
            (from..=to).collect()
        } else {
            (to..=from).rev().collect()
        };
        let set = self.registry.load_set(&self.base.prompt_set)?;
        let rows = ks
            .into_iter()
            .map(|k| self.run(format!("-{k}"), set.clone(), Some(LayerSelector::NegIndex(k))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Series::new("layers", rows))
    }

    /// Runs the base set once per template of `variant_set`, each time with
    /// that template standing in for the varied one, and summarizes the STS
    /// averages as mean and sample standard deviation.
    pub fn variance(&self, variant_set: &str) -> Result<Series, ExperimentError> {
        let base = self.registry.load_set(&self.base.prompt_set)?;
        let variants = self.registry.load_set(variant_set)?;
        let varied = base
            .template_ids()
            .iter()
            .find(|id| variants.template_ids().contains(id))
            .cloned()
            .unwrap_or_else(|| DEFAULT_VARIED_TEMPLATE.to_string());
        if !base.template_ids().contains(&varied) {
            return Err(ExperimentError::Invalid(format!(
                "base set {} does not contain {varied}",
                base.id
            )));
        }
        let mut rows = Vec::new();
        for variant in variants.template_ids() {
            let ids = base
                .template_ids()
                .iter()
                .map(|id| if *id == varied { variant } else { id });
            let set = PromptSet::new(format!("{}[{varied}={variant}]", base.id), ids.map(String::as_str));
            rows.push(self.run(variant.clone(), set, None)?);
        }
        let avgs: Vec<f64> = rows.iter().map(SeriesRow::average).collect();
        let mut series = Series::new("variance", rows);
        series.variance = Some(mean_std(&avgs));
        Ok(series)
    }
}

/// Mean and sample standard deviation. Deviations are taken from the first
/// value before shifting, so identical inputs give a standard deviation of
/// exactly zero.
pub fn mean_std(xs: &[f64]) -> VarianceSummary {
    let n = xs.len();
    if n == 0 {
        return VarianceSummary {
            runs: 0,
            mean: f64::NAN,
            std: None,
        };
    }
    let shift = xs[0];
    let d: Vec<f64> = xs.iter().map(|x| x - shift).collect();
    let dm = d.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| (d.iter().map(|v| (v - dm) * (v - dm)).sum::<f64>() / (n - 1) as f64).sqrt());
    VarianceSummary {
        runs: n,
        mean: shift + dm,
        std,
    }
}
