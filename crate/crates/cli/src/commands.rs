use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use metaeol::backend::{Backend, BackendError};
use metaeol::config::{ConfigError, RunConfig};
use metaeol::embed::{EmbedConfig, EmbedError, Embedder, FailurePolicy, Provenance};
use metaeol::error::{Classify, ErrorKind};
use metaeol::experiments::{ExperimentError, Series, Study};
use metaeol::probe::{probe_top_tokens, ProbeError};
use metaeol::prompts::{PromptSet, Registry, RegistryError, TRANSFER_TASKS};
use metaeol::storage::{dump, read_embeddings, write_embeddings, Cache, CacheKey, EmbeddingRecord, StorageError};
use metaeol::sts::{convert_raw_sts, evaluate_sts, load_sts, StsDataset, StsError, StsReport, STS_DATASETS};
use metaeol::transfer::{evaluate_transfer, load_transfer, TransferError, TransferReport};

use crate::{AblateMode, CacheAction, Cli, Command};

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
    pub hint: Option<String>,
}

impl CliError {
    fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
            hint: None,
        }
    }
}

macro_rules! classified {
    ($($t:ty),+) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new(e.kind(), e.to_string())
            }
        }
    )+};
}

classified!(
    BackendError,
    ConfigError,
    EmbedError,
    ExperimentError,
    RegistryError,
    StorageError,
    StsError,
    TransferError
);

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        let mut err = CliError::new(e.kind(), e.to_string());
        if matches!(e, ProbeError::Backend(BackendError::NotSupported(_))) {
            err.hint = Some(
                "next-token probing needs a model that exposes its output distribution; \
                 start the inference bridge and pass --backend http --url <bridge url>"
                    .into(),
            );
        }
        err
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    let config = cli.shared.run_config()?;
    match cli.command {
        Command::Embed { input } => embed(&config, &input),
        Command::EvalSts { data, datasets } => eval_sts(&config, &data, &datasets),
        Command::EvalTransfer { data, tasks } => eval_transfer(&config, &data, &tasks),
        Command::Ablate {
            mode,
            data,
            datasets,
            set,
            range,
        } => ablate(&config, mode, &data, &datasets, &set, &range),
        Command::Variance {
            data,
            datasets,
            variants,
        } => variance(&config, &data, &datasets, &variants),
        Command::Probe { sentence, k } => probe(&config, &sentence, k),
        Command::Cache {
            action: CacheAction::Dump { path },
        } => cache_dump(&path),
        Command::Sets => sets(&config),
        Command::ConvertSts { raw } => {
            let text = convert_raw_sts(&raw)?;
            emit(&config, &text, &text)
        }
    }
}

fn open_cache(config: &RunConfig) -> Result<Option<Cache>> {
    Ok(match &config.cache {
        Some(dir) => Some(Cache::open(dir)?),
        None => None,
    })
}

fn finish_cache(cache: Option<Cache>) -> Result<()> {
    if let Some(c) = cache {
        c.flush()?;
    }
    Ok(())
}

/// Prints `table` and writes `report` to `--out` when given.
fn emit(config: &RunConfig, table: &str, report: &str) -> Result<()> {
    print!("{table}");
    if let Some(out) = &config.out {
        write_file(out, report)?;
        eprintln!("report written to {}", out.display());
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| CliError::new(ErrorKind::Data, format!("cannot write {}: {e}", path.display())))
}

struct Header<'a> {
    command: &'a str,
    config: &'a RunConfig,
    lines: Vec<String>,
}

impl<'a> Header<'a> {
    fn new(command: &'a str, config: &'a RunConfig) -> Self {
        Header {
            command,
            config,
            lines: Vec::new(),
        }
    }

    fn model(mut self, backend: &dyn Backend) -> Result<Self> {
        let info = backend.info()?;
        self.lines.push(format!(
            "model {} num_layers={} hidden_dim={}",
            info.model_id, info.num_layers, info.hidden_dim
        ));
        Ok(self)
    }

    fn provenance(mut self, label: &str, p: &Provenance) -> Self {
        self.lines.push(format!(
            "{label} source={} layer_index={} aggregation={}",
            p.source, p.layer_index, p.aggregation
        ));
        self
    }

    fn line(mut self, text: String) -> Self {
        self.lines.push(text);
        self
    }
}

impl fmt::Display for Header<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# metaeol {}", self.command)?;
        f.write_str(&self.config.snapshot_text())?;
        for l in &self.lines {
            writeln!(f, "# {l}")?;
        }
        Ok(())
    }
}

fn embedder<'a>(
    backend: &'a dyn Backend,
    registry: &Registry,
    config: EmbedConfig,
    cache: Option<&'a Cache>,
) -> Result<Embedder<'a>> {
    Ok(Embedder::new(backend, registry, config, cache)?)
}

fn embed(config: &RunConfig, input: &Path) -> Result<()> {
    let out = config
        .out
        .as_ref()
        .ok_or_else(|| CliError::new(ErrorKind::Usage, "embed needs --out <file>"))?;
    let text = std::fs::read_to_string(input)
        .map_err(|e| CliError::new(ErrorKind::Data, format!("cannot read {}: {e}", input.display())))?;
    let sentences: Vec<&str> = text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.trim().is_empty())
        .collect();
    let backend = config.build_backend()?;
    let registry = config.registry()?;
    let cache = open_cache(config)?;
    let emb = embedder(&*backend, &registry, config.embed_config(), cache.as_ref())?;
    let matrix = emb.embed_corpus(&sentences, FailurePolicy::SkipAndReport)?;

    let p = &matrix.provenance;
    let source = format!("{}:{}", p.source, p.aggregation);
    let mut seen = std::collections::HashSet::new();
    let mut records = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        if let Some(v) = matrix.row(i) {
            if seen.insert(*s) {
                let key = CacheKey::new(&p.model_id, &source, p.layer_index, s);
                records.push(EmbeddingRecord::new(key.canonical(), v.to_vec()));
            }
        }
    }
    write_embeddings(out, matrix.dim as u32, &records)?;

    let hit_rate = cache.as_ref().map_or("cache off".to_string(), |c| {
        format!("cache hit rate {:.1}%", 100.0 * c.stats().hit_rate())
    });
    println!(
        "embedded {} sentences ({} unique) with {} prompts, dim {}, {hit_rate}",
        sentences.len(),
        seen.len(),
        emb.prompt_set().len(),
        matrix.dim
    );
    for f in &matrix.failures {
        println!(
            "skipped line {}: template {} overflowed the context ({})",
            f.index + 1,
            f.template_id,
            f.detail
        );
    }
    finish_cache(cache)
}

/// Dataset names to evaluate: the requested ones, or every known name that
/// has a file in `dir`.
fn select_names(dir: &Path, requested: &[String], known: &[&str], what: &str) -> Result<Vec<String>> {
    if !requested.is_empty() {
        for name in requested {
            if !known.contains(&name.as_str()) {
                return Err(CliError::new(
                    ErrorKind::Usage,
                    format!("unknown {what} `{name}` (known: {})", known.join(", ")),
                ));
            }
            if !dir.join(format!("{name}.tsv")).is_file() {
                return Err(CliError::new(
                    ErrorKind::Data,
                    format!(
                        "{what} `{name}` not found: expected {}",
                        dir.join(format!("{name}.tsv")).display()
                    ),
                ));
            }
        }
        return Ok(requested.to_vec());
    }
    let present: Vec<String> = known
        .iter()
        .filter(|n| dir.join(format!("{n}.tsv")).is_file())
        .map(|n| n.to_string())
        .collect();
    if present.is_empty() {
        return Err(CliError::new(
            ErrorKind::Data,
            format!("no {what} files (<name>.tsv) found in {}", dir.display()),
        ));
    }
    Ok(present)
}

fn load_sts_sets(dir: &Path, requested: &[String]) -> Result<Vec<StsDataset>> {
    select_names(dir, requested, &STS_DATASETS, "STS dataset")?
        .iter()
        .map(|n| Ok(load_sts(&dir.join(format!("{n}.tsv")), n)?))
        .collect()
}

fn sts_report_text(config: &RunConfig, backend: &dyn Backend, report: &StsReport) -> Result<String> {
    let mut header = Header::new("eval-sts", config)
        .model(backend)?
        .provenance("embedding", &report.provenance);
    for (name, why) in &report.absent {
        header = header.line(format!("absent {name}: {why}"));
    }
    Ok(format!("{header}{}", report.records()))
}

fn eval_sts(config: &RunConfig, data: &Path, requested: &[String]) -> Result<()> {
    let datasets = load_sts_sets(data, requested)?;
    let backend = config.build_backend()?;
    let registry = config.registry()?;
    let cache = open_cache(config)?;
    let emb = embedder(&*backend, &registry, config.embed_config(), cache.as_ref())?;
    let report = evaluate_sts(&emb, &datasets)?;
    let text = sts_report_text(config, &*backend, &report)?;
    emit(config, &report.table(), &text)?;
    finish_cache(cache)
}

fn eval_transfer(config: &RunConfig, data: &Path, requested: &[String]) -> Result<()> {
    let names = select_names(data, requested, &TRANSFER_TASKS, "transfer task")?;
    let backend = config.build_backend()?;
    let registry = config.registry()?;
    let cache = open_cache(config)?;
    let mut tasks = Vec::new();
    let mut provenance = Vec::new();
    for name in &names {
        let dataset = load_transfer(&data.join(format!("{name}.tsv")), name)?;
        let mut ec = config.embed_config();
        if ec.prompt_set == "transfer" {
            ec.prompt_set = format!("transfer:{name}");
        }
        let emb = embedder(&*backend, &registry, ec, cache.as_ref())?;
        provenance.push(emb.provenance());
        tasks.push(evaluate_transfer(&emb, &dataset)?);
    }
    let report = TransferReport {
        model: backend.info()?,
        provenance,
        tasks,
        absent: Vec::new(),
    };
    let mut header = Header::new("eval-transfer", config).model(&*backend)?;
    for (t, p) in report.tasks.iter().zip(&report.provenance) {
        header = header.provenance(&format!("embedding {}", t.name), p);
        for d in &t.diagnostics {
            header = header.line(format!("note {}: {d}", t.name));
        }
    }
    let text = format!("{header}{}", report.records());
    emit(config, &report.table(), &text)?;
    finish_cache(cache)
}

/// Parses `-a..-b` (or `a..b`) into layer depths.
fn parse_range(s: &str) -> Result<(usize, usize)> {
    let bad = || {
        CliError::new(
            ErrorKind::Usage,
            format!("bad layer range `{s}` (expected e.g. -1..-8)"),
        )
    };
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let depth = |v: &str| {
        v.trim()
            .trim_start_matches('-')
            .parse::<usize>()
            .ok()
            .filter(|&k| k > 0)
    };
    Ok((depth(a).ok_or_else(bad)?, depth(b).ok_or_else(bad)?))
}

fn series_text(
    command: &str,
    config: &RunConfig,
    backend: &dyn Backend,
    series: &Series,
    extra: Vec<String>,
) -> Result<String> {
    let mut header = Header::new(command, config).model(backend)?;
    if let Some(first) = series.rows.first() {
        header = header.line(format!(
            "layer_index={} aggregation={}",
            first.report.provenance.layer_index, first.report.provenance.aggregation
        ));
    }
    for l in extra {
        header = header.line(l);
    }
    for r in &series.rows {
        for (name, why) in &r.report.absent {
            header = header.line(format!("absent {} {name}: {why}", r.label));
        }
    }
    Ok(format!("{header}{}", series.records()))
}

fn with_study<T>(
    config: &RunConfig,
    data: &Path,
    datasets: &[String],
    f: impl FnOnce(&Study<'_>, &dyn Backend) -> Result<T>,
) -> Result<T> {
    let sets = load_sts_sets(data, datasets)?;
    let backend = config.build_backend()?;
    let registry = config.registry()?;
    let cache = open_cache(config)?.unwrap_or_else(Cache::in_memory);
    let study = Study {
        backend: &*backend,
        registry: &registry,
        base: config.embed_config(),
        datasets: &sets,
        cache: &cache,
    };
    let out = f(&study, &*backend)?;
    cache.flush()?;
    Ok(out)
}

fn ablate(
    config: &RunConfig,
    mode: AblateMode,
    data: &Path,
    datasets: &[String],
    set: &str,
    range: &str,
) -> Result<()> {
    let (command, extra) = match mode {
        AblateMode::Tasks => ("ablate tasks", Vec::new()),
        AblateMode::Prompts => ("ablate prompts", vec![format!("subsets of {set}")]),
        AblateMode::Layers => ("ablate layers", vec![format!("range {range}")]),
    };
    let bounds = if mode == AblateMode::Layers {
        Some(parse_range(range)?)
    } else {
        None
    };
    let (series, text) = with_study(config, data, datasets, |study, backend| {
        let series = match (mode, bounds) {
            (AblateMode::Tasks, _) => study.ablate_tasks()?,
            (AblateMode::Prompts, _) => study.ablate_prompts(set)?,
            (AblateMode::Layers, Some((from, to))) => study.ablate_layers(from, to)?,
            (AblateMode::Layers, None) => unreachable!("range parsed above"),
        };
        let text = series_text(command, config, backend, &series, extra)?;
        Ok((series, text))
    })?;
    emit(config, &series.table(), &text)
}

fn variance(config: &RunConfig, data: &Path, datasets: &[String], variants: &str) -> Result<()> {
    let (series, text) = with_study(config, data, datasets, |study, backend| {
        let series = study.variance(variants)?;
        let text = series_text(
            "variance",
            config,
            backend,
            &series,
            vec![format!("variants {variants}")],
        )?;
        Ok((series, text))
    })?;
    emit(config, &series.table(), &text)
}

fn probe(config: &RunConfig, sentence: &str, k: usize) -> Result<()> {
    let backend = config.build_backend()?;
    let registry = config.registry()?;
    let mut ids = Vec::new();
    for set_id in config.prompts.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        ids.extend(registry.load_set(set_id)?.template_ids().iter().cloned());
    }
    let set = PromptSet::new(config.prompts.clone(), ids);
    let report = probe_top_tokens(&*backend, &registry, sentence, &set, k)?;
    let header = Header::new("probe", config)
        .model(&*backend)?
        .line(format!("k={k} sentence={sentence:?}"));
    let text = format!("{header}{}", report.records());
    emit(config, &report.table(), &text)
}

fn cache_dump(path: &Path) -> Result<()> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut segs: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| CliError::new(ErrorKind::Data, format!("cannot read {}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "meol"))
            .collect();
        segs.sort();
        segs
    } else {
        vec![path.to_path_buf()]
    };
    for f in files {
        print!("{}", dump(&read_embeddings(&f)?));
    }
    Ok(())
}

fn sets(config: &RunConfig) -> Result<()> {
    let registry = config.registry()?;
    let mut out = String::new();
    for s in registry.list_sets() {
        let breakdown: Vec<String> = s.breakdown.iter().map(|(t, n)| format!("{}={n}", t.abbrev())).collect();
        let _ = writeln!(out, "{}\t{}\t{}", s.set_id, s.count, breakdown.join(","));
    }
    for t in TRANSFER_TASKS {
        let _ = writeln!(out, "transfer:{t}\t1\tTaskSpecific=1");
    }
    print!("{out}");
    Ok(())
}
