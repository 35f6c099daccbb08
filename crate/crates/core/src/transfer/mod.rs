//! Transfer-task evaluation: logistic regression on frozen embeddings.

mod logreg;

pub use logreg::{
    accuracy, argmax, objective_and_gradient, softmax, train_from, train_logreg, Features, LogRegError, LogRegModel,
    TrainOptions, TrainOutcome,
};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::backend::{ModelInfo, SplitMix64};
use crate::embed::{EmbedError, Embedder, FailurePolicy, Provenance};

pub const LAMBDA_GRID: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];
pub const OUTER_FOLDS: usize = 10;
pub const INNER_FOLDS: usize = 5;
pub const FOLD_SEED: u64 = 42;
pub const PAIR_TASK: &str = "mrpc";

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("invalid dataset {name}: {msg}")]
    Invalid { name: String, msg: String },
    #[error("vectors of length {0} and {1}")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Train(#[from] LogRegError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransferText {
    Single(String),
    Pair(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "dev" => Some(Split::Dev),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferItem {
    pub text: TransferText,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferDataset {
    pub name: String,
    pub items: Vec<TransferItem>,
    /// Per-item split; `None` for cross-validation tasks.
    pub splits: Option<Vec<Split>>,
    pub num_classes: usize,
}

impl TransferDataset {
    /// Checks the class and split invariants and derives `num_classes`.
    pub fn new(name: &str, items: Vec<TransferItem>, splits: Option<Vec<Split>>) -> Result<Self, TransferError> {
        let invalid = |msg: String| TransferError::Invalid {
            name: name.to_string(),
            msg,
        };
        let num_classes = items.iter().map(|i| i.label + 1).max().unwrap_or(0);
        if num_classes < 2 {
            return Err(invalid("need at least two classes".into()));
        }
        let mut seen = vec![false; num_classes];
        for item in &items {
            seen[item.label] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(invalid(format!("class ids not dense: {c} unused")));
        }
        let pair = name == PAIR_TASK;
        if items.iter().any(|i| matches!(i.text, TransferText::Pair(..)) != pair) {
            return Err(invalid(if pair {
                "every item must be a sentence pair".into()
            } else {
                "only mrpc items may be sentence pairs".into()
            }));
        }
        if let Some(s) = &splits {
            if s.len() != items.len() {
                return Err(invalid("split list length differs from item count".into()));
            }
            for want in [Split::Train, Split::Dev, Split::Test] {
                if !s.contains(&want) {
                    return Err(invalid(format!("no {want:?} items")));
                }
            }
        }
        Ok(TransferDataset {
            name: name.to_string(),
            items,
            splits,
            num_classes,
        })
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }
}

pub fn load_transfer(path: &Path, name: &str) -> Result<TransferDataset, TransferError> {
    let text = std::fs::read_to_string(path).map_err(|source| TransferError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_transfer(&text, name, &path.display().to_string())
}

/// Parses `label<TAB>text[<TAB>text2][<TAB>split]`. Either every line has a
/// split field or none does.
pub fn parse_transfer(text: &str, name: &str, origin: &str) -> Result<TransferDataset, TransferError> {
    let pair = name == PAIR_TASK;
    let text_fields = if pair { 2 } else { 1 };
    let mut items = Vec::new();
    let mut splits = Vec::new();
    let mut has_split: Option<bool> = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| TransferError::Parse {
            path: origin.to_string(),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let with_split = match fields.len() - 1 - text_fields {
            0 => false,
            1 => true,
            _ => {
                return Err(err(format!(
                    "expected {} or {} fields, found {}",
                    1 + text_fields,
                    2 + text_fields,
                    fields.len()
                )))
            }
        };
        if *has_split.get_or_insert(with_split) != with_split {
            return Err(err("split field present on some lines only".into()));
        }
        let label: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad label `{}`", fields[0])))?;
        let text = if pair {
            TransferText::Pair(fields[1].to_string(), fields[2].to_string())
        } else {
            TransferText::Single(fields[1].to_string())
        };
        if with_split {
            let s = fields[1 + text_fields];
            splits.push(Split::parse(s.trim()).ok_or_else(|| err(format!("bad split `{s}`")))?);
        }
        items.push(TransferItem { text, label });
    }
    TransferDataset::new(name, items, has_split.unwrap_or(false).then_some(splits))
}

/// `[|u−v| ; u⊙v]`.
pub fn pair_features(u: &[f64], v: &[f64]) -> Result<Vec<f64>, TransferError> {
    if u.len() != v.len() {
        return Err(TransferError::DimensionMismatch(u.len(), v.len()));
    }
    let mut out: Vec<f64> = u.iter().zip(v).map(|(a, b)| (a - b).abs()).collect();
    out.extend(u.iter().zip(v).map(|(a, b)| a * b));
    Ok(out)
}

/// Balanced fold ids for `n` items: items are ordered by a seeded hash of
/// their index and dealt round-robin into `k` folds.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<(u64, usize)> = (0..n)
        .map(|i| {
            (
                SplitMix64::new(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)).next_u64(),
                i,
            )
        })
        .collect();
    order.sort_unstable();
    let mut folds = vec![0; n];
    for (pos, (_, i)) in order.into_iter().enumerate() {
        folds[i] = pos % k;
    }
    folds
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskScore {
    pub name: String,
    /// Test accuracy ×100.
    pub accuracy: f64,
    /// Chosen lambda per outer fold, or the single dev-selected lambda.
    pub lambdas: Vec<f64>,
    pub protocol: String,
    pub items: usize,
    /// Items dropped because a text could not be embedded.
    pub failed: usize,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub model: ModelInfo,
    pub provenance: Vec<Provenance>,
    pub tasks: Vec<TaskScore>,
    pub absent: Vec<(String, String)>,
}

fn fmt_lambdas(l: &[f64]) -> String {
    l.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",")
}

impl TransferReport {
    pub fn average(&self) -> Option<f64> {
        if self.tasks.is_empty() {
            return None;
        }
        Some(self.tasks.iter().map(|t| t.accuracy).sum::<f64>() / self.tasks.len() as f64)
    }

    /// `task<TAB>accuracy<TAB>lambdas` lines, average last, full precision.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for t in &self.tasks {
            let _ = writeln!(out, "{}\t{}\t{}", t.name, t.accuracy, fmt_lambdas(&t.lambdas));
        }
        if let Some(avg) = self.average() {
            let _ = writeln!(out, "avg\t{avg}");
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<6} {:>8} {:>6} {:>6}  {:<22} lambda",
            "task", "accuracy", "items", "failed", "protocol"
        );
        for t in &self.tasks {
            let _ = writeln!(
                out,
                "{:<6} {:>8.2} {:>6} {:>6}  {:<22} {}",
                t.name,
                t.accuracy,
                t.items,
                t.failed,
                t.protocol,
                fmt_lambdas(&t.lambdas)
            );
        }
        if let Some(avg) = self.average() {
            let _ = writeln!(out, "{:<6} {:>8.2}", "avg", avg);
        }
        for t in &self.tasks {
            for d in &t.diagnostics {
                let _ = writeln!(out, "note: {}: {d}", t.name);
            }
        }
        for (name, why) in &self.absent {
            let _ = writeln!(out, "{name:<6} {:>8}  ({why})", "absent");
        }
        out
    }
}

fn fit_and_score(
    x: &Features,
    y: &[usize],
    classes: usize,
    train: &[usize],
    test: &[usize],
    lambda: f64,
) -> Result<f64, LogRegError> {
    let ty: Vec<usize> = train.iter().map(|&i| y[i]).collect();
    let model = train_logreg(&x.select(train), &ty, classes, lambda)?;
    let truth: Vec<usize> = test.iter().map(|&i| y[i]).collect();
    Ok(accuracy(&model.predict(&x.select(test))?, &truth))
}

fn run_jobs<T: Send>(
    parallelism: usize,
    jobs: usize,
    f: impl Fn(usize) -> T + Sync + Send,
) -> Result<Vec<T>, TransferError> {
    if parallelism <= 1 {
        return Ok((0..jobs).map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| TransferError::Pool(e.to_string()))?;
    Ok(pool.install(|| (0..jobs).into_par_iter().map(f).collect()))
}

/// First grid lambda with the best mean score over non-failed runs.
fn pick_lambda(scores: &[Vec<Option<f64>>]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for (lambda, runs) in LAMBDA_GRID.iter().zip(scores) {
        let ok: Vec<f64> = runs.iter().flatten().copied().collect();
        if ok.is_empty() {
            continue;
        }
        let mean = ok.iter().sum::<f64>() / ok.len() as f64;
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((*lambda, mean));
        }
    }
    best.map(|(l, _)| l)
}

fn positions(folds: &[usize], f: usize, inside: bool) -> Vec<usize> {
    (0..folds.len()).filter(|&i| (folds[i] == f) == inside).collect()
}

/// Nested cross-validation on a feature matrix.
pub fn cross_validate(
    x: &Features,
    y: &[usize],
    classes: usize,
    parallelism: usize,
) -> Result<(f64, Vec<f64>, Vec<String>), TransferError> {
    let outer = fold_assignment(x.rows(), OUTER_FOLDS, FOLD_SEED);
    let outer_splits: Vec<(Vec<usize>, Vec<usize>)> = (0..OUTER_FOLDS)
        .map(|f| (positions(&outer, f, false), positions(&outer, f, true)))
        .collect();
    let inner_assign: Vec<Vec<usize>> = outer_splits
        .iter()
        .map(|(train, _)| fold_assignment(train.len(), INNER_FOLDS, FOLD_SEED))
        .collect();

    // job = (outer fold, lambda, inner fold)
    let per_outer = LAMBDA_GRID.len() * INNER_FOLDS;
    let inner = run_jobs(parallelism, OUTER_FOLDS * per_outer, |j| {
        let (o, rest) = (j / per_outer, j % per_outer);
        let (l, k) = (rest / INNER_FOLDS, rest % INNER_FOLDS);
        let train_all = &outer_splits[o].0;
        let map = |p: Vec<usize>| p.into_iter().map(|i| train_all[i]).collect::<Vec<_>>();
        let tr = map(positions(&inner_assign[o], k, false));
        let te = map(positions(&inner_assign[o], k, true));
        if te.is_empty() {
            return Ok(None);
        }
        match fit_and_score(x, y, classes, &tr, &te, LAMBDA_GRID[l]) {
            Ok(a) => Ok(Some(a)),
            Err(LogRegError::MissingClass(c)) => Err(format!(
                "outer fold {o}, inner fold {k}, lambda {:e}: class {c} missing from training data",
                LAMBDA_GRID[l]
            )),
            Err(e) => Err(e.to_string()),
        }
    })?;

    let mut diagnostics = Vec::new();
    let mut chosen = Vec::with_capacity(OUTER_FOLDS);
    for o in 0..OUTER_FOLDS {
        let grid: Vec<Vec<Option<f64>>> = (0..LAMBDA_GRID.len())
            .map(|l| {
                (0..INNER_FOLDS)
                    .map(|k| match &inner[o * per_outer + l * INNER_FOLDS + k] {
                        Ok(a) => *a,
                        Err(msg) => {
                            diagnostics.push(msg.clone());
                            None
                        }
                    })
                    .collect()
            })
            .collect();
        chosen.push(pick_lambda(&grid));
    }

    let outer_scores = run_jobs(parallelism, OUTER_FOLDS, |o| {
        let (train, test) = &outer_splits[o];
        match chosen[o] {
            None => Err(format!("outer fold {o}: no lambda could be selected")),
            Some(_) if test.is_empty() => Err(format!("outer fold {o}: empty test fold")),
            Some(lambda) => fit_and_score(x, y, classes, train, test, lambda)
                .map_err(|e| format!("outer fold {o}, lambda {lambda:e}: {e}")),
        }
    })?;
    let mut accs = Vec::new();
    let mut lambdas = Vec::new();
    for (o, r) in outer_scores.into_iter().enumerate() {
        match r {
            Ok(a) => {
                accs.push(a);
                lambdas.push(chosen[o].expect("scored folds have a lambda"));
            }
            Err(msg) => diagnostics.push(msg),
        }
    }
    if accs.is_empty() {
        return Err(TransferError::Train(LogRegError::BadInput(format!(
            "every fold failed: {}",
            diagnostics.join("; ")
        ))));
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    Ok((mean * 100.0, lambdas, diagnostics))
}

/// Train on train, pick lambda on dev, score test.
pub fn split_evaluate(
    x: &Features,
    y: &[usize],
    classes: usize,
    splits: &[Split],
    parallelism: usize,
) -> Result<(f64, f64), TransferError> {
    let pick = |s: Split| (0..splits.len()).filter(|&i| splits[i] == s).collect::<Vec<_>>();
    let (train, dev, test) = (pick(Split::Train), pick(Split::Dev), pick(Split::Test));
    if dev.is_empty() || test.is_empty() {
        return Err(TransferError::Train(LogRegError::BadInput(
            "empty dev or test split".into(),
        )));
    }
    let ty: Vec<usize> = train.iter().map(|&i| y[i]).collect();
    let xt = x.select(&train);
    let models = run_jobs(parallelism, LAMBDA_GRID.len(), |l| {
        train_logreg(&xt, &ty, classes, LAMBDA_GRID[l])
    })?
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let score = |m: &LogRegModel, idx: &[usize]| -> Result<f64, LogRegError> {
        let truth: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        Ok(accuracy(&m.predict(&x.select(idx))?, &truth))
    };
    let mut best = 0;
    let mut best_dev = f64::NEG_INFINITY;
    for (l, m) in models.iter().enumerate() {
        let a = score(m, &dev)?;
        if a > best_dev {
            best_dev = a;
            best = l;
        }
    }
    Ok((score(&models[best], &test)? * 100.0, LAMBDA_GRID[best]))
}

/// Evaluates labeled features directly, choosing the protocol from `splits`.
pub fn evaluate_features(
    name: &str,
    x: &Features,
    y: &[usize],
    classes: usize,
    splits: Option<&[Split]>,
    parallelism: usize,
) -> Result<TaskScore, TransferError> {
    let (accuracy, lambdas, diagnostics, protocol) = match splits {
        None => {
            let (a, l, d) = cross_validate(x, y, classes, parallelism)?;
            (a, l, d, format!("cv{OUTER_FOLDS}x{INNER_FOLDS}"))
        }
        Some(s) => {
            let (a, l) = split_evaluate(x, y, classes, s, parallelism)?;
            (a, vec![l], Vec::new(), "train/dev/test".to_string())
        }
    };
    Ok(TaskScore {
        name: name.to_string(),
        accuracy,
        lambdas,
        protocol,
        items: x.rows(),
        failed: 0,
        diagnostics,
    })
}

/// Embeds a dataset and evaluates it. Items whose text cannot be embedded
/// are dropped and counted.
pub fn evaluate_transfer(embedder: &Embedder<'_>, dataset: &TransferDataset) -> Result<TaskScore, TransferError> {
    let mut texts: Vec<&str> = Vec::new();
    for item in &dataset.items {
        match &item.text {
            TransferText::Single(t) => texts.push(t),
            TransferText::Pair(a, b) => {
                texts.push(a);
                texts.push(b);
            }
        }
    }
    let matrix = embedder.embed_corpus(&texts, FailurePolicy::SkipAndReport)?;
    let lookup: HashMap<&str, Option<&[f32]>> = texts.iter().enumerate().map(|(i, t)| (*t, matrix.row(i))).collect();
    let vec_of = |t: &str| lookup[t].map(|v| v.iter().map(|&x| x as f64).collect::<Vec<f64>>());

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut kept_splits = Vec::new();
    let mut failed = 0;
    for (i, item) in dataset.items.iter().enumerate() {
        let feats = match &item.text {
            TransferText::Single(t) => vec_of(t),
            TransferText::Pair(a, b) => match (vec_of(a), vec_of(b)) {
                (Some(u), Some(v)) => Some(pair_features(&u, &v)?),
                _ => None,
            },
        };
        match feats {
            Some(f) => {
                rows.push(f);
                labels.push(item.label);
                if let Some(s) = &dataset.splits {
                    kept_splits.push(s[i]);
                }
            }
            None => failed += 1,
        }
    }
    let x = Features::from_rows(&rows)?;
    let splits = dataset.splits.as_ref().map(|_| kept_splits.as_slice());
    let mut score = evaluate_features(
        &dataset.name,
        &x,
        &labels,
        dataset.num_classes,
        splits,
        embedder.config().parallelism,
    )?;
    score.items = dataset.items.len();
    score.failed = failed;
    if failed > 0 {
        score
            .diagnostics
            .push(format!("{failed} items dropped: text exceeded the model context"));
    }
    Ok(score)
}
