//! Semantic textual similarity evaluation.
//!
//! Datasets are canonical TSV (`gold<TAB>sentence1<TAB>sentence2<TAB>subset`).
//! Scores are Spearman correlations between cosine similarity and gold,
//! computed once over all pairs of a dataset with its subsets concatenated,
//! and reported ×100.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::backend::ModelInfo;
use crate::embed::{EmbedError, Embedder, FailurePolicy, Provenance};

/// Dataset names accepted by [`load_sts`].
pub const STS_DATASETS: [&str; 7] = ["sts12", "sts13", "sts14", "sts15", "sts16", "stsb", "sickr"];

#[derive(Debug, Error)]
pub enum StsError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path} line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("unknown STS dataset `{0}`")]
    UnknownDataset(String),
    #[error("cosine of a zero vector")]
    ZeroVector,
    #[error("inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("correlation needs at least two distinct values on each side")]
    DegenerateInput,
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub s1: String,
    pub s2: String,
    pub gold: f64,
    pub subset: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StsDataset {
    pub name: String,
    pub pairs: Vec<SentencePair>,
    /// Lines without a gold score.
    pub skipped: usize,
}

pub fn load_sts(path: &Path, name: &str) -> Result<StsDataset, StsError> {
    if !STS_DATASETS.contains(&name) {
        return Err(StsError::UnknownDataset(name.to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|source| StsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_sts(&text, name, &path.display().to_string())
}

pub fn parse_sts(text: &str, name: &str, origin: &str) -> Result<StsDataset, StsError> {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| StsError::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(err(format!(
                "expected 3 or 4 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let gold_field = fields[0].trim();
        if gold_field.is_empty() {
            skipped += 1;
            continue;
        }
        let gold: f64 = gold_field
            .parse()
            .map_err(|_| err(format!("gold score `{gold_field}` is not a number")))?;
        if !(0.0..=5.0).contains(&gold) {
            return Err(err(format!("gold score {gold} outside [0, 5]")));
        }
        pairs.push(SentencePair {
            s1: fields[1].to_string(),
            s2: fields[2].to_string(),
            gold,
            subset: fields.get(3).copied().unwrap_or_default().to_string(),
        });
    }
    if pairs.is_empty() {
        return Err(StsError::Parse {
            path: origin.to_string(),
            line: 0,
            msg: "no scored pairs".into(),
        });
    }
    Ok(StsDataset {
        name: name.to_string(),
        pairs,
        skipped,
    })
}

/// Converts the raw distribution layout (`STS.input.<subset>.txt` with a
/// matching `STS.gs.<subset>.txt`) into canonical TSV text. Subsets without a
/// gold file are ignored.
pub fn convert_raw_sts(dir: &Path) -> Result<String, StsError> {
    let io = |path: &Path| {
        let p = path.display().to_string();
        move |source| StsError::Io { path: p, source }
    };
    let mut subsets = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(io(dir))? {
        let path = entry.map_err(io(dir))?.path();
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        if let Some(subset) = name.strip_prefix("STS.input.").and_then(|s| s.strip_suffix(".txt")) {
            let gs = dir.join(format!("STS.gs.{subset}.txt"));
            if gs.is_file() {
                subsets.insert(subset.to_string(), (path.clone(), gs));
            }
        }
    }
    let mut out = String::new();
    for (subset, (input, gs)) in subsets {
        let inputs = std::fs::read_to_string(&input).map_err(io(&input))?;
        let golds = std::fs::read_to_string(&gs).map_err(io(&gs))?;
        let gold_lines: Vec<&str> = golds.lines().collect();
        for (i, line) in inputs.lines().enumerate() {
            let mut cols = line.split('\t');
            let (Some(s1), Some(s2)) = (cols.next(), cols.next()) else {
                return Err(StsError::Parse {
                    path: input.display().to_string(),
                    line: i + 1,
                    msg: "expected two tab-separated sentences".into(),
                });
            };
            let gold = gold_lines.get(i).map_or("", |g| g.trim());
            let _ = writeln!(out, "{gold}\t{}\t{}\t{subset}", s1.trim(), s2.trim());
        }
    }
    Ok(out)
}

/// Cosine similarity in f64, clamped to [-1, 1].
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64, StsError> {
    if u.len() != v.len() {
        return Err(StsError::LengthMismatch(u.len(), v.len()));
    }
    let (mut dot, mut uu, mut vv) = (0f64, 0f64, 0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(StsError::ZeroVector);
    }
    Ok((dot / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1; tied values share the mean of the positions they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, StsError> {
    if xs.len() != ys.len() {
        return Err(StsError::LengthMismatch(xs.len(), ys.len()));
    }
    let constant = |v: &[f64]| v.windows(2).all(|w| w[0] == w[1]);
    if xs.len() < 2 || constant(xs) || constant(ys) {
        return Err(StsError::DegenerateInput);
    }
    Ok(pearson(&average_ranks(xs), &average_ranks(ys)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetScore {
    pub name: String,
    /// Spearman ×100 at full precision.
    pub score: f64,
    pub pairs: usize,
    /// Ungraded lines dropped at load time.
    pub skipped: usize,
    /// Pairs dropped because a sentence could not be embedded.
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StsReport {
    pub model: ModelInfo,
    pub provenance: Provenance,
    pub scores: Vec<DatasetScore>,
    /// Datasets that produced no score, with the reason.
    pub absent: Vec<(String, String)>,
}

impl StsReport {
    /// Unweighted mean of the per-dataset scores.
    pub fn average(&self) -> Option<f64> {
        if self.scores.is_empty() {
            return None;
        }
        Some(self.scores.iter().map(|s| s.score).sum::<f64>() / self.scores.len() as f64)
    }

    /// `dataset<TAB>score` lines, average last, full precision.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for s in &self.scores {
            let _ = writeln!(out, "{}\t{}", s.name, s.score);
        }
        if let Some(avg) = self.average() {
            let _ = writeln!(out, "avg\t{avg}");
        }
        out
    }

    /// Aligned table, two decimals.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>7} {:>7} {:>7}",
            "dataset", "spearman", "pairs", "skipped", "failed"
        );
        for s in &self.scores {
            let _ = writeln!(
                out,
                "{:<10} {:>8.2} {:>7} {:>7} {:>7}",
                s.name, s.score, s.pairs, s.skipped, s.failed
            );
        }
        if let Some(avg) = self.average() {
            let _ = writeln!(out, "{:<10} {:>8.2}", "avg", avg);
        }
        for (name, why) in &self.absent {
            let _ = writeln!(out, "{name:<10} {:>8}  ({why})", "absent");
        }
        out
    }
}

/// Scores one dataset given a sentence -> vector lookup.
fn score_dataset(
    ds: &StsDataset,
    embed: impl Fn(&str) -> Option<Vec<f32>>,
) -> Result<Result<DatasetScore, String>, StsError> {
    let mut preds = Vec::with_capacity(ds.pairs.len());
    let mut golds = Vec::with_capacity(ds.pairs.len());
    let mut failed = 0;
    for pair in &ds.pairs {
        match (embed(&pair.s1), embed(&pair.s2)) {
            (Some(a), Some(b)) => {
                preds.push(cosine(&a, &b)?);
                golds.push(pair.gold);
            }
            _ => failed += 1,
        }
    }
    if preds.len() < 2 {
        return Ok(Err(format!("only {} usable pairs", preds.len())));
    }
    match spearman(&preds, &golds) {
        Ok(rho) => Ok(Ok(DatasetScore {
            name: ds.name.clone(),
            score: rho * 100.0,
            pairs: preds.len(),
            skipped: ds.skipped,
            failed,
        })),
        Err(StsError::DegenerateInput) => Ok(Err("constant similarities or gold scores".into())),
        Err(e) => Err(e),
    }
}

pub fn evaluate_sts(embedder: &Embedder<'_>, datasets: &[StsDataset]) -> Result<StsReport, StsError> {
    let mut scores = Vec::new();
    let mut absent = Vec::new();
    for ds in datasets {
        let sentences: Vec<&str> = ds.pairs.iter().flat_map(|p| [p.s1.as_str(), p.s2.as_str()]).collect();
        let matrix = embedder.embed_corpus(&sentences, FailurePolicy::SkipAndReport)?;
        let lookup: BTreeMap<&str, Option<&[f32]>> =
            sentences.iter().enumerate().map(|(i, s)| (*s, matrix.row(i))).collect();
        match score_dataset(ds, |s| lookup.get(s).copied().flatten().map(<[f32]>::to_vec))? {
            Ok(score) => scores.push(score),
            Err(why) => absent.push((ds.name.clone(), why)),
        }
    }
    Ok(StsReport {
        model: embedder.model_info().clone(),
        provenance: embedder.provenance(),
        scores,
        absent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::embed::EmbedConfig;
    use crate::prompts::Registry;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(
            cosine(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(StsError::ZeroVector)));
        assert!(matches!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(StsError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        let tied = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(tied, 4.5 / 22.5f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(tied, 0.9486832980505138, epsilon = 1e-15);
    }

    #[test]
    fn spearman_degenerate() {
        assert!(matches!(
            spearman(&[1.0, 1.0], &[1.0, 2.0]),
            Err(StsError::DegenerateInput)
        ));
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(StsError::DegenerateInput)));
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn parse_line_and_skip() {
        let ds = parse_sts(
            "4.2\ta man walks\ta person walks\theadlines\n\tx\ty\theadlines\n1\tb\tc\n",
            "sts12",
            "mem",
        )
        .unwrap();
        assert_eq!(ds.pairs.len(), 2);
        assert_eq!(ds.skipped, 1);
        assert_eq!(
            ds.pairs[0],
            SentencePair {
                s1: "a man walks".into(),
                s2: "a person walks".into(),
                gold: 4.2,
                subset: "headlines".into()
            }
        );
    }

    #[test]
    fn parse_errors_name_line() {
        match parse_sts("1\ta\tb\tx\nhigh\ta\tb\tx\n", "sts12", "f.tsv") {
            Err(StsError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_sts("7\ta\tb\tx\n", "sts12", "f").is_err());
        assert!(matches!(
            load_sts(Path::new("nope"), "sts17"),
            Err(StsError::UnknownDataset(_))
        ));
    }

    #[test]
    fn identical_pairs_score_cosine_one() {
        let mock = MockBackend::new(0, 4, 8);
        let e = Embedder::new(&mock, &Registry::builtin(), EmbedConfig::default(), None).unwrap();
        let pairs: Vec<SentencePair> = (0..5)
            .map(|i| SentencePair {
                s1: format!("s{i}"),
                s2: format!("s{i}"),
                gold: i as f64,
                subset: String::new(),
            })
            .collect();
        let m = e.embed_corpus(&["s1", "s1"], FailurePolicy::FailFast).unwrap();
        assert_eq!(cosine(m.row(0).unwrap(), m.row(1).unwrap()).unwrap(), 1.0);
        // every cosine is 1, so the dataset is degenerate and reported absent
        let report = evaluate_sts(
            &e,
            &[StsDataset {
                name: "stsb".into(),
                pairs,
                skipped: 0,
            }],
        )
        .unwrap();
        assert!(report.scores.is_empty());
        assert_eq!(report.absent.len(), 1);
        assert_eq!(report.average(), None);
    }

    #[test]
    fn perfect_prediction_scores_100() {
        // cosine to a fixed anchor decreases with the angle, gold increases with i
        let angles = [0.9f32, 0.6, 0.3, 0.1];
        let ds = StsDataset {
            name: "sts12".into(),
            skipped: 0,
            pairs: (0..4)
                .map(|i| SentencePair {
                    s1: "anchor".into(),
                    s2: i.to_string(),
                    gold: i as f64,
                    subset: String::new(),
                })
                .collect(),
        };
        let score = score_dataset(&ds, |s| {
            if s == "anchor" {
                return Some(vec![1.0, 0.0]);
            }
            let a = angles[s.parse::<usize>().unwrap()];
            Some(vec![a.cos(), a.sin()])
        })
        .unwrap()
        .unwrap();
        assert_eq!(score.score, 100.0);
    }

    #[test]
    fn report_average_is_plain_mean() {
        let report = StsReport {
            model: ModelInfo {
                model_id: "m".into(),
                num_layers: 1,
                hidden_dim: 1,
            },
            provenance: Provenance {
                model_id: "m".into(),
                source: "eol".into(),
                layer_index: -1,
                aggregation: "mean".into(),
            },
            scores: vec![
                DatasetScore {
                    name: "a".into(),
                    score: 50.0,
                    pairs: 10,
                    skipped: 0,
                    failed: 0,
                },
                DatasetScore {
                    name: "b".into(),
                    score: 70.0,
                    pairs: 1000,
                    skipped: 0,
                    failed: 0,
                },
            ],
            absent: vec![],
        };
        assert_eq!(report.average(), Some(60.0));
        assert_eq!(report.records(), "a\t50\nb\t70\navg\t60\n");
    }

    #[test]
    fn convert_raw_layout() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("STS.input.news.txt"), "a b\tc d\ne\tf\n").unwrap();
        std::fs::write(dir.path().join("STS.gs.news.txt"), "4.0\n\n").unwrap();
        std::fs::write(dir.path().join("STS.input.orphan.txt"), "x\ty\n").unwrap();
        let tsv = convert_raw_sts(dir.path()).unwrap();
        assert_eq!(tsv, "4.0\ta b\tc d\tnews\n\te\tf\tnews\n");
        let ds = parse_sts(&tsv, "sts12", "converted").unwrap();
        assert_eq!((ds.pairs.len(), ds.skipped), (1, 1));
    }
}
