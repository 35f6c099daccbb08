//! Acceptance checks: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::Instant;

use metaeol::backend::{LayerSelector, SplitMix64};
use metaeol::embed::{aggregate, AggregationMethod};
use metaeol::prompts::{MetaTask, Registry, PLACEHOLDER};
use metaeol::storage::{decode, encode, read_embeddings, EmbeddingRecord, StorageError};
use metaeol::sts::spearman;
use metaeol::transfer::{objective_and_gradient, train_from, train_logreg, Features, LogRegModel, TrainOptions};

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn core_golden(rel: &str) -> PathBuf {
    root().join("../core/tests/golden").join(rel)
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_metaeol"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Runs a subcommand with `--out` and returns the written report.
fn cli_report(args: &[&str]) -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("report.txt").display().to_string();
    let mut all = args.to_vec();
    all.extend(["--out", &out]);
    cli(&all)?;
    std::fs::read_to_string(&out).map_err(|e| e.to_string())
}

fn fixtures(kind: &str) -> String {
    root().join("tests/fixtures").join(kind).display().to_string()
}

fn golden(name: &str) -> Result<String, String> {
    std::fs::read_to_string(root().join("tests/golden").join(name)).map_err(|e| e.to_string())
}

fn template_fidelity() -> Result<String, String> {
    let reg = Registry::builtin();
    let dir = core_golden("templates");
    let mut checked = 0;
    for entry in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let id = path.file_stem().unwrap().to_string_lossy().into_owned();
        let golden = std::fs::read(&path).map_err(|e| e.to_string())?;
        let body = reg
            .template(&id)
            .map_err(|e| e.to_string())?
            .body()
            .replace(PLACEHOLDER, "input sentence");
        ensure!(
            body.as_bytes() == golden.as_slice(),
            "template {id} differs from golden"
        );
        checked += 1;
    }
    ensure!(checked == 30, "expected 30 golden templates, found {checked}");
    let set = reg.load_set("metaeol8").map_err(|e| e.to_string())?;
    ensure!(set.len() == 8, "metaeol8 has {} templates", set.len());
    let templates = reg.templates_of(&set).map_err(|e| e.to_string())?;
    for task in MetaTask::CORE {
        let n = templates.iter().filter(|t| t.meta_task == task).count();
        ensure!(n == 2, "metaeol8 has {n} {task} templates");
    }
    Ok(format!(
        "{checked} templates byte-identical; metaeol8 = 2 x TC/SA/PI/IE"
    ))
}

fn layer_strategy() -> Result<String, String> {
    let prop: LayerSelector = "prop:0.1".parse()?;
    for (layers, want) in [(32, -3), (40, -4), (80, -8)] {
        let got = prop.resolve(layers).map_err(|e| e.to_string())?;
        ensure!(got == want, "L={layers}: got {got}, want {want}");
    }
    let mut rng = SplitMix64::new(7);
    let mut cases = 0;
    for layers in 1..=10_000usize {
        for f in [0.001, 0.1, 0.25, 0.5, 0.999, 1.0, rng.next_unit().max(1e-6)] {
            let r = LayerSelector::Proportional(f)
                .resolve(layers)
                .map_err(|e| e.to_string())?;
            let k = r.unsigned_abs() as usize;
            ensure!(r < 0 && (1..=layers).contains(&k), "L={layers} f={f}: {r}");
            cases += 1;
        }
    }
    Ok(format!(
        "prop:0.1 -> -3/-4/-8 for L=32/40/80; {cases} cases within 1..=L"
    ))
}

fn brute_spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&x| {
                let less = v.iter().filter(|&&y| y < x).count() as f64;
                let equal = v.iter().filter(|&&y| y == x).count() as f64;
                1.0 + less + (equal - 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..xs.len() {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx).powi(2);
        syy += (ry[i] - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

fn spearman_oracle() -> Result<String, String> {
    let mut rng = SplitMix64::new(2024);
    let mut worst = 0f64;
    let mut done = 0;
    while done < 1000 {
        let n = 2 + (rng.next_u64() % 40) as usize;
        let levels = 2 + rng.next_u64() % 10;
        let mut draw = |tied: bool| -> f64 {
            if tied {
                (rng.next_u64() % levels) as f64
            } else {
                rng.next_signed()
            }
        };
        let tied = done % 2 == 0;
        let xs: Vec<f64> = (0..n).map(|_| draw(tied)).collect();
        let ys: Vec<f64> = (0..n).map(|_| draw(!tied)).collect();
        let Ok(got) = spearman(&xs, &ys) else { continue };
        worst = worst.max((got - brute_spearman(&xs, &ys)).abs());
        done += 1;
    }
    ensure!(worst < 1e-12, "max deviation {worst:e}");
    let tie = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).map_err(|e| e.to_string())?;
    let want = 3.0 / 10f64.sqrt();
    ensure!((tie - want).abs() < 1e-12, "tie case {tie} != {want}");
    Ok(format!(
        "1000 random cases, max deviation {worst:.1e}; tie case {tie:.6}"
    ))
}

fn aggregation_algebra() -> Result<String, String> {
    let mut rng = SplitMix64::new(99);
    let agg = |v: &[Vec<f32>], m| aggregate(v, m).map_err(|e| e.to_string());
    for case in 0..500 {
        let k = 1 + (rng.next_u64() % 8) as usize;
        let dim = 1 + (rng.next_u64() % 16) as usize;
        let list: Vec<Vec<f32>> = (0..k)
            .map(|_| (0..dim).map(|_| rng.next_signed() as f32).collect())
            .collect();
        let mut shuffled = list.clone();
        for i in (1..k).rev() {
            shuffled.swap(i, (rng.next_u64() % (i as u64 + 1)) as usize);
        }
        let mean = agg(&list, AggregationMethod::Mean)?;
        let mean_shuffled = agg(&shuffled, AggregationMethod::Mean)?;
        ensure!(
            mean.iter().zip(&mean_shuffled).all(|(a, b)| (a - b).abs() <= 1e-6),
            "case {case}: mean not permutation invariant"
        );
        ensure!(
            agg(&list, AggregationMethod::MaxPool)? == agg(&shuffled, AggregationMethod::MaxPool)?,
            "case {case}: max not permutation invariant"
        );
        let copies = vec![list[0].clone(); k];
        ensure!(
            agg(&copies, AggregationMethod::Mean)? == list[0],
            "case {case}: mean of copies"
        );
        ensure!(
            agg(&copies, AggregationMethod::MaxPool)? == list[0],
            "case {case}: max of copies"
        );
        let concat = agg(&list, AggregationMethod::Concat)?;
        ensure!(concat == list.concat(), "case {case}: concat order");
    }
    Ok("500 random lists: mean/max permutation invariant, K-copies identity, concat order".into())
}

fn random_problem(n: usize, d: usize, classes: usize, seed: u64) -> (Features, Vec<usize>) {
    let mut rng = SplitMix64::new(seed);
    let data: Vec<f64> = (0..n * d).map(|_| rng.next_signed()).collect();
    let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
    (Features::new(n, d, data).unwrap(), y)
}

fn logistic_regression() -> Result<String, String> {
    let (x, y) = random_problem(12, 4, 3, 5);
    let mut rng = SplitMix64::new(11);
    let params: Vec<f64> = (0..3 * 4 + 3).map(|_| rng.next_signed()).collect();
    let (_, grad) = objective_and_gradient(&x, &y, 3, &params, 0.3);
    let h = 1e-5;
    let mut worst = 0f64;
    for j in 0..params.len() {
        let mut p = params.clone();
        p[j] += h;
        let fp = objective_and_gradient(&x, &y, 3, &p, 0.3).0;
        p[j] -= 2.0 * h;
        let fm = objective_and_gradient(&x, &y, 3, &p, 0.3).0;
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((fd - grad[j]).abs() / fd.abs().max(grad[j].abs()).max(1e-8));
    }
    ensure!(worst < 1e-4, "gradient relative error {worst:e}");

    let centers = [[-3.0, 0.0], [3.0, 0.0], [0.0, 4.0]];
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..60 {
        let c = i % 3;
        rows.push([centers[c][0] + rng.next_signed(), centers[c][1] + rng.next_signed()]);
        labels.push(c);
    }
    let sep = Features::from_rows(&rows).map_err(|e| e.to_string())?;
    let model = train_logreg(&sep, &labels, 3, 1e-4).map_err(|e| e.to_string())?;
    let pred = model.predict(&sep).map_err(|e| e.to_string())?;
    ensure!(pred == labels, "separable toy data not fit perfectly");

    let (x, y) = random_problem(40, 6, 3, 8);
    let opts = TrainOptions::default();
    let zero = train_from(&x, &y, LogRegModel::zeros(3, 6, 0.1), opts).map_err(|e| e.to_string())?;
    let mut init = LogRegModel::zeros(3, 6, 0.1);
    init.weights
        .iter_mut()
        .chain(init.bias.iter_mut())
        .for_each(|w| *w = 3.0 * rng.next_signed());
    let random = train_from(&x, &y, init, opts).map_err(|e| e.to_string())?;
    let gap = (zero.objective - random.objective).abs();
    ensure!(gap < 1e-6, "zero vs random init objective gap {gap:e}");
    Ok(format!(
        "gradient rel err {worst:.1e}; separable 100%; init gap {gap:.1e}"
    ))
}

fn e2e_determinism() -> Result<String, String> {
    let sts = fixtures("sts");
    let transfer = fixtures("transfer");
    let cache_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cache = cache_dir.path().join("cache").display().to_string();
    let want_sts = golden("eval_sts.txt")?;
    let want_transfer = golden("eval_transfer.txt")?;
    ensure!(
        cli_report(&["eval-sts", "--data", &sts])? == want_sts,
        "eval-sts differs from golden"
    );
    ensure!(
        cli_report(&["eval-transfer", "--data", &transfer])? == want_transfer,
        "eval-transfer differs from golden"
    );
    for pass in ["cold", "warm"] {
        ensure!(
            cli_report(&["eval-sts", "--data", &sts, "--cache", &cache])? == want_sts,
            "eval-sts with {pass} cache differs"
        );
        ensure!(
            cli_report(&["eval-transfer", "--data", &transfer, "--cache", &cache])? == want_transfer,
            "eval-transfer with {pass} cache differs"
        );
    }
    Ok("eval-sts and eval-transfer reproduce goldens bit-for-bit, cache off/cold/warm".into())
}

fn storage() -> Result<String, String> {
    let mut rng = SplitMix64::new(3);
    let specials = [
        f32::NAN,
        -0.0,
        f32::INFINITY,
        f32::MIN_POSITIVE / 2.0,
        f32::from_bits(0x7fc0_0001),
    ];
    let records: Vec<EmbeddingRecord> = (0..20)
        .map(|i| {
            let mut v: Vec<f32> = (0..7).map(|_| rng.next_signed() as f32).collect();
            v[i % 7] = specials[i % specials.len()];
            EmbeddingRecord::new(format!("key-{i}-\u{e9}"), v)
        })
        .collect();
    let bytes = encode(7, 0, &records).map_err(|e| e.to_string())?;
    let back = decode(&bytes).map_err(|e| e.to_string())?;
    ensure!(back.records.len() == records.len(), "record count changed");
    for (a, b) in records.iter().zip(&back.records) {
        let bits = |r: &EmbeddingRecord| r.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure!(
            a.key == b.key && bits(a) == bits(b),
            "record {} not bit-identical",
            a.key
        );
    }
    for cut in 0..bytes.len() {
        ensure!(
            matches!(decode(&bytes[..cut]), Err(StorageError::TruncatedFile { .. })),
            "prefix of {cut} bytes not reported as truncated"
        );
    }
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    ensure!(
        matches!(decode(&bad), Err(StorageError::BadMagic)),
        "corrupt magic accepted"
    );
    let mut long = bytes.clone();
    long.push(0);
    ensure!(
        matches!(decode(&long), Err(StorageError::TrailingBytes { .. })),
        "trailing byte accepted"
    );

    let file = read_embeddings(&core_golden("three_records.meol")).map_err(|e| e.to_string())?;
    let keys: Vec<&str> = file.records.iter().map(|r| r.key.as_str()).collect();
    ensure!(keys[..2] == ["alpha", "cl\u{e9}|\u{fc}"], "golden keys {keys:?}");
    let bits: Vec<u32> = file.records[1].values.iter().map(|v| v.to_bits()).collect();
    ensure!(bits == [0x8000_0000, 0x0000_0001, 0x7f7f_ffff], "golden bits {bits:x?}");
    ensure!(file.records[2].values[0].to_bits() == 0x7fc0_0001, "NaN payload lost");
    Ok(format!(
        "roundtrip bit-identical; {} truncations rejected; golden file read",
        bytes.len()
    ))
}

fn row_avgs(report: &str) -> Vec<(usize, f64)> {
    report
        .lines()
        .filter(|l| l.starts_with("row\t"))
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect()
}

fn ablation() -> Result<String, String> {
    let sts = fixtures("sts");
    let tasks = cli_report(&["ablate", "tasks", "--data", &sts])?;
    let labels: Vec<&str> = tasks
        .lines()
        .filter(|l| l.starts_with("row\t"))
        .map(|l| l.split('\t').nth(1).unwrap())
        .collect();
    ensure!(
        labels == ["TC", "TC+SA", "TC+SA+PI", "TC+SA+PI+IE"],
        "task rows {labels:?}"
    );

    let prompts = cli_report(&["ablate", "prompts", "--data", &sts, "--set", "sa5"])?;
    let rows = row_avgs(&prompts);
    ensure!(rows.len() == 31, "{} subsets of sa5", rows.len());
    let mut by_size: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (size, avg) in rows {
        by_size.entry(size).or_default().push(avg);
    }
    let counts: Vec<usize> = by_size.values().map(Vec::len).collect();
    ensure!(counts == [5, 10, 10, 5, 1], "subset counts per size {counts:?}");
    for line in prompts.lines().filter(|l| l.starts_with("size\t")) {
        let f: Vec<&str> = line.split('\t').collect();
        let size: usize = f[1].parse().unwrap();
        let reported: f64 = f[3].parse().unwrap();
        let v = &by_size[&size];
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        ensure!((reported - mean).abs() < 1e-9, "size {size} mean {reported} != {mean}");
    }
    Ok("ablate tasks: 4 cumulative rows; ablate prompts: 31 subsets, per-size means consistent".into())
}

fn runtimes() -> Result<String, String> {
    let start = Instant::now();
    cli_report(&["eval-sts", "--data", &fixtures("sts")])?;
    let sts = start.elapsed().as_secs_f64();
    let start = Instant::now();
    cli_report(&["eval-transfer", "--data", &fixtures("transfer")])?;
    let transfer = start.elapsed().as_secs_f64();
    ensure!(
        sts < 30.0 && transfer < 60.0,
        "eval-sts {sts:.2}s, eval-transfer {transfer:.2}s"
    );
    Ok(format!("eval-sts {sts:.2}s, eval-transfer {transfer:.2}s"))
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 9] = [
        ("template fidelity", template_fidelity),
        ("layer strategy", layer_strategy),
        ("spearman oracle", spearman_oracle),
        ("aggregation algebra", aggregation_algebra),
        ("logistic regression", logistic_regression),
        ("e2e determinism", e2e_determinism),
        ("storage", storage),
        ("ablation plumbing", ablation),
        ("runtimes", runtimes),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
