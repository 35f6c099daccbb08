mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::CliError;
use metaeol::config::RunConfig;
use metaeol::error::ErrorKind;

#[derive(Parser, Debug)]
#[command(
    name = "metaeol",
    version,
    about = "Sentence embeddings from meta-task prompts, with STS and transfer evaluation"
)]
pub struct Cli {
    #[command(flatten)]
    pub shared: Shared,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. Each one overrides the same key from
/// `--config`.
#[derive(Args, Debug, Default)]
pub struct Shared {
    /// key=value config file, or a previous report to replay
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// mock or http
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Inference bridge base URL
    #[arg(long, global = true)]
    pub url: Option<String>,
    /// Prompt set id, e.g. metaeol8, eol, sa5, transfer or transfer:<task>
    #[arg(long, global = true)]
    pub prompts: Option<String>,
    /// Directory of extra prompt sets
    #[arg(long, global = true)]
    pub templates: Option<PathBuf>,
    /// final, -k, prop or prop:<fraction>
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub layer: Option<String>,
    /// mean, concat or max
    #[arg(long, global = true)]
    pub agg: Option<String>,
    /// L2-normalize each prompt's vector before aggregating
    #[arg(long, global = true)]
    pub normalize: bool,
    /// Per-prompt embedding cache directory
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    /// Output file
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Mock backend seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Mock backend layer count
    #[arg(long, global = true)]
    pub mock_layers: Option<usize>,
    /// Mock backend hidden size
    #[arg(long, global = true)]
    pub mock_dim: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Embed one sentence per line of INPUT into an embedding file
    Embed { input: PathBuf },
    /// Spearman x100 on STS datasets stored as <data>/<name>.tsv
    EvalSts {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated dataset names; default: every known dataset present
        #[arg(long, value_delimiter = ',')]
        datasets: Vec<String>,
    },
    /// Logistic-regression accuracy on transfer tasks stored as <data>/<task>.tsv
    EvalTransfer {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated task names; default: every known task present
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
    },
    /// STS series over meta-task sets, prompt subsets or layers
    Ablate {
        mode: AblateMode,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        datasets: Vec<String>,
        /// Prompt set whose subsets are enumerated in prompts mode
        #[arg(long, default_value = "sa5")]
        set: String,
        /// Layer range for layers mode, e.g. -1..-8
        #[arg(long, allow_hyphen_values = true, default_value = "-1..-8")]
        range: String,
    },
    /// Mean and standard deviation of STS averages over prompt variants
    Variance {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        datasets: Vec<String>,
        #[arg(long, default_value = "sa-perturbed")]
        variants: String,
    },
    /// Top-k next tokens per template with stop-word mass
    Probe {
        sentence: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Inspect a cache directory or embedding file
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// List prompt sets
    Sets,
    /// Convert a raw STS directory (STS.input.*/STS.gs.*) to the TSV layout
    ConvertSts { raw: PathBuf },
}

#[derive(Subcommand, Debug)]
pub enum CacheAction {
    /// Print `key<TAB>dim<TAB>first floats` per record
    Dump { path: PathBuf },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblateMode {
    Tasks,
    Prompts,
    Layers,
}

impl Shared {
    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            config.apply_file(path)?;
        }
        let path = |p: &PathBuf| p.display().to_string();
        let overrides = [
            ("backend", self.backend.clone()),
            ("url", self.url.clone()),
            ("prompts", self.prompts.clone()),
            ("templates", self.templates.as_ref().map(path)),
            ("layer", self.layer.clone()),
            ("agg", self.agg.clone()),
            ("normalize", self.normalize.then(|| "true".to_string())),
            ("cache", self.cache.as_ref().map(path)),
            ("parallelism", self.parallelism.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(path)),
            ("seed", self.seed.map(|v| v.to_string())),
            ("mock_layers", self.mock_layers.map(|v| v.to_string())),
            ("mock_dim", self.mock_dim.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                config.set(key, &v)?;
            }
        }
        Ok(config)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                ErrorKind::Usage.exit_code() as u8
            } else {
                0
            });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            if let Some(hint) = &e.hint {
                eprintln!("hint: {hint}");
            }
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
