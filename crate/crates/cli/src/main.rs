//! `biolink` command-line entry point.
//!
//! Exit codes: 0 success, 1 validation or parse failure, 2 configuration
//! error (including usage errors), 3 backend failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use biolink::corpus::{MentionFormat, Split};
use biolink::distillgen::FilterPolicy;
use biolink::retriever::Metric;
use biolink::teacher::BackendChoice;

#[derive(Parser, Debug)]
#[command(
    name = "biolink",
    version,
    about = "Biomedical entity linking: dense retrieval, LLM re-ranking, distillation data and evaluation"
)]
pub struct Cli {
    /// Pipeline config file (TOML). Flags override values from the file
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// More logging (-v info, -vv debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Load a knowledge base and a mention file and report gold-id coverage
    Ingest(IngestArgs),
    /// Convert `id<TAB>f1 f2 ...` text vectors into an EMB1 blob plus manifest
    ImportEmbeddings(ImportArgs),
    /// Write the top-k candidates of every mention
    Retrieve(RetrieveArgs),
    /// Mine hard and random negatives and export retriever training pairs
    MineNegatives(MineArgs),
    /// Rank candidates with a teacher model and write the instruction dataset
    Generate(GenerateArgs),
    /// Check a generated dataset file
    ValidateDataset(ValidateArgs),
    /// Retrieve, re-rank with a backend and report Acc@k and recall
    Evaluate(EvaluateArgs),
    /// Price one or more usage ledgers
    CostReport(CostArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Knowledge base TSV (`id<TAB>name`) [config: paths.kb]
    #[arg(long, value_name = "PATH")]
    pub kb: Option<PathBuf>,
    /// Mention file [config: paths.train_mentions, paths.val_mentions or paths.test_mentions by split]
    #[arg(long, value_name = "PATH")]
    pub mentions: Option<PathBuf>,
    /// Mention file format: normalized-tsv or ask-a-patient [default: normalized-tsv]
    #[arg(long)]
    pub format: Option<MentionFormat>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EmbeddingArgs {
    /// Entity embedding manifest [config: paths.entity_embeddings]
    #[arg(long, value_name = "PATH")]
    pub entity_embeddings: Option<PathBuf>,
    /// Mention embedding manifest, rows keyed by mention uid [config: paths.mention_embeddings]
    #[arg(long, value_name = "PATH")]
    pub mention_embeddings: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RetrievalArgs {
    /// Candidates retrieved per mention [default: 6]
    #[arg(long)]
    pub k: Option<usize>,
    /// Similarity: dot or cosine [default: dot]
    #[arg(long)]
    pub metric: Option<Metric>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct BackendArgs {
    /// Endpoint base URL for remote or student backends (`{url}/chat/completions`)
    #[arg(long, value_name = "URL")]
    pub endpoint: Option<String>,
    /// Environment variable holding the API key [default: OPENAI_API_KEY]
    #[arg(long, value_name = "VAR")]
    pub api_key_env: Option<String>,
    /// Sampling temperature [default: 0]
    #[arg(long)]
    pub temperature: Option<f32>,
    /// Completion token cap [default: 512]
    #[arg(long)]
    pub max_output: Option<u32>,
    /// Concurrent requests [default: 4]
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Maximum requests per second [default: unlimited]
    #[arg(long)]
    pub rate_limit: Option<u32>,
    /// Response cache directory [config: paths.cache_dir]
    #[arg(long, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Bypass the response cache
    #[arg(long)]
    pub no_cache: bool,
    /// Characters of context kept around the mention [default: 256]
    #[arg(long)]
    pub context_chars: Option<usize>,
    /// Include mention context in prompts: true or false [default: true]
    #[arg(long, value_name = "BOOL")]
    pub include_context: Option<bool>,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Split tag for mention uids: train, val or test
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// Context window reported for prompts [default: 256]
    #[arg(long)]
    pub context_chars: Option<usize>,
    /// Build the knowledge base from Ask A Patient fold files instead of --kb and write it here
    #[arg(long, value_name = "PATH")]
    pub derive_kb: Option<PathBuf>,
    /// Fold files used by --derive-kb
    #[arg(long = "fold-file", value_name = "PATH")]
    pub fold_files: Vec<PathBuf>,
    /// Write the ingest report as JSON
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    /// Exit 1 when any gold id is missing from the knowledge base
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args, Debug)]
pub struct ImportArgs {
    /// Text vectors, one `id<TAB>f1 f2 ...` line per row
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Manifest to write; the blob goes next to it with extension .emb
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Check that every entity of this knowledge base has a vector
    #[arg(long, value_name = "PATH")]
    pub kb: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub emb: EmbeddingArgs,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// Split to retrieve for: train, val or test
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Output JSONL [default: <out_dir>/candidates.<split>.jsonl]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub emb: EmbeddingArgs,
    /// Split to mine for
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// Similarity: dot or cosine [default: dot]
    #[arg(long)]
    pub metric: Option<Metric>,
    /// Negatives per mention [default: 15]
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Fraction of negatives taken as hard negatives, rounded up [default: 0.10]
    #[arg(long)]
    pub hard_ratio: Option<f64>,
    /// Sampling seed [default: 42]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output TSV [default: <out_dir>/pairs.<split>.tsv]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub emb: EmbeddingArgs,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    #[command(flatten)]
    pub backend_args: BackendArgs,
    /// Split to draw mentions from (file order)
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// Number of mentions to send to the teacher (>= 1) [default: all]
    #[arg(long)]
    pub limit: Option<usize>,
    /// Teacher model name [default: gpt-3.5-turbo-0125]
    #[arg(long, value_name = "MODEL")]
    pub teacher: Option<String>,
    /// keep-all, strict-clean or drop-unparseable-only [default: drop-unparseable-only]
    #[arg(long)]
    pub filter: Option<FilterPolicy>,
    /// Backend: remote, student, mock:identity, mock:oracle or mock:reverse
    #[arg(long, default_value = "remote")]
    pub backend: BackendChoice,
    /// Teacher prompt template [config: paths.teacher_template]
    #[arg(long, value_name = "PATH")]
    pub teacher_template: Option<PathBuf>,
    /// Student instruction template [config: paths.student_template]
    #[arg(long, value_name = "PATH")]
    pub student_template: Option<PathBuf>,
    /// Output directory for dataset.jsonl, audit.jsonl and the ledger [config: paths.out_dir]
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    /// Dataset JSONL produced by `generate`
    pub dataset: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub emb: EmbeddingArgs,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    #[command(flatten)]
    pub backend_args: BackendArgs,
    /// Split to evaluate
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Re-ranker: student, remote, mock:identity, mock:oracle or mock:reverse
    #[arg(long, default_value = "student")]
    pub backend: BackendChoice,
    /// Model name sent to the backend [default: eval.student_model or generation.teacher_model]
    #[arg(long, value_name = "MODEL")]
    pub model: Option<String>,
    /// Prompt template [default: student template for --backend student, teacher template otherwise]
    #[arg(long, value_name = "PATH")]
    pub template: Option<PathBuf>,
    /// Accuracy cut-offs, comma separated [default: 1,5]
    #[arg(long, value_delimiter = ',')]
    pub acc_k: Option<Vec<usize>>,
    /// Leave mentions whose gold id is not in the knowledge base out of the metrics
    #[arg(long)]
    pub strict_gold: bool,
    /// Output directory for report.json, trace.jsonl and the ledger [config: paths.out_dir]
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    /// Usage ledger JSON; repeat to combine several runs
    #[arg(long = "ledger", value_name = "PATH")]
    pub ledgers: Vec<PathBuf>,
    /// Price table [config: paths.prices]
    #[arg(long, value_name = "PATH")]
    pub prices: Option<PathBuf>,
    /// Also write the report as JSON
    #[arg(long, value_name = "PATH")]
    pub json: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let code = commands::exit_code(&e);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
