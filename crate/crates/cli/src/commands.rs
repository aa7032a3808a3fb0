use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};

use biolink::config::{require_existing, require_set, PipelineConfig};
use biolink::corpus::{self, KnowledgeBase, Mention, Split};
use biolink::distillgen::{self, GenerateOptions, Outcome};
use biolink::embedstore::{self, EmbeddingStore};
use biolink::evalharness::{self, EvalOptions};
use biolink::promptkit::PromptTemplate;
use biolink::retriever::{self, Retriever};
use biolink::teacher::{
    cost_report, BackendChoice, ChatBackend, MockBackend, PriceTable, RateLimiter, RemoteBackend, RemoteConfig,
    ResponseCache, TeacherClient, UsageLedger,
};
use biolink::Error;

use crate::{
    BackendArgs, Cli, Command, CostArgs, DataArgs, EmbeddingArgs, EvaluateArgs, GenerateArgs, ImportArgs, IngestArgs,
    MineArgs, RetrievalArgs, RetrieveArgs, ValidateArgs,
};

/// Failure carrying an explicit exit code.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

fn config_error(message: impl Into<String>) -> anyhow::Error {
    Error::Config(message.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(x) = cause.downcast_ref::<Exit>() {
            return x.code;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config(_) => 2,
                Error::Teacher(_) => 3,
                _ => 1,
            };
        }
    }
    1
}

pub fn run(cli: Cli) -> Result<u8> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Ingest(a) => ingest(&mut cfg, a),
        Command::ImportEmbeddings(a) => import_embeddings(a),
        Command::Retrieve(a) => retrieve(&mut cfg, a),
        Command::MineNegatives(a) => mine_negatives(&mut cfg, a),
        Command::Generate(a) => generate(&mut cfg, a),
        Command::ValidateDataset(a) => validate_dataset(a),
        Command::Evaluate(a) => evaluate(&mut cfg, a),
        Command::CostReport(a) => cost(&cfg, a),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn apply_data(cfg: &mut PipelineConfig, d: &DataArgs, split: Split) {
    set_opt(&mut cfg.paths.kb, d.kb.clone());
    set(&mut cfg.paths.mention_format, d.format);
    match split {
        Split::Train => set_opt(&mut cfg.paths.train_mentions, d.mentions.clone()),
        Split::Val => set_opt(&mut cfg.paths.val_mentions, d.mentions.clone()),
        Split::Test => set_opt(&mut cfg.paths.test_mentions, d.mentions.clone()),
    }
}

fn apply_embeddings(cfg: &mut PipelineConfig, e: &EmbeddingArgs) {
    set_opt(&mut cfg.paths.entity_embeddings, e.entity_embeddings.clone());
    set_opt(&mut cfg.paths.mention_embeddings, e.mention_embeddings.clone());
}

fn apply_retrieval(cfg: &mut PipelineConfig, r: &RetrievalArgs) {
    set(&mut cfg.retrieval.k, r.k);
    set(&mut cfg.retrieval.metric, r.metric);
}

fn apply_backend(cfg: &mut PipelineConfig, b: &BackendArgs) {
    let g = &mut cfg.generation;
    set(&mut g.api_key_env, b.api_key_env.clone());
    set(&mut g.temperature, b.temperature);
    set(&mut g.max_output, b.max_output);
    set(&mut g.parallelism, b.parallelism);
    set_opt(&mut g.rate_limit, b.rate_limit);
    set(&mut g.context_chars, b.context_chars);
    set(&mut g.include_context, b.include_context);
    set_opt(&mut cfg.paths.cache_dir, b.cache_dir.clone());
    if b.no_cache {
        cfg.paths.cache_dir = None;
    }
}

fn mentions_field(split: Split) -> &'static str {
    match split {
        Split::Train => "paths.train_mentions",
        Split::Val => "paths.val_mentions",
        Split::Test => "paths.test_mentions",
    }
}

fn mentions_path(cfg: &PipelineConfig, split: Split) -> &Option<PathBuf> {
    match split {
        Split::Train => &cfg.paths.train_mentions,
        Split::Val => &cfg.paths.val_mentions,
        Split::Test => &cfg.paths.test_mentions,
    }
}

fn load_kb(cfg: &PipelineConfig) -> Result<KnowledgeBase> {
    let path = require_existing("paths.kb", &cfg.paths.kb)?;
    Ok(corpus::load_kb(path).map_err(Error::from)?)
}

fn load_mentions(cfg: &PipelineConfig, split: Split) -> Result<Vec<Mention>> {
    let path = require_existing(mentions_field(split), mentions_path(cfg, split))?;
    Ok(corpus::load_mentions(path, cfg.paths.mention_format, split).map_err(Error::from)?)
}

fn load_store(field: &str, value: &Option<PathBuf>) -> Result<EmbeddingStore> {
    let path = require_existing(field, value)?;
    let store = embedstore::load_store(path).map_err(Error::from)?;
    Ok(store)
}

/// Everything retrieval needs, checked up front so missing inputs surface as
/// configuration errors before any work starts.
struct Inputs {
    kb: KnowledgeBase,
    entities: EmbeddingStore,
    vectors: EmbeddingStore,
    mentions: Vec<Mention>,
}

fn load_inputs(cfg: &PipelineConfig, split: Split) -> Result<Inputs> {
    require_existing("paths.kb", &cfg.paths.kb)?;
    require_existing(mentions_field(split), mentions_path(cfg, split))?;
    require_existing("paths.entity_embeddings", &cfg.paths.entity_embeddings)?;
    require_existing("paths.mention_embeddings", &cfg.paths.mention_embeddings)?;
    let kb = load_kb(cfg)?;
    let mentions = load_mentions(cfg, split)?;
    let entities = load_store("paths.entity_embeddings", &cfg.paths.entity_embeddings)?;
    let vectors = load_store("paths.mention_embeddings", &cfg.paths.mention_embeddings)?;
    Ok(Inputs {
        kb,
        entities,
        vectors,
        mentions,
    })
}

fn out_dir(cfg: &PipelineConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    let dir = match flag {
        Some(d) => d,
        None => require_set("paths.out_dir", &cfg.paths.out_dir)?.to_path_buf(),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_template(field: &str, value: &Option<PathBuf>) -> Result<PromptTemplate> {
    let path = require_existing(field, value)?;
    Ok(PromptTemplate::load(path).map_err(Error::from)?)
}

fn ingest(cfg: &mut PipelineConfig, a: IngestArgs) -> Result<u8> {
    apply_data(cfg, &a.data, a.split);
    set(&mut cfg.generation.context_chars, a.context_chars);
    let kb = match &a.derive_kb {
        Some(out) => {
            if a.fold_files.is_empty() {
                return Err(config_error("--derive-kb needs at least one --fold-file"));
            }
            let kb = corpus::derive_kb_from_ask_a_patient(&a.fold_files).map_err(Error::from)?;
            corpus::save_kb(&kb, out).map_err(Error::from)?;
            eprintln!("wrote {} entities to {}", kb.len(), out.display());
            kb
        }
        None => load_kb(cfg)?,
    };
    let path = require_existing(mentions_field(a.split), mentions_path(cfg, a.split))?.to_path_buf();
    let mentions = load_mentions(cfg, a.split)?;
    let report = corpus::IngestReport::build(
        &path.display().to_string(),
        a.split,
        &mentions,
        &kb,
        cfg.generation.context_chars,
    );
    for line in report.log_lines() {
        println!("{line}");
    }
    if let Some(out) = &a.report {
        fs::write(out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    }
    if a.strict && !report.unresolved_gold.is_empty() {
        return Ok(1);
    }
    Ok(0)
}

fn import_embeddings(a: ImportArgs) -> Result<u8> {
    let text = fs::read_to_string(&a.input)
        .map_err(|e| config_error(format!("--input {}: {e}", a.input.display())))?;
    let store = EmbeddingStore::from_text(&text).map_err(Error::from)?;
    if let Some(kb_path) = &a.kb {
        let kb = corpus::load_kb(kb_path).map_err(Error::from)?;
        let report = store.validate_alignment(&kb);
        if !report.orphans.is_empty() {
            log::warn!("{} vectors have no knowledge-base entity", report.orphans.len());
        }
        if !report.is_complete() {
            eprintln!(
                "{} knowledge-base entities have no vector, e.g. {}",
                report.missing.len(),
                report.missing[0]
            );
            return Ok(1);
        }
    }
    let manifest = store.save(&a.out).map_err(Error::from)?;
    println!(
        "wrote {} vectors of dim {} to {} (sha256 {})",
        manifest.count,
        manifest.dim,
        a.out.display(),
        manifest.checksum
    );
    Ok(0)
}

fn retrieve(cfg: &mut PipelineConfig, a: RetrieveArgs) -> Result<u8> {
    apply_data(cfg, &a.data, a.split);
    apply_embeddings(cfg, &a.emb);
    apply_retrieval(cfg, &a.retrieval);
    cfg.validate()?;
    let inputs = load_inputs(cfg, a.split)?;
    let out = match a.out {
        Some(p) => p,
        None => out_dir(cfg, None)?.join(format!("candidates.{}.jsonl", a.split)),
    };
    let r = Retriever::new(&inputs.kb, &inputs.entities).map_err(Error::from)?;
    let mut sets = Vec::with_capacity(inputs.mentions.len());
    for m in &inputs.mentions {
        let q = inputs.vectors.lookup(&m.uid).map_err(Error::from)?;
        sets.push(r.top_k(&m.uid, q, cfg.retrieval.k, cfg.retrieval.metric).map_err(Error::from)?);
    }
    distillgen::write_jsonl(&out, &sets)?;
    let golded: Vec<(Vec<String>, String)> = inputs
        .mentions
        .iter()
        .zip(&sets)
        .filter_map(|(m, cs)| m.gold_id.clone().map(|g| (cs.ids().map(str::to_string).collect(), g)))
        .collect();
    let (lists, golds): (Vec<_>, Vec<_>) = golded.into_iter().unzip();
    match evalharness::recall_at_k(&lists, &golds) {
        Ok(r) => println!(
            "{} mentions, recall@{} = {r:.3}, candidates written to {}",
            sets.len(),
            cfg.retrieval.k,
            out.display()
        ),
        Err(_) => println!("{} mentions, candidates written to {}", sets.len(), out.display()),
    }
    Ok(0)
}

fn mine_negatives(cfg: &mut PipelineConfig, a: MineArgs) -> Result<u8> {
    apply_data(cfg, &a.data, a.split);
    apply_embeddings(cfg, &a.emb);
    set(&mut cfg.retrieval.metric, a.metric);
    set(&mut cfg.retrieval.negatives, a.negatives);
    set(&mut cfg.retrieval.hard_ratio, a.hard_ratio);
    set(&mut cfg.retrieval.seed, a.seed);
    cfg.validate()?;
    let inputs = load_inputs(cfg, a.split)?;
    let out = match a.out {
        Some(p) => p,
        None => out_dir(cfg, None)?.join(format!("pairs.{}.tsv", a.split)),
    };
    let r = Retriever::new(&inputs.kb, &inputs.entities).map_err(Error::from)?;
    let rc = &cfg.retrieval;
    let mut kept = Vec::new();
    let mut groups = Vec::new();
    for m in &inputs.mentions {
        let Some(gold) = m.gold_id.as_deref() else {
            log::warn!("{}: no gold id, skipped", m.uid);
            continue;
        };
        if !inputs.kb.contains(gold) {
            log::warn!("{}: gold id {gold:?} not in the knowledge base, skipped", m.uid);
            continue;
        }
        let q = inputs.vectors.lookup(&m.uid).map_err(Error::from)?;
        let negs = r
            .mine_negatives(&m.uid, q, gold, rc.negatives, rc.hard_ratio, rc.seed, rc.metric)
            .map_err(Error::from)?;
        kept.push(m.clone());
        groups.push(negs);
    }
    let rows = retriever::export_training_pairs(&kept, &groups, &out).map_err(Error::from)?;
    println!(
        "{} mentions, {} rows ({} hard + {} random negatives each) written to {}",
        kept.len(),
        rows,
        retriever::hard_negative_count(rc.negatives, rc.hard_ratio),
        rc.negatives - retriever::hard_negative_count(rc.negatives, rc.hard_ratio),
        out.display()
    );
    Ok(0)
}

/// Backend, model name and client for a run.
fn build_client(cfg: &PipelineConfig, choice: BackendChoice, endpoint: Option<String>, model: String) -> Result<TeacherClient> {
    let backend: Arc<dyn ChatBackend> = match choice.mock_mode() {
        Some(mode) => Arc::new(MockBackend::new(mode)),
        None => {
            let (endpoint, field) = match choice {
                BackendChoice::Student => (endpoint.or_else(|| cfg.eval.student_endpoint.clone()), "eval.student_endpoint"),
                _ => (endpoint.or_else(|| cfg.generation.endpoint.clone()), "generation.endpoint"),
            };
            let endpoint = endpoint.ok_or_else(|| config_error(format!("{field} is not set (config file or --endpoint)")))?;
            let key_var = &cfg.generation.api_key_env;
            let key = std::env::var(key_var).ok().filter(|k| !k.is_empty());
            if key.is_none() && choice == BackendChoice::Remote {
                return Err(config_error(format!("environment variable {key_var} is not set")));
            }
            let remote = RemoteBackend::new(RemoteConfig::new(endpoint).with_api_key(key)).map_err(Error::from)?;
            Arc::new(remote)
        }
    };
    log::info!("backend {} model {model}", backend.describe());
    let mut client = TeacherClient::new(backend);
    if let Some(dir) = &cfg.paths.cache_dir {
        let cache = ResponseCache::new(dir).map_err(|e| config_error(format!("paths.cache_dir {}: {e}", dir.display())))?;
        client = client.with_cache(cache);
    }
    if let Some(rate) = cfg.generation.rate_limit {
        client = client.with_rate_limit(RateLimiter::per_second(rate));
    }
    Ok(client)
}

fn model_for(choice: BackendChoice, cfg: &PipelineConfig, flag: Option<String>, remote_default: &str) -> String {
    if let Some(m) = flag {
        return m;
    }
    match choice {
        BackendChoice::Student => cfg.eval.student_model.clone(),
        BackendChoice::Remote => remote_default.to_string(),
        // Mock outputs must never share cache entries with a real model.
        mock => mock.to_string(),
    }
}

fn save_ledger(ledger: &UsageLedger, path: &Path) -> Result<()> {
    ledger.save(path).with_context(|| format!("writing {}", path.display()))
}

fn generate(cfg: &mut PipelineConfig, a: GenerateArgs) -> Result<u8> {
    apply_data(cfg, &a.data, a.split);
    apply_embeddings(cfg, &a.emb);
    apply_retrieval(cfg, &a.retrieval);
    apply_backend(cfg, &a.backend_args);
    set(&mut cfg.generation.teacher_model, a.teacher.clone());
    set(&mut cfg.generation.filter_policy, a.filter);
    set_opt(&mut cfg.generation.limit, a.limit);
    set_opt(&mut cfg.paths.teacher_template, a.teacher_template.clone());
    set_opt(&mut cfg.paths.student_template, a.student_template.clone());
    if a.backend == BackendChoice::Student {
        set_opt(&mut cfg.eval.student_endpoint, a.backend_args.endpoint.clone());
    } else {
        set_opt(&mut cfg.generation.endpoint, a.backend_args.endpoint.clone());
    }
    cfg.validate()?;

    let inputs = load_inputs(cfg, a.split)?;
    let teacher_tpl = load_template("paths.teacher_template", &cfg.paths.teacher_template)?;
    let student_tpl = load_template("paths.student_template", &cfg.paths.student_template)?;
    let out = out_dir(cfg, a.out_dir)?;
    let g = &cfg.generation;
    let limit = g.limit.unwrap_or(inputs.mentions.len());
    let model = model_for(a.backend, cfg, None, &g.teacher_model);
    let client = build_client(cfg, a.backend, None, model.clone())?;
    let r = Retriever::new(&inputs.kb, &inputs.entities).map_err(Error::from)?;
    let opts = GenerateOptions {
        k: cfg.retrieval.k,
        metric: cfg.retrieval.metric,
        limit,
        filter: g.filter_policy,
        parallelism: g.parallelism,
        context_chars: g.context_chars,
        include_context: g.include_context,
        teacher_model: model,
        temperature: g.temperature,
        max_output: g.max_output,
    };
    let result = distillgen::generate_dataset(
        &inputs.mentions,
        &r,
        &inputs.vectors,
        &client,
        &teacher_tpl,
        &student_tpl,
        &opts,
    );
    // The ledger is worth keeping even when the run aborts.
    save_ledger(client.ledger(), &out.join("ledger.generate.json"))?;
    let generated = result?;

    let dataset = out.join("dataset.jsonl");
    distillgen::write_jsonl(&dataset, &generated.records)?;
    distillgen::write_jsonl(out.join("audit.jsonl"), &generated.audit)?;
    let totals = client.ledger().totals();
    let (remote, cached) = totals
        .values()
        .fold((0, 0), |(r, c), t| (r + t.remote_calls, c + t.cache_hits));
    println!(
        "{} mentions: {} emitted, {} unparseable, {} not clean, {} backend failures",
        generated.audit.len(),
        generated.count(Outcome::Emitted),
        generated.count(Outcome::FilteredUnparseable),
        generated.count(Outcome::FilteredNotClean),
        generated.count(Outcome::FailedBackend),
    );
    println!("calls: {remote} remote, {cached} from cache");
    println!("dataset written to {} (config {})", dataset.display(), cfg.hash());
    if generated.count(Outcome::FailedBackend) > 0 && generated.records.is_empty() {
        return Ok(3);
    }
    Ok(0)
}

fn validate_dataset(a: ValidateArgs) -> Result<u8> {
    if !a.dataset.exists() {
        return Err(config_error(format!("dataset {} does not exist", a.dataset.display())));
    }
    let report = distillgen::validate_dataset(&a.dataset)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for e in &report.errors {
        eprintln!("error: {e}");
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "{verdict}: {} records, {} errors, {} warnings",
        report.records,
        report.errors.len(),
        report.warnings.len()
    );
    Ok(if report.passed() { 0 } else { 1 })
}

fn evaluate(cfg: &mut PipelineConfig, a: EvaluateArgs) -> Result<u8> {
    apply_data(cfg, &a.data, a.split);
    apply_embeddings(cfg, &a.emb);
    apply_retrieval(cfg, &a.retrieval);
    apply_backend(cfg, &a.backend_args);
    set(&mut cfg.eval.acc_ks, a.acc_k.clone());
    if a.strict_gold {
        cfg.eval.strict_gold = true;
    }
    match a.backend {
        BackendChoice::Student => {
            set_opt(&mut cfg.eval.student_endpoint, a.backend_args.endpoint.clone());
            set(&mut cfg.eval.student_model, a.model.clone());
        }
        BackendChoice::Remote => {
            set_opt(&mut cfg.generation.endpoint, a.backend_args.endpoint.clone());
            set(&mut cfg.generation.teacher_model, a.model.clone());
        }
        _ => {}
    }
    cfg.validate()?;

    let inputs = load_inputs(cfg, a.split)?;
    let template = match (&a.template, a.backend) {
        (Some(p), _) => load_template("--template", &Some(p.clone()))?,
        (None, BackendChoice::Student) => load_template("paths.student_template", &cfg.paths.student_template)?,
        (None, _) => load_template("paths.teacher_template", &cfg.paths.teacher_template)?,
    };
    let out = out_dir(cfg, a.out_dir)?;
    let model = model_for(a.backend, cfg, a.model.clone(), &cfg.generation.teacher_model);
    let client = build_client(cfg, a.backend, None, model.clone())?;
    let r = Retriever::new(&inputs.kb, &inputs.entities).map_err(Error::from)?;
    let g = &cfg.generation;
    let opts = EvalOptions {
        k: cfg.retrieval.k,
        metric: cfg.retrieval.metric,
        acc_ks: cfg.eval.acc_ks.clone(),
        strict_gold: cfg.eval.strict_gold,
        parallelism: g.parallelism,
        context_chars: g.context_chars,
        include_context: g.include_context,
        model,
        temperature: g.temperature,
        max_output: g.max_output,
    };
    let trace = out.join("trace.jsonl");
    let result = evalharness::run_eval(
        &inputs.mentions,
        &r,
        &inputs.vectors,
        &client,
        &template,
        &opts,
        Some(cfg.hash()),
        Some(&trace),
    );
    save_ledger(client.ledger(), &out.join("ledger.evaluate.json"))?;
    let run = result?;
    let report_path = out.join("report.json");
    run.report.write(&report_path)?;
    print!("{}", run.report.render_table());
    println!("report written to {}", report_path.display());
    Ok(0)
}

fn cost(cfg: &PipelineConfig, a: CostArgs) -> Result<u8> {
    if a.ledgers.is_empty() {
        return Err(config_error("at least one --ledger is required"));
    }
    let prices_path = a.prices.clone().or_else(|| cfg.paths.prices.clone());
    let prices_path = require_existing("paths.prices", &prices_path)?;
    let prices = PriceTable::load(prices_path).map_err(config_error)?;
    let combined = UsageLedger::default();
    for path in &a.ledgers {
        if !path.exists() {
            return Err(config_error(format!("--ledger {} does not exist", path.display())));
        }
        let ledger = UsageLedger::load(path).map_err(|e| anyhow!(Exit {
            code: 1,
            message: format!("{}: {e}", path.display()),
        }))?;
        for r in ledger.records() {
            combined.push(r);
        }
    }
    let report = cost_report(&combined, &prices);
    print!("{}", report.render_table());
    if let Some(out) = &a.json {
        fs::write(out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    }
    if !report.unpriced.is_empty() {
        eprintln!("unpriced models: {}", report.unpriced.join(", "));
    }
    Ok(0)
}
