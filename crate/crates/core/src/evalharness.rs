//! End-to-end linking evaluation: retrieve, re-rank with any backend, score.
//!
//! All metrics are kept as integer hit counts over a shared denominator and
//! divided only when reported, so equalities between metrics are exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distillgen::{hints_for, prompt_mention, thread_pool};
use crate::corpus::Mention;
use crate::embedstore::EmbeddingStore;
use crate::promptkit::{render, PromptTemplate};
use crate::rankparse::{parse_ranked, ParseError, Repair};
use crate::retriever::{Metric, Retriever};
use crate::teacher::{CompletionRequest, TeacherClient};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("metric undefined on empty input")]
    EmptyInput,
    #[error("k must be >= 1")]
    InvalidK,
    #[error("{lists} ranked lists but {golds} gold ids")]
    LengthMismatch { lists: usize, golds: usize },
}

/// `hits / total`, kept as integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub hits: usize,
    pub total: usize,
}

impl Ratio {
    pub fn value(self) -> f64 {
        self.hits as f64 / self.total as f64
    }
}

fn check_lengths<T>(lists: &[T], golds: &[impl AsRef<str>]) -> std::result::Result<(), EvalError> {
    if lists.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            lists: lists.len(),
            golds: golds.len(),
        });
    }
    if lists.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(())
}

/// Lists whose gold id is among the first `min(k, len)` positions.
pub fn hits_at_k(
    ranked: &[Vec<String>],
    golds: &[impl AsRef<str>],
    k: usize,
) -> std::result::Result<Ratio, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    check_lengths(ranked, golds)?;
    let hits = ranked
        .iter()
        .zip(golds)
        .filter(|(order, gold)| order.iter().take(k).any(|id| id == gold.as_ref()))
        .count();
    Ok(Ratio {
        hits,
        total: ranked.len(),
    })
}

pub fn acc_at_k(ranked: &[Vec<String>], golds: &[impl AsRef<str>], k: usize) -> std::result::Result<f64, EvalError> {
    hits_at_k(ranked, golds, k).map(Ratio::value)
}

/// Fraction of mentions whose gold id survived retrieval.
pub fn recall_at_k(candidate_sets: &[Vec<String>], golds: &[impl AsRef<str>]) -> std::result::Result<f64, EvalError> {
    recall_hits(candidate_sets, golds).map(Ratio::value)
}

pub fn recall_hits(candidate_sets: &[Vec<String>], golds: &[impl AsRef<str>]) -> std::result::Result<Ratio, EvalError> {
    check_lengths(candidate_sets, golds)?;
    let hits = candidate_sets
        .iter()
        .zip(golds)
        .filter(|(c, g)| c.iter().any(|id| id == g.as_ref()))
        .count();
    Ok(Ratio {
        hits,
        total: candidate_sets.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Retrieval depth.
    pub k: usize,
    pub metric: Metric,
    /// Cut-offs for accuracy.
    pub acc_ks: Vec<usize>,
    pub strict_gold: bool,
    pub parallelism: usize,
    pub context_chars: usize,
    pub include_context: bool,
    pub model: String,
    pub temperature: f32,
    pub max_output: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStatus {
    Ranked,
    Unparseable,
    BackendFailed,
    SkippedNoGold,
    SkippedGoldNotInKb,
}

/// Everything that happened to one mention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub uid: String,
    pub surface: String,
    pub gold_id: Option<String>,
    pub status: TraceStatus,
    pub candidate_ids: Vec<String>,
    pub candidate_scores: Vec<f32>,
    /// 1-based rank of the gold id in retrieval order.
    pub retrieval_rank: Option<usize>,
    pub raw_output: Option<String>,
    pub ranked_ids: Vec<String>,
    /// 1-based rank of the gold id after re-ranking.
    pub reranked_rank: Option<usize>,
    pub repairs: Vec<Repair>,
    pub clean: Option<bool>,
    pub error: Option<String>,
}

impl TraceEntry {
    pub fn counts(&self) -> bool {
        !matches!(self.status, TraceStatus::SkippedNoGold | TraceStatus::SkippedGoldNotInKb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub k: usize,
    pub metric: Metric,
    pub acc_ks: Vec<usize>,
    pub backend: String,
    pub model: String,
    pub temperature: f32,
    pub template_hash: String,
    pub strict_gold: bool,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_at: BTreeMap<usize, f64>,
    pub hits_at: BTreeMap<usize, usize>,
    pub recall_at_k_candidates: f64,
    pub recall_hits: usize,
    /// Accuracy of the retrieval order alone, at the same cut-offs.
    pub retrieval_acc_at: BTreeMap<usize, f64>,
    pub n_evaluated: usize,
    pub n_skipped: usize,
    pub n_backend_failures: usize,
    pub n_unparseable: usize,
    pub n_repaired: usize,
    pub trace_path: Option<String>,
    pub config: ConfigEcho,
}

pub struct EvalRun {
    pub report: EvalReport,
    pub traces: Vec<TraceEntry>,
}

/// Builds the report from traces and checks `acc@k1 <= acc@k2 <= recall`.
pub fn build_report(traces: &[TraceEntry], config: ConfigEcho, trace_path: Option<String>) -> Result<EvalReport> {
    let counted: Vec<&TraceEntry> = traces.iter().filter(|t| t.counts()).collect();
    if counted.is_empty() {
        return Err(Error::Eval(EvalError::EmptyInput));
    }
    let golds: Vec<&str> = counted.iter().map(|t| t.gold_id.as_deref().unwrap_or_default()).collect();
    let ranked: Vec<Vec<String>> = counted.iter().map(|t| t.ranked_ids.clone()).collect();
    let retrieved: Vec<Vec<String>> = counted.iter().map(|t| t.candidate_ids.clone()).collect();
    let recall = recall_hits(&retrieved, &golds)?;

    let mut ks = config.acc_ks.clone();
    ks.sort_unstable();
    ks.dedup();
    let mut hits_at = BTreeMap::new();
    let mut acc_at = BTreeMap::new();
    let mut retrieval_acc_at = BTreeMap::new();
    let mut prev = 0;
    for &k in &ks {
        let h = hits_at_k(&ranked, &golds, k)?;
        if h.hits < prev || h.hits > recall.hits {
            return Err(Error::Invariant(format!(
                "metric sandwich broken at k={k}: hits {} (previous cut-off {prev}, recall {})",
                h.hits, recall.hits
            )));
        }
        prev = h.hits;
        hits_at.insert(k, h.hits);
        acc_at.insert(k, h.value());
        retrieval_acc_at.insert(k, hits_at_k(&retrieved, &golds, k)?.value());
    }

    let count = |s: TraceStatus| traces.iter().filter(|t| t.status == s).count();
    Ok(EvalReport {
        acc_at,
        hits_at,
        recall_at_k_candidates: recall.value(),
        recall_hits: recall.hits,
        retrieval_acc_at,
        n_evaluated: counted.len(),
        n_skipped: traces.len() - counted.len(),
        n_backend_failures: count(TraceStatus::BackendFailed),
        n_unparseable: count(TraceStatus::Unparseable),
        n_repaired: traces
            .iter()
            .filter(|t| t.status == TraceStatus::Ranked && t.clean == Some(false))
            .count(),
        trace_path,
        config,
    })
}

/// Runs every mention through retrieval and the re-ranking backend.
#[allow(clippy::too_many_arguments)]
pub fn run_eval(
    mentions: &[Mention],
    retriever: &Retriever<'_>,
    mention_vectors: &EmbeddingStore,
    client: &TeacherClient,
    template: &PromptTemplate,
    opts: &EvalOptions,
    config_hash: Option<String>,
    trace_path: Option<&Path>,
) -> Result<EvalRun> {
    if opts.k == 0 || opts.acc_ks.contains(&0) {
        return Err(Error::Eval(EvalError::InvalidK));
    }
    let pool = thread_pool(opts.parallelism)?;
    let traces: Vec<TraceEntry> = pool.install(|| {
        mentions
            .par_iter()
            .map(|m| eval_one(m, retriever, mention_vectors, client, template, opts))
            .collect::<Result<Vec<_>>>()
    })?;
    let echo = ConfigEcho {
        k: opts.k,
        metric: opts.metric,
        acc_ks: opts.acc_ks.clone(),
        backend: client.describe(),
        model: opts.model.clone(),
        temperature: opts.temperature,
        template_hash: template.content_hash(),
        strict_gold: opts.strict_gold,
        config_hash,
    };
    if let Some(path) = trace_path {
        crate::distillgen::write_jsonl(path, &traces)?;
    }
    let report = build_report(&traces, echo, trace_path.map(|p| p.display().to_string()))?;
    Ok(EvalRun { report, traces })
}

fn eval_one(
    raw: &Mention,
    retriever: &Retriever<'_>,
    vectors: &EmbeddingStore,
    client: &TeacherClient,
    template: &PromptTemplate,
    opts: &EvalOptions,
) -> Result<TraceEntry> {
    let m = prompt_mention(raw, opts.include_context, opts.context_chars);
    let kb = retriever.kb();
    let mut t = TraceEntry {
        uid: m.uid.clone(),
        surface: m.surface.clone(),
        gold_id: m.gold_id.clone(),
        status: TraceStatus::Ranked,
        candidate_ids: vec![],
        candidate_scores: vec![],
        retrieval_rank: None,
        raw_output: None,
        ranked_ids: vec![],
        reranked_rank: None,
        repairs: vec![],
        clean: None,
        error: None,
    };
    match m.gold_id.as_deref() {
        None => {
            t.status = TraceStatus::SkippedNoGold;
            return Ok(t);
        }
        Some(g) if opts.strict_gold && !kb.contains(g) => {
            t.status = TraceStatus::SkippedGoldNotInKb;
            return Ok(t);
        }
        Some(_) => {}
    }
    let gold = m.gold_id.as_deref().unwrap_or_default();

    let query = vectors.lookup(&m.uid)?;
    let cs = retriever.top_k(&m.uid, query, opts.k, opts.metric)?;
    t.candidate_ids = cs.ids().map(str::to_string).collect();
    t.candidate_scores = cs.candidates.iter().map(|c| c.score).collect();
    t.retrieval_rank = cs.rank_of(gold);

    let prompt = render(template, &m, &cs, kb)?;
    let request = CompletionRequest::new(&opts.model, &prompt.text)
        .with_temperature(opts.temperature)
        .with_max_output(opts.max_output)
        .with_hints(hints_for(&m, &prompt.candidate_labels, &prompt.candidate_ids));
    let response = match client.complete(&request) {
        Ok(r) => r,
        Err(e) if e.is_fatal() => return Err(e.into()),
        Err(e) => {
            log::warn!("{}: re-ranker call failed: {e}", m.uid);
            t.status = TraceStatus::BackendFailed;
            t.error = Some(e.to_string());
            return Ok(t);
        }
    };
    t.raw_output = Some(response.text.clone());
    match parse_ranked(&m.uid, &response.text, &prompt.candidate_labels, &prompt.candidate_ids) {
        Ok(r) => {
            t.reranked_rank = r.order.iter().position(|id| id == gold).map(|p| p + 1);
            t.ranked_ids = r.order;
            t.repairs = r.repairs;
            t.clean = Some(r.clean);
        }
        Err(ParseError::Unparseable) => {
            t.status = TraceStatus::Unparseable;
            t.error = Some(ParseError::Unparseable.to_string());
        }
        Err(e) => return Err(e.into()),
    }
    Ok(t)
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "backend   {} ({})", self.config.backend, self.config.model);
        let _ = writeln!(out, "mentions  {} evaluated, {} skipped", self.n_evaluated, self.n_skipped);
        let _ = writeln!(out, "{:<10} {:>10} {:>10}", "metric", "rerank", "retrieval");
        for (k, acc) in &self.acc_at {
            let _ = writeln!(out, "{:<10} {:>10.3} {:>10.3}", format!("Acc@{k}"), acc, self.retrieval_acc_at[k]);
        }
        let _ = writeln!(
            out,
            "{:<10} {:>10.3}",
            format!("Recall@{}", self.config.k),
            self.recall_at_k_candidates
        );
        let _ = writeln!(
            out,
            "failures  {} backend, {} unparseable, {} repaired",
            self.n_backend_failures, self.n_unparseable, self.n_repaired
        );
        out
    }
}
