//! Teacher-labelled instruction dataset generation.
//!
//! For each training mention: retrieve candidates, ask the teacher to rank
//! them (teacher template), parse the ranking, and emit an instruction/output
//! pair rendered with the *student* template so the student is trained on the
//! prompt it will see at inference time.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{window_context, Mention};
use crate::embedstore::EmbeddingStore;
use crate::promptkit::{render_student, render_teacher, PromptTemplate};
use crate::rankparse::{parse_ranked, ParseError, RankedList, Repair};
use crate::retriever::{Metric, Retriever};
use crate::teacher::{CompletionRequest, MockHints, TeacherClient};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterPolicy {
    /// Emit everything; unparseable outputs fall back to retrieval order.
    KeepAll,
    /// Drop any record whose parse needed a repair.
    StrictClean,
    #[default]
    DropUnparseableOnly,
}

impl fmt::Display for FilterPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterPolicy::KeepAll => "keep-all",
            FilterPolicy::StrictClean => "strict-clean",
            FilterPolicy::DropUnparseableOnly => "drop-unparseable-only",
        })
    }
}

impl FromStr for FilterPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "keep-all" => Ok(FilterPolicy::KeepAll),
            "strict-clean" | "strict" => Ok(FilterPolicy::StrictClean),
            "drop-unparseable-only" => Ok(FilterPolicy::DropUnparseableOnly),
            other => Err(format!(
                "unknown filter policy {other:?} (expected keep-all, strict-clean or drop-unparseable-only)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillMeta {
    pub mention_uid: String,
    /// Retrieval order.
    pub candidate_ids: Vec<String>,
    /// Teacher order; matches the lines of `output`.
    pub ranked_ids: Vec<String>,
    pub clean: bool,
    /// `None` when the mention has no gold annotation.
    pub gold_in_candidates: Option<bool>,
    pub teacher_model: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillRecord {
    pub instruction: String,
    pub output: String,
    pub meta: DistillMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "emitted")]
    Emitted,
    #[serde(rename = "filtered:unparseable")]
    FilteredUnparseable,
    #[serde(rename = "filtered:not_clean")]
    FilteredNotClean,
    #[serde(rename = "failed:backend")]
    FailedBackend,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub uid: String,
    pub outcome: Outcome,
    pub repairs: Vec<Repair>,
    pub gold_in_candidates: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub k: usize,
    pub metric: Metric,
    pub limit: usize,
    pub filter: FilterPolicy,
    pub parallelism: usize,
    pub context_chars: usize,
    pub include_context: bool,
    pub teacher_model: String,
    pub temperature: f32,
    pub max_output: u32,
}

#[derive(Debug, Clone, Default)]
pub struct Generated {
    pub records: Vec<DistillRecord>,
    /// One entry per processed mention, in mention order.
    pub audit: Vec<AuditEntry>,
}

impl Generated {
    pub fn count(&self, outcome: Outcome) -> usize {
        self.audit.iter().filter(|a| a.outcome == outcome).count()
    }
}

/// Mention as it goes into a prompt: context windowed around the surface
/// form, or dropped entirely.
pub fn prompt_mention(m: &Mention, include_context: bool, context_chars: usize) -> Mention {
    let context = if include_context {
        m.context
            .as_deref()
            .map(|c| window_context(c, &m.surface, context_chars))
            .filter(|c| !c.trim().is_empty())
    } else {
        None
    };
    Mention {
        context,
        ..m.clone()
    }
}

/// Mock-backend hints for a mention; the gold label only when retrieved.
pub fn hints_for(m: &Mention, labels: &[String], ids: &[String]) -> MockHints {
    let gold_label = m
        .gold_id
        .as_deref()
        .and_then(|g| ids.iter().position(|id| id == g))
        .map(|i| labels[i].clone());
    MockHints {
        candidate_labels: labels.to_vec(),
        gold_label,
    }
}

fn check_vectors(mentions: &[Mention], vectors: &EmbeddingStore) -> Result<()> {
    let missing: Vec<&str> = mentions
        .iter()
        .map(|m| m.uid.as_str())
        .filter(|uid| !vectors.contains(uid))
        .collect();
    if missing.is_empty() {
        return Ok(());
    }
    let shown: Vec<&str> = missing.iter().take(5).copied().collect();
    Err(Error::Config(format!(
        "{} mention(s) have no embedding, e.g. {}",
        missing.len(),
        shown.join(", ")
    )))
}

pub(crate) fn thread_pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Runs the teacher over the first `limit` mentions. Output order follows
/// mention order regardless of completion order.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    mentions: &[Mention],
    retriever: &Retriever<'_>,
    mention_vectors: &EmbeddingStore,
    client: &TeacherClient,
    teacher_template: &PromptTemplate,
    student_template: &PromptTemplate,
    opts: &GenerateOptions,
) -> Result<Generated> {
    if opts.limit == 0 {
        return Err(Error::Config("limit must be >= 1".into()));
    }
    if opts.limit > mentions.len() {
        return Err(Error::Config(format!(
            "limit {} exceeds the {} available mentions",
            opts.limit,
            mentions.len()
        )));
    }
    let selected = &mentions[..opts.limit];
    check_vectors(selected, mention_vectors)?;

    let pool = thread_pool(opts.parallelism)?;
    let results: Vec<(Option<DistillRecord>, AuditEntry)> = pool.install(|| {
        selected
            .par_iter()
            .map(|m| generate_one(m, retriever, mention_vectors, client, teacher_template, student_template, opts))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut out = Generated::default();
    for (rec, audit) in results {
        out.records.extend(rec);
        out.audit.push(audit);
    }
    Ok(out)
}

fn generate_one(
    raw: &Mention,
    retriever: &Retriever<'_>,
    vectors: &EmbeddingStore,
    client: &TeacherClient,
    teacher_template: &PromptTemplate,
    student_template: &PromptTemplate,
    opts: &GenerateOptions,
) -> Result<(Option<DistillRecord>, AuditEntry)> {
    let m = prompt_mention(raw, opts.include_context, opts.context_chars);
    let query = vectors.lookup(&m.uid)?;
    let cs = retriever.top_k(&m.uid, query, opts.k, opts.metric)?;
    let kb = retriever.kb();
    let teacher_prompt = render_teacher(teacher_template, &m, &cs, kb)?;
    let student_prompt = render_student(student_template, &m, &cs, kb)?;
    let labels = &teacher_prompt.candidate_labels;
    let ids = &teacher_prompt.candidate_ids;
    let gold_in_candidates = m.gold_id.as_ref().map(|g| ids.contains(g));

    let audit = |outcome, repairs: Vec<Repair>, error: Option<String>| AuditEntry {
        uid: m.uid.clone(),
        outcome,
        repairs,
        gold_in_candidates,
        error,
    };

    let request = CompletionRequest::new(&opts.teacher_model, &teacher_prompt.text)
        .with_temperature(opts.temperature)
        .with_max_output(opts.max_output)
        .with_hints(hints_for(&m, labels, ids));
    let response = match client.complete(&request) {
        Ok(r) => r,
        Err(e) if e.is_fatal() => return Err(e.into()),
        Err(e) => {
            log::warn!("{}: teacher call failed: {e}", m.uid);
            return Ok((None, audit(Outcome::FailedBackend, vec![], Some(e.to_string()))));
        }
    };

    let ranked = match parse_ranked(&m.uid, &response.text, labels, ids) {
        Ok(r) => r,
        Err(ParseError::Unparseable) if opts.filter == FilterPolicy::KeepAll => RankedList::fallback(&m.uid, ids),
        Err(ParseError::Unparseable) => {
            return Ok((None, audit(Outcome::FilteredUnparseable, vec![], None)));
        }
        Err(e) => return Err(e.into()),
    };
    if opts.filter == FilterPolicy::StrictClean && !ranked.clean {
        return Ok((None, audit(Outcome::FilteredNotClean, ranked.repairs, None)));
    }

    let label_of: HashMap<&str, &str> = ids.iter().map(String::as_str).zip(labels.iter().map(String::as_str)).collect();
    let output = ranked
        .order
        .iter()
        .map(|id| label_of[id.as_str()])
        .collect::<Vec<_>>()
        .join("\n");
    let record = DistillRecord {
        instruction: student_prompt.text,
        output,
        meta: DistillMeta {
            mention_uid: m.uid.clone(),
            candidate_ids: ids.clone(),
            ranked_ids: ranked.order.clone(),
            clean: ranked.clean,
            gold_in_candidates,
            teacher_model: opts.teacher_model.clone(),
        },
    };
    Ok((Some(record), audit(Outcome::Emitted, ranked.repairs, None)))
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    /// 1-based line in the dataset file.
    pub line: usize,
    pub uid: Option<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.uid {
            Some(uid) => write!(f, "line {} ({uid}): {}", self.line, self.message),
            None => write!(f, "line {}: {}", self.line, self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub records: usize,
    pub errors: Vec<Diagnostic>,
    pub warnings: Vec<Diagnostic>,
}

impl DatasetReport {
    pub fn passed(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Candidate labels of the last `1. ... 2. ...` block in a prompt.
pub fn last_numbered_block(text: &str) -> Vec<String> {
    let mut last = Vec::new();
    let mut run: Vec<String> = Vec::new();
    for line in text.lines() {
        let numbered = line.split_once(". ").and_then(|(n, rest)| {
            (!n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
                .then(|| (n.parse::<usize>().ok(), rest))
        });
        match numbered {
            Some((Some(n), rest)) if n == run.len() + 1 => run.push(rest.to_string()),
            Some((Some(1), rest)) => {
                last = std::mem::take(&mut run);
                run.push(rest.to_string());
            }
            _ => {
                if !run.is_empty() {
                    last = std::mem::take(&mut run);
                }
            }
        }
    }
    if run.is_empty() {
        last
    } else {
        run
    }
}

fn check_record(rec: &DistillRecord) -> std::result::Result<(), String> {
    let labels = last_numbered_block(&rec.instruction);
    let meta = &rec.meta;
    if labels.is_empty() {
        return Err("instruction has no numbered candidate list".into());
    }
    if labels.len() != meta.candidate_ids.len() {
        return Err(format!(
            "instruction lists {} candidates but meta.candidate_ids has {}",
            labels.len(),
            meta.candidate_ids.len()
        ));
    }
    let lines: Vec<&str> = rec.output.split('\n').collect();
    if lines.len() != labels.len() {
        return Err(format!("output has {} lines for {} candidates", lines.len(), labels.len()));
    }
    if meta.ranked_ids.len() != meta.candidate_ids.len() {
        return Err(format!(
            "meta.ranked_ids has {} ids for {} candidates",
            meta.ranked_ids.len(),
            meta.candidate_ids.len()
        ));
    }
    let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    if index.len() != labels.len() {
        return Err("instruction candidate labels are not distinct".into());
    }
    let mut seen = vec![false; labels.len()];
    for (pos, line) in lines.iter().enumerate() {
        let Some(&i) = index.get(line) else {
            return Err(format!("output line {} {line:?} is not a listed candidate", pos + 1));
        };
        if std::mem::replace(&mut seen[i], true) {
            return Err(format!("output line {} repeats {line:?}", pos + 1));
        }
        if meta.ranked_ids[pos] != meta.candidate_ids[i] {
            return Err(format!(
                "meta.ranked_ids[{pos}] is {} but output line names {}",
                meta.ranked_ids[pos], meta.candidate_ids[i]
            ));
        }
    }
    Ok(())
}

/// Checks schema, the permutation invariant and uid uniqueness of every
/// record. Never fails; problems are reported per record.
pub fn validate_dataset_str(text: &str) -> DatasetReport {
    let mut report = DatasetReport::default();
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        report.records += 1;
        let rec: DistillRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                report.errors.push(Diagnostic {
                    line: line_no,
                    uid: None,
                    message: format!("schema: {e}"),
                });
                continue;
            }
        };
        let uid = rec.meta.mention_uid.clone();
        if let Err(message) = check_record(&rec) {
            report.errors.push(Diagnostic {
                line: line_no,
                uid: Some(uid.clone()),
                message,
            });
        }
        if let Some(first) = first_seen.get(&uid) {
            report.warnings.push(Diagnostic {
                line: line_no,
                uid: Some(uid),
                message: format!("duplicate mention_uid (first on line {first})"),
            });
        } else {
            first_seen.insert(uid, line_no);
        }
    }
    report
}

pub fn validate_dataset(path: impl AsRef<Path>) -> Result<DatasetReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(validate_dataset_str(&text))
}
