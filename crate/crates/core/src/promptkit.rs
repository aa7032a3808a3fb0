//! Re-ranking prompts for the teacher and instructions for the student.
//!
//! A template is data (TOML), not code:
//!
//! ```toml
//! kind = "teacher"                  # or "student"
//! instruction_text = "..."          # task statement, no placeholders
//! output_format_text = "..."        # teacher only
//! example_heading = "Example {n}:"  # optional
//! query_text = """
//! Mention: {mention}
//! Context: {context}
//! Candidates:
//! {candidates}
//! Answer:"""
//!
//! [[examples]]                      # teacher only
//! mention = "..."
//! context = "..."                   # optional
//! candidates = ["...", "..."]
//! ranked = ["...", "..."]
//! ```
//!
//! A teacher prompt is laid out as task statement, output format, worked
//! examples, then the query block. A student instruction is the task statement
//! followed by the query block. `{mention}` and `{candidates}` appear exactly
//! once in `query_text`; a line holding `{context}` is dropped when the mention
//! has no context. Candidates are rendered as `1. name` .. `k. name`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{KnowledgeBase, Mention};
use crate::embedstore::sha256_hex;
use crate::retriever::CandidateSet;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("template is a {actual:?} template, expected {expected:?}")]
    WrongKind {
        expected: TemplateKind,
        actual: TemplateKind,
    },
    #[error("placeholder {placeholder} must occur {expected} in query_text, found {found}")]
    Placeholder {
        placeholder: &'static str,
        expected: &'static str,
        found: usize,
    },
    #[error("instruction_text must not contain placeholders")]
    PlaceholderInInstruction,
    #[error("student templates carry no output format or examples")]
    StudentExtras,
    #[error("example {index}: {message}")]
    BadExample { index: usize, message: String },
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("candidate {0:?} is not in the knowledge base")]
    UnknownCandidate(String),
    #[error("template {path}: {message}")]
    Load { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub mention: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub candidates: Vec<String>,
    pub ranked: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub instruction_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_format_text: Option<String>,
    #[serde(default = "default_heading")]
    pub example_heading: String,
    pub query_text: String,
    #[serde(default)]
    pub examples: Vec<FewShotExample>,
}

fn default_heading() -> String {
    "Example {n}:".to_string()
}

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{(mention|context|candidates)\}").unwrap());

impl PromptTemplate {
    pub fn from_toml_str(text: &str) -> Result<Self, PromptError> {
        let t: Self = toml::from_str(text).map_err(|e| PromptError::Load {
            path: PathBuf::from("<inline>"),
            message: e.to_string(),
        })?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PromptError::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            PromptError::Load { message, .. } => PromptError::Load {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let count = |p: &str| self.query_text.matches(p).count();
        for (placeholder, found) in [
            ("{mention}", count("{mention}")),
            ("{candidates}", count("{candidates}")),
        ] {
            if found != 1 {
                return Err(PromptError::Placeholder {
                    placeholder,
                    expected: "exactly once",
                    found,
                });
            }
        }
        let ctx = count("{context}");
        if ctx > 1 {
            return Err(PromptError::Placeholder {
                placeholder: "{context}",
                expected: "at most once",
                found: ctx,
            });
        }
        if PLACEHOLDER.is_match(&self.instruction_text) {
            return Err(PromptError::PlaceholderInInstruction);
        }
        if self.kind == TemplateKind::Student
            && (self.output_format_text.is_some() || !self.examples.is_empty())
        {
            return Err(PromptError::StudentExtras);
        }
        for (i, ex) in self.examples.iter().enumerate() {
            let mut a = ex.candidates.clone();
            let mut b = ex.ranked.clone();
            a.sort();
            b.sort();
            if ex.candidates.is_empty() || a != b {
                return Err(PromptError::BadExample {
                    index: i + 1,
                    message: "ranked must be a permutation of candidates".into(),
                });
            }
        }
        Ok(())
    }

    /// SHA-256 of the template's canonical JSON form, echoed in run reports.
    pub fn content_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("template serializes"))
    }

    pub fn with_examples(mut self, examples: Vec<FewShotExample>) -> Self {
        self.examples = examples;
        self
    }

    fn render_query(&self, mention: &str, context: Option<&str>, labels: &[String]) -> String {
        let numbered = numbered_list(labels);
        let kept: Vec<&str> = self
            .query_text
            .trim_matches('\n')
            .lines()
            .filter(|line| context.is_some() || !line.contains("{context}"))
            .collect();
        PLACEHOLDER
            .replace_all(&kept.join("\n"), |caps: &regex::Captures| match &caps[1] {
                "mention" => mention.to_string(),
                "context" => context.unwrap_or_default().to_string(),
                _ => numbered.clone(),
            })
            .into_owned()
    }
}

/// `1. a\n2. b\n...` without a trailing newline.
pub fn numbered_list(labels: &[impl AsRef<str>]) -> String {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}. {}", i + 1, l.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    /// Candidate strings as they appear in the numbered list, retrieval order.
    pub candidate_labels: Vec<String>,
    /// Entity ids aligned with `candidate_labels`.
    pub candidate_ids: Vec<String>,
}

/// Canonical names for the candidates, in retrieval order. Names shared by
/// several candidates get a ` (id)` suffix so every label is unique.
pub fn candidate_labels(
    candidates: &CandidateSet,
    kb: &KnowledgeBase,
) -> Result<(Vec<String>, Vec<String>), PromptError> {
    if candidates.candidates.is_empty() {
        return Err(PromptError::EmptyCandidates);
    }
    let mut names = Vec::with_capacity(candidates.candidates.len());
    let mut ids = Vec::with_capacity(candidates.candidates.len());
    for id in candidates.ids() {
        let e = kb
            .entity(id)
            .ok_or_else(|| PromptError::UnknownCandidate(id.to_string()))?;
        names.push(e.name.trim().to_string());
        ids.push(id.to_string());
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for n in &names {
        *counts.entry(n.as_str()).or_default() += 1;
    }
    let labels = names
        .iter()
        .zip(&ids)
        .map(|(n, id)| {
            if counts[n.as_str()] > 1 {
                format!("{n} ({id})")
            } else {
                n.clone()
            }
        })
        .collect();
    Ok((labels, ids))
}

fn context_of(mention: &Mention) -> Option<&str> {
    mention.context.as_deref().filter(|c| !c.trim().is_empty())
}

pub fn render_teacher(
    template: &PromptTemplate,
    mention: &Mention,
    candidates: &CandidateSet,
    kb: &KnowledgeBase,
) -> Result<RenderedPrompt, PromptError> {
    expect_kind(template, TemplateKind::Teacher)?;
    let (labels, ids) = candidate_labels(candidates, kb)?;
    let mut sections = vec![template.instruction_text.trim().to_string()];
    if let Some(fmt) = &template.output_format_text {
        sections.push(fmt.trim().to_string());
    }
    for (i, ex) in template.examples.iter().enumerate() {
        let heading = template.example_heading.replace("{n}", &(i + 1).to_string());
        let query = template.render_query(&ex.mention, ex.context.as_deref(), &ex.candidates);
        sections.push(format!("{heading}\n{query}\n{}", numbered_list(&ex.ranked)));
    }
    sections.push(template.render_query(&mention.surface, context_of(mention), &labels));
    Ok(RenderedPrompt {
        text: sections.join("\n\n"),
        candidate_labels: labels,
        candidate_ids: ids,
    })
}

pub fn render_student(
    template: &PromptTemplate,
    mention: &Mention,
    candidates: &CandidateSet,
    kb: &KnowledgeBase,
) -> Result<RenderedPrompt, PromptError> {
    expect_kind(template, TemplateKind::Student)?;
    let (labels, ids) = candidate_labels(candidates, kb)?;
    let text = format!(
        "{}\n\n{}",
        template.instruction_text.trim(),
        template.render_query(&mention.surface, context_of(mention), &labels)
    );
    Ok(RenderedPrompt {
        text,
        candidate_labels: labels,
        candidate_ids: ids,
    })
}

/// Dispatches on the template kind.
pub fn render(
    template: &PromptTemplate,
    mention: &Mention,
    candidates: &CandidateSet,
    kb: &KnowledgeBase,
) -> Result<RenderedPrompt, PromptError> {
    match template.kind {
        TemplateKind::Teacher => render_teacher(template, mention, candidates, kb),
        TemplateKind::Student => render_student(template, mention, candidates, kb),
    }
}

fn expect_kind(template: &PromptTemplate, expected: TemplateKind) -> Result<(), PromptError> {
    if template.kind != expected {
        return Err(PromptError::WrongKind {
            expected,
            actual: template.kind,
        });
    }
    Ok(())
}

/// Builds worked examples from labelled mentions: candidates in retrieval
/// order, gold first in the answer. Mentions whose gold was not retrieved are
/// skipped.
pub fn examples_from_labeled(
    items: &[(Mention, CandidateSet)],
    kb: &KnowledgeBase,
) -> Result<Vec<FewShotExample>, PromptError> {
    let mut out = Vec::new();
    for (m, cs) in items {
        let Some(gold) = m.gold_id.as_deref() else {
            continue;
        };
        let (labels, ids) = candidate_labels(cs, kb)?;
        let Some(gold_pos) = ids.iter().position(|id| id == gold) else {
            continue;
        };
        let mut ranked = vec![labels[gold_pos].clone()];
        ranked.extend(
            labels
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != gold_pos)
                .map(|(_, l)| l.clone()),
        );
        out.push(FewShotExample {
            mention: m.surface.clone(),
            context: m.context.clone(),
            candidates: labels,
            ranked,
        });
    }
    Ok(out)
}
