//! Turning free-form model output into a permutation of the candidates.
//!
//! Each non-blank output line has any list marker (`1.`, `1)`, `(1)`, `-`,
//! `*`, ...) removed and is matched against the candidate labels with a
//! cascade of increasingly loose comparisons:
//!
//! 1. exact;
//! 2. case- and whitespace-insensitive;
//! 3. additionally ignoring punctuation;
//! 4. the same three against labels with their ` (id)` disambiguation suffix
//!    removed.
//!
//! There is no edit-distance matching. After matching, repeated candidates
//! keep their first position, unmatched lines are dropped and candidates the
//! output never named are appended in retrieval order. Every such repair is
//! recorded; a list is `clean` only when the output was already an exact
//! permutation.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no candidate could be matched in the model output")]
    Unparseable,
    #[error("candidate labels ({labels}) and ids ({ids}) must be non-empty and of equal length")]
    InvalidCandidates { labels: usize, ids: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Repair {
    AppendedMissing,
    DroppedUnknown,
    Deduplicated,
    FuzzyMatched,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    pub mention_uid: String,
    /// Entity ids, most probable first. Always a permutation of the candidates.
    pub order: Vec<String>,
    /// Repairs in the order they were applied.
    pub repairs: Vec<Repair>,
    pub clean: bool,
}

impl RankedList {
    /// The list as retrieved, unranked: used when a re-ranker produced nothing
    /// usable but a total order is still required.
    pub fn fallback(mention_uid: &str, candidate_ids: &[String]) -> Self {
        Self {
            mention_uid: mention_uid.to_string(),
            order: candidate_ids.to_vec(),
            repairs: vec![Repair::AppendedMissing; candidate_ids.len()],
            clean: false,
        }
    }

    pub fn top1(&self) -> &str {
        top1(self)
    }

    pub fn count(&self, repair: Repair) -> usize {
        self.repairs.iter().filter(|r| **r == repair).count()
    }
}

pub fn top1(ranked: &RankedList) -> &str {
    &ranked.order[0]
}

static MARKER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(?:\d+\s*[.)、:：．]|\(\d+\)|（\d+）|\[\d+\]|[-*•·+])\s*").unwrap()
});

fn collapse(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn normalize(s: &str) -> String {
    collapse(&s.to_lowercase())
}

fn strip_punct(s: &str) -> String {
    let spaced: String = s
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    normalize(&spaced)
}

struct Matcher {
    exact: Vec<String>,
    norm: Vec<String>,
    punct: Vec<String>,
    base_exact: Vec<String>,
    base_norm: Vec<String>,
    base_punct: Vec<String>,
}

impl Matcher {
    fn new(labels: &[String], ids: &[String]) -> Self {
        let base: Vec<String> = labels
            .iter()
            .zip(ids)
            .map(|(l, id)| {
                l.strip_suffix(&format!(" ({id})"))
                    .unwrap_or(l)
                    .to_string()
            })
            .collect();
        Self {
            exact: labels.iter().map(|l| l.trim().to_string()).collect(),
            norm: labels.iter().map(|l| normalize(l)).collect(),
            punct: labels.iter().map(|l| strip_punct(l)).collect(),
            base_norm: base.iter().map(|l| normalize(l)).collect(),
            base_punct: base.iter().map(|l| strip_punct(l)).collect(),
            base_exact: base,
        }
    }

    /// Index of the matched candidate and whether the match was loose.
    fn find(&self, line: &str, used: &[bool]) -> Option<(usize, bool)> {
        let norm = normalize(line);
        let punct = strip_punct(line);
        let levels: [(&[String], &str); 6] = [
            (&self.exact, line),
            (&self.norm, &norm),
            (&self.punct, &punct),
            (&self.base_exact, line),
            (&self.base_norm, &norm),
            (&self.base_punct, &punct),
        ];
        for (level, (keys, probe)) in levels.iter().enumerate() {
            if probe.is_empty() {
                continue;
            }
            let hits: Vec<usize> = keys
                .iter()
                .enumerate()
                .filter(|(_, k)| k.as_str() == *probe)
                .map(|(i, _)| i)
                .collect();
            if let Some(&first) = hits.first() {
                let pick = hits.iter().copied().find(|&i| !used[i]).unwrap_or(first);
                return Some((pick, level > 0));
            }
        }
        None
    }
}

pub fn parse_ranked(
    mention_uid: &str,
    raw_text: &str,
    candidate_labels: &[String],
    candidate_ids: &[String],
) -> Result<RankedList, ParseError> {
    if candidate_labels.is_empty() || candidate_labels.len() != candidate_ids.len() {
        return Err(ParseError::InvalidCandidates {
            labels: candidate_labels.len(),
            ids: candidate_ids.len(),
        });
    }
    let matcher = Matcher::new(candidate_labels, candidate_ids);
    let mut used = vec![false; candidate_labels.len()];
    let mut picked = Vec::with_capacity(candidate_labels.len());
    let mut repairs = Vec::new();

    for line in raw_text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let body = MARKER.replace(line, "");
        let found = matcher
            .find(body.trim(), &used)
            .or_else(|| (body != line).then(|| matcher.find(line, &used)).flatten());
        match found {
            None => repairs.push(Repair::DroppedUnknown),
            Some((i, _)) if used[i] => repairs.push(Repair::Deduplicated),
            Some((i, loose)) => {
                used[i] = true;
                picked.push(i);
                if loose {
                    repairs.push(Repair::FuzzyMatched);
                }
            }
        }
    }
    if picked.is_empty() {
        return Err(ParseError::Unparseable);
    }
    for (i, was_used) in used.iter().enumerate() {
        if !was_used {
            picked.push(i);
            repairs.push(Repair::AppendedMissing);
        }
    }
    Ok(RankedList {
        mention_uid: mention_uid.to_string(),
        order: picked.into_iter().map(|i| candidate_ids[i].clone()).collect(),
        clean: repairs.is_empty(),
        repairs,
    })
}
