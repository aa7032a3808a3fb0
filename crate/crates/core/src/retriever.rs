//! Exact inner-product candidate retrieval and negative mining.
//!
//! Search is brute force over the whole knowledge base. Ranking is by score,
//! descending, with ties broken by the smaller knowledge-base position, so the
//! result never depends on scan order or on how the scan was split into blocks.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{KnowledgeBase, Mention};
use crate::embedstore::EmbeddingStore;

pub const DEFAULT_K: usize = 6;
pub const DEFAULT_NEGATIVES: usize = 15;
pub const DEFAULT_HARD_RATIO: f64 = 0.10;

/// Knowledge bases at least this large are scanned in parallel blocks.
const PARALLEL_MIN_ENTITIES: usize = 8192;
const BLOCK_SIZE: usize = 2048;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("zero vector under cosine similarity: {0}")]
    ZeroVector(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("retrieval refused: {} knowledge-base entities have no vector (first: {})", .missing.len(), .missing[0])]
    Refused { missing: Vec<String> },
    #[error("gold id {0:?} is not in the knowledge base")]
    UnknownGold(String),
    #[error("cannot draw {total} negatives: only {available} non-gold entities and at least one must remain unsampled")]
    InsufficientPopulation { total: usize, available: usize },
    #[error("hard ratio must lie in [0, 1], got {0}")]
    InvalidRatio(f64),
    #[error("mention {0} has no gold id")]
    MissingGold(String),
    #[error("{mentions} mentions but {groups} negative groups")]
    LengthMismatch { mentions: usize, groups: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Dot,
    Cosine,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Dot => "dot",
            Metric::Cosine => "cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dot" => Ok(Metric::Dot),
            "cosine" | "cos" => Ok(Metric::Cosine),
            other => Err(format!("unknown metric {other:?} (expected dot or cosine)")),
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f32]) -> f32 {
    dot(a, a).sqrt()
}

pub fn score(mention: &[f32], entity: &[f32], metric: Metric) -> Result<f32, RetrievalError> {
    if mention.len() != entity.len() {
        return Err(RetrievalError::DimMismatch {
            expected: mention.len(),
            actual: entity.len(),
        });
    }
    match metric {
        Metric::Dot => Ok(dot(mention, entity)),
        Metric::Cosine => {
            let (nm, ne) = (norm(mention), norm(entity));
            if nm == 0.0 {
                return Err(RetrievalError::ZeroVector("mention".into()));
            }
            if ne == 0.0 {
                return Err(RetrievalError::ZeroVector("entity".into()));
            }
            Ok(dot(mention, entity) / (nm * ne))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub entity_id: String,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub mention_uid: String,
    pub candidates: Vec<Candidate>,
    pub k: usize,
    pub metric: Metric,
}

impl CandidateSet {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.entity_id.as_str())
    }

    /// 1-based rank of `id` among the candidates.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.ids().position(|c| c == id).map(|p| p + 1)
    }
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    score: f32,
    pos: usize,
}

// Ordering where "greater" means "ranks lower": a max-heap of Hits keeps the
// current worst kept candidate at the top. Scores are finite (store invariant).
impl Ord for Hit {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .partial_cmp(&self.score)
            .unwrap_or(Ordering::Equal)
            .then(self.pos.cmp(&other.pos))
    }
}

impl PartialOrd for Hit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Hit {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Hit {}

/// Entity vectors laid out in knowledge-base order. Construction fails unless
/// every entity has a vector, so an under-covered store can never be searched.
#[derive(Debug)]
pub struct Retriever<'kb> {
    kb: &'kb KnowledgeBase,
    dim: usize,
    matrix: Vec<f32>,
    norms: Vec<f32>,
}

impl<'kb> Retriever<'kb> {
    pub fn new(kb: &'kb KnowledgeBase, store: &EmbeddingStore) -> Result<Self, RetrievalError> {
        let report = store.validate_alignment(kb);
        if !report.is_complete() {
            return Err(RetrievalError::Refused {
                missing: report.missing,
            });
        }
        let dim = store.dim();
        let mut matrix = Vec::with_capacity(kb.len() * dim);
        for e in kb.entities() {
            matrix.extend_from_slice(store.lookup(&e.id).expect("coverage checked"));
        }
        let norms = matrix.chunks_exact(dim).map(norm).collect();
        Ok(Self {
            kb,
            dim,
            matrix,
            norms,
        })
    }

    pub fn kb(&self) -> &'kb KnowledgeBase {
        self.kb
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn row(&self, pos: usize) -> &[f32] {
        &self.matrix[pos * self.dim..(pos + 1) * self.dim]
    }

    fn check_query(&self, query: &[f32], metric: Metric) -> Result<f32, RetrievalError> {
        if query.len() != self.dim {
            return Err(RetrievalError::DimMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        let qn = norm(query);
        if metric == Metric::Cosine {
            if qn == 0.0 {
                return Err(RetrievalError::ZeroVector("mention".into()));
            }
            if let Some(pos) = self.norms.iter().position(|&n| n == 0.0) {
                return Err(RetrievalError::ZeroVector(format!(
                    "entity {}",
                    self.kb.entities()[pos].id
                )));
            }
        }
        Ok(qn)
    }

    fn score_at(&self, query: &[f32], query_norm: f32, pos: usize, metric: Metric) -> f32 {
        let d = dot(query, self.row(pos));
        match metric {
            Metric::Dot => d,
            Metric::Cosine => d / (query_norm * self.norms[pos]),
        }
    }

    fn scan_block(
        &self,
        query: &[f32],
        query_norm: f32,
        range: std::ops::Range<usize>,
        k: usize,
        metric: Metric,
    ) -> Vec<Hit> {
        let mut heap: BinaryHeap<Hit> = BinaryHeap::with_capacity(k + 1);
        for pos in range {
            let hit = Hit {
                score: self.score_at(query, query_norm, pos, metric),
                pos,
            };
            if heap.len() < k {
                heap.push(hit);
            } else if hit < *heap.peek().expect("k >= 1") {
                heap.pop();
                heap.push(hit);
            }
        }
        heap.into_vec()
    }

    pub fn top_k(
        &self,
        mention_uid: &str,
        query: &[f32],
        k: usize,
        metric: Metric,
    ) -> Result<CandidateSet, RetrievalError> {
        let block = (self.kb.len() >= PARALLEL_MIN_ENTITIES).then_some(BLOCK_SIZE);
        self.top_k_blocked(mention_uid, query, k, metric, block)
    }

    /// `block_size = None` scans sequentially; otherwise blocks are scanned in
    /// parallel and merged. Both paths yield identical results.
    pub fn top_k_blocked(
        &self,
        mention_uid: &str,
        query: &[f32],
        k: usize,
        metric: Metric,
        block_size: Option<usize>,
    ) -> Result<CandidateSet, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let qn = self.check_query(query, metric)?;
        let n = self.kb.len();
        let keep = k.min(n);
        let mut hits = match block_size {
            None => self.scan_block(query, qn, 0..n, keep, metric),
            Some(bs) => {
                let bs = bs.max(1);
                let blocks: Vec<_> = (0..n).step_by(bs).map(|s| s..(s + bs).min(n)).collect();
                blocks
                    .into_par_iter()
                    .flat_map_iter(|r| self.scan_block(query, qn, r, keep, metric))
                    .collect()
            }
        };
        hits.sort_unstable();
        hits.truncate(keep);
        Ok(CandidateSet {
            mention_uid: mention_uid.to_string(),
            candidates: hits
                .into_iter()
                .map(|h| Candidate {
                    entity_id: self.kb.entities()[h.pos].id.clone(),
                    score: h.score,
                })
                .collect(),
            k,
            metric,
        })
    }

    /// Draws `total` negatives for a mention: the `ceil(hard_ratio * total)`
    /// highest-scoring non-gold entities, then a seeded uniform sample from
    /// the remaining non-gold entities.
    #[allow(clippy::too_many_arguments)]
    pub fn mine_negatives(
        &self,
        mention_uid: &str,
        query: &[f32],
        gold_id: &str,
        total: usize,
        hard_ratio: f64,
        seed: u64,
        metric: Metric,
    ) -> Result<Vec<NegativeSample>, RetrievalError> {
        let gold_pos = self
            .kb
            .position(gold_id)
            .ok_or_else(|| RetrievalError::UnknownGold(gold_id.to_string()))?;
        if !(0.0..=1.0).contains(&hard_ratio) {
            return Err(RetrievalError::InvalidRatio(hard_ratio));
        }
        let available = self.kb.len() - 1;
        if total >= available {
            return Err(RetrievalError::InsufficientPopulation { total, available });
        }
        let hard_count = hard_negative_count(total, hard_ratio);

        let mut out = Vec::with_capacity(total);
        let mut taken: HashSet<usize> = HashSet::with_capacity(total + 1);
        taken.insert(gold_pos);
        if hard_count > 0 {
            let ranked = self.top_k(mention_uid, query, hard_count + 1, metric)?;
            for c in ranked.candidates {
                if out.len() == hard_count {
                    break;
                }
                let pos = self.kb.position(&c.entity_id).expect("candidate from kb");
                if pos != gold_pos {
                    taken.insert(pos);
                    out.push(NegativeSample {
                        mention_uid: mention_uid.to_string(),
                        entity_id: c.entity_id,
                        kind: NegativeKind::Hard,
                    });
                }
            }
        } else {
            self.check_query(query, metric)?;
        }

        let pool: Vec<usize> = (0..self.kb.len()).filter(|p| !taken.contains(p)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mention_seed(seed, mention_uid));
        for i in index::sample(&mut rng, pool.len(), total - out.len()).into_iter() {
            out.push(NegativeSample {
                mention_uid: mention_uid.to_string(),
                entity_id: self.kb.entities()[pool[i]].id.clone(),
                kind: NegativeKind::Random,
            });
        }
        Ok(out)
    }
}

/// `ceil(ratio * total)`, tolerant of representation error in the ratio
/// (0.3 * 10 is 3, not 4).
pub fn hard_negative_count(total: usize, hard_ratio: f64) -> usize {
    let raw = hard_ratio * total as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(total)
}

fn mention_seed(seed: u64, mention_uid: &str) -> u64 {
    let digest = Sha256::digest(mention_uid.as_bytes());
    seed ^ u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeKind {
    Hard,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeSample {
    pub mention_uid: String,
    pub entity_id: String,
    pub kind: NegativeKind,
}

fn tsv_field(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

/// Writes one `uid, surface, context, entity_id, label` row for the gold
/// entity (`pos`) and one per negative (`hard_neg` / `rand_neg`). No header.
pub fn write_training_pairs<W: Write>(
    out: &mut W,
    mentions: &[Mention],
    negatives: &[Vec<NegativeSample>],
) -> Result<usize, RetrievalError> {
    if mentions.len() != negatives.len() {
        return Err(RetrievalError::LengthMismatch {
            mentions: mentions.len(),
            groups: negatives.len(),
        });
    }
    let io_err = |source| RetrievalError::Io {
        path: PathBuf::from("<training pairs>"),
        source,
    };
    let mut rows = 0;
    for (m, negs) in mentions.iter().zip(negatives) {
        let gold = m
            .gold_id
            .as_deref()
            .ok_or_else(|| RetrievalError::MissingGold(m.uid.clone()))?;
        let prefix = format!(
            "{}\t{}\t{}",
            tsv_field(&m.uid),
            tsv_field(&m.surface),
            tsv_field(m.context.as_deref().unwrap_or(""))
        );
        writeln!(out, "{prefix}\t{gold}\tpos").map_err(io_err)?;
        rows += 1;
        for n in negs {
            let label = match n.kind {
                NegativeKind::Hard => "hard_neg",
                NegativeKind::Random => "rand_neg",
            };
            writeln!(out, "{prefix}\t{}\t{label}", n.entity_id).map_err(io_err)?;
            rows += 1;
        }
    }
    Ok(rows)
}

pub fn export_training_pairs(
    mentions: &[Mention],
    negatives: &[Vec<NegativeSample>],
    path: impl AsRef<Path>,
) -> Result<usize, RetrievalError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    let rows = write_training_pairs(&mut buf, mentions, negatives)?;
    fs::write(path, buf).map_err(|source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(rows)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairStats {
    pub mentions: usize,
    pub pos: usize,
    pub hard_neg: usize,
    pub rand_neg: usize,
}

/// Validation pass over an exported training-pair file: five columns, known
/// labels, exactly one positive per mention, no entity repeated per mention.
pub fn check_training_pairs(text: &str) -> Result<PairStats, String> {
    let mut stats = PairStats::default();
    let mut current: Option<String> = None;
    let mut seen_uids: HashSet<String> = HashSet::new();
    let mut entities: HashSet<String> = HashSet::new();
    let mut positives = 0;
    let finish = |uid: &Option<String>, positives: usize| -> Result<(), String> {
        match uid {
            Some(u) if positives != 1 => Err(format!("{u}: {positives} positive rows")),
            _ => Ok(()),
        }
    };
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(format!("line {}: {} columns", i + 1, cols.len()));
        }
        let (uid, entity, label) = (cols[0], cols[3], cols[4]);
        if current.as_deref() != Some(uid) {
            finish(&current, positives)?;
            if !seen_uids.insert(uid.to_string()) {
                return Err(format!("line {}: mention {uid} is not contiguous", i + 1));
            }
            current = Some(uid.to_string());
            entities.clear();
            positives = 0;
            stats.mentions += 1;
        }
        if !entities.insert(entity.to_string()) {
            return Err(format!("line {}: entity {entity} repeated for {uid}", i + 1));
        }
        match label {
            "pos" => {
                positives += 1;
                stats.pos += 1;
            }
            "hard_neg" => stats.hard_neg += 1,
            "rand_neg" => stats.rand_neg += 1,
            other => return Err(format!("line {}: unknown label {other:?}", i + 1)),
        }
    }
    finish(&current, positives)?;
    Ok(stats)
}
