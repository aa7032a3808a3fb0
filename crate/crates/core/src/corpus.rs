//! Knowledge bases, mention datasets and context windows.
//!
//! Two on-disk layouts are understood:
//!
//! * normalized TSV: `id<TAB>name` for knowledge bases and
//!   `gold_id<TAB>mention[<TAB>context]` for mentions (UTF-8, LF, no header);
//! * the Ask A Patient fold layout `gold_id<TAB>gold_name<TAB>mention`, which
//!   carries no context.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate entity id {id:?} at line {line} (first seen at line {first_line})")]
    DuplicateId {
        id: String,
        line: usize,
        first_line: usize,
    },
    #[error("empty knowledge base")]
    EmptyKnowledgeBase,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub name: String,
}

/// The entity inventory, in file order.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    entities: Vec<Entity>,
    index: HashMap<String, usize>,
}

impl KnowledgeBase {
    pub fn new(entities: Vec<Entity>) -> Result<Self, CorpusError> {
        if entities.is_empty() {
            return Err(CorpusError::EmptyKnowledgeBase);
        }
        let mut index = HashMap::with_capacity(entities.len());
        for (pos, entity) in entities.iter().enumerate() {
            if entity.id.is_empty() {
                return Err(parse_err("<memory>", pos + 1, "empty entity id"));
            }
            if entity.name.trim().is_empty() {
                return Err(parse_err("<memory>", pos + 1, "empty entity name"));
            }
            if let Some(&first) = index.get(&entity.id) {
                return Err(CorpusError::DuplicateId {
                    id: entity.id.clone(),
                    line: pos + 1,
                    first_line: first + 1,
                });
            }
            index.insert(entity.id.clone(), pos);
        }
        Ok(Self { entities, index })
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    /// Always false for a constructed knowledge base; present for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn get(&self, pos: usize) -> Option<&Entity> {
        self.entities.get(pos)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.position(id).map(|pos| &self.entities[pos])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Normalized TSV rendering; `parse_kb(kb.to_tsv())` reproduces `kb`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entities {
            out.push_str(&e.id);
            out.push('\t');
            out.push_str(&e.name);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub uid: String,
    pub surface: String,
    pub context: Option<String>,
    pub gold_id: Option<String>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MentionFormat {
    #[default]
    NormalizedTsv,
    AskAPatient,
}

impl FromStr for MentionFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normalized-tsv" | "tsv" => Ok(MentionFormat::NormalizedTsv),
            "ask-a-patient" | "askapatient" => Ok(MentionFormat::AskAPatient),
            other => Err(format!(
                "unknown mention format {other:?} (expected normalized-tsv or ask-a-patient)"
            )),
        }
    }
}

fn parse_err(path: &str, line: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_kb(path: impl AsRef<Path>) -> Result<KnowledgeBase, CorpusError> {
    let path = path.as_ref();
    parse_kb(&read(path)?, &path.display().to_string())
}

/// Parses normalized KB TSV. `origin` only labels error messages.
pub fn parse_kb(text: &str, origin: &str) -> Result<KnowledgeBase, CorpusError> {
    let mut entities = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            return Err(parse_err(
                origin,
                line_no,
                format!("expected 2 tab-separated columns, found {}", cols.len()),
            ));
        }
        let (id, name) = (cols[0], cols[1]);
        if id.is_empty() {
            return Err(parse_err(origin, line_no, "empty entity id"));
        }
        if name.trim().is_empty() {
            return Err(parse_err(origin, line_no, "empty entity name"));
        }
        if let Some(&first_line) = seen.get(id) {
            return Err(CorpusError::DuplicateId {
                id: id.to_string(),
                line: line_no,
                first_line,
            });
        }
        seen.insert(id, line_no);
        entities.push(Entity {
            id: id.to_string(),
            name: name.to_string(),
        });
    }
    KnowledgeBase::new(entities)
}

pub fn save_kb(kb: &KnowledgeBase, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    fs::write(path, kb.to_tsv()).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_mentions(
    path: impl AsRef<Path>,
    format: MentionFormat,
    split: Split,
) -> Result<Vec<Mention>, CorpusError> {
    let path = path.as_ref();
    parse_mentions(&read(path)?, format, split, &path.display().to_string())
}

pub fn parse_mentions(
    text: &str,
    format: MentionFormat,
    split: Split,
    origin: &str,
) -> Result<Vec<Mention>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        let (gold, surface, context) = match format {
            MentionFormat::NormalizedTsv => match cols.as_slice() {
                [gold, surface] => (*gold, *surface, None),
                [gold, surface, context] => (*gold, *surface, Some(*context)),
                _ => {
                    return Err(parse_err(
                        origin,
                        line_no,
                        format!("expected 2 or 3 tab-separated columns, found {}", cols.len()),
                    ))
                }
            },
            MentionFormat::AskAPatient => match cols.as_slice() {
                [gold, _gold_name, surface] => (*gold, *surface, None),
                _ => {
                    return Err(parse_err(
                        origin,
                        line_no,
                        format!("expected 3 tab-separated columns, found {}", cols.len()),
                    ))
                }
            },
        };
        if surface.trim().is_empty() {
            return Err(parse_err(origin, line_no, "empty mention"));
        }
        out.push(Mention {
            uid: format!("{split}:{line_no}"),
            surface: surface.to_string(),
            context: context.filter(|c| !c.is_empty()).map(str::to_string),
            gold_id: (!gold.is_empty()).then(|| gold.to_string()),
            split,
        });
    }
    Ok(out)
}

/// Path of one Ask A Patient fold file: `{dir}/{fold}.{train|validation|test}.txt`.
pub fn ask_a_patient_fold_path(dir: impl AsRef<Path>, fold: &str, split: Split) -> PathBuf {
    let suffix = match split {
        Split::Train => "train",
        Split::Val => "validation",
        Split::Test => "test",
    };
    dir.as_ref().join(format!("{fold}.{suffix}.txt"))
}

/// Builds a knowledge base from the `gold_id`/`gold_name` columns of Ask A
/// Patient fold files. First occurrence of an id wins; later differing names
/// are ignored.
pub fn derive_kb_from_ask_a_patient(paths: &[PathBuf]) -> Result<KnowledgeBase, CorpusError> {
    let mut entities = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for path in paths {
        let text = read(path)?;
        for (i, line) in text.lines().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, name, _] = cols.as_slice() else {
                return Err(parse_err(
                    &path.display().to_string(),
                    i + 1,
                    format!("expected 3 tab-separated columns, found {}", cols.len()),
                ));
            };
            if seen.insert(id.to_string()) {
                entities.push(Entity {
                    id: id.to_string(),
                    name: name.to_string(),
                });
            }
        }
    }
    KnowledgeBase::new(entities)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnresolvedGold {
    pub line: usize,
    pub uid: String,
    pub gold_id: String,
}

/// Outcome of checking a mention file against its knowledge base.
///
/// `accepted + unresolved_gold.len() == lines`. Mentions with unresolved gold
/// ids stay in the mention list (they can still be linked) but are reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub source: String,
    pub split: Split,
    pub lines: usize,
    pub accepted: usize,
    pub without_gold: usize,
    pub unresolved_gold: Vec<UnresolvedGold>,
    /// Unit of the context window budget. Always "chars".
    pub context_unit: String,
    pub context_max_chars: usize,
}

impl IngestReport {
    pub fn build(
        source: &str,
        split: Split,
        mentions: &[Mention],
        kb: &KnowledgeBase,
        context_max_chars: usize,
    ) -> Self {
        let mut unresolved = Vec::new();
        let mut without_gold = 0;
        for (i, m) in mentions.iter().enumerate() {
            match &m.gold_id {
                None => without_gold += 1,
                Some(g) if !kb.contains(g) => unresolved.push(UnresolvedGold {
                    line: i + 1,
                    uid: m.uid.clone(),
                    gold_id: g.clone(),
                }),
                Some(_) => {}
            }
        }
        Self {
            source: source.to_string(),
            split,
            lines: mentions.len(),
            accepted: mentions.len() - unresolved.len(),
            without_gold,
            unresolved_gold: unresolved,
            context_unit: "chars".to_string(),
            context_max_chars,
        }
    }

    /// Human-readable lines for standard error.
    pub fn log_lines(&self) -> Vec<String> {
        let mut lines = vec![format!(
            "ingest {} [{}]: {} lines, {} accepted, {} without gold, {} unresolved gold ids; context window {} {}",
            self.source,
            self.split,
            self.lines,
            self.accepted,
            self.without_gold,
            self.unresolved_gold.len(),
            self.context_max_chars,
            self.context_unit,
        )];
        for u in &self.unresolved_gold {
            lines.push(format!(
                "  line {}: {} gold id {:?} not in knowledge base",
                u.line, u.uid, u.gold_id
            ));
        }
        lines
    }
}

/// Cuts `context` down to at most `max_chars` characters, centred on the
/// first occurrence of `mention`. When the budget splits unevenly the extra
/// character goes to the right; budget a side cannot use moves to the other.
/// If the mention does not occur, the first `max_chars` characters are kept.
pub fn window_context(context: &str, mention: &str, max_chars: usize) -> String {
    let total = context.chars().count();
    if total <= max_chars {
        return context.to_string();
    }
    let Some(byte_start) = (!mention.is_empty())
        .then(|| context.find(mention))
        .flatten()
    else {
        return context.chars().take(max_chars).collect();
    };
    let start = context[..byte_start].chars().count();
    let m = mention.chars().count();
    if m >= max_chars {
        return context.chars().skip(start).take(max_chars).collect();
    }

    let spare = max_chars - m;
    let left_avail = start;
    let right_avail = total - start - m;
    let mut left = (spare / 2).min(left_avail);
    let mut right = (spare - spare / 2).min(right_avail);
    let unused = spare - left - right;
    if unused > 0 {
        let extra_left = unused.min(left_avail - left);
        left += extra_left;
        right += (unused - extra_left).min(right_avail - right);
    }
    context.chars().skip(start - left).take(left + m + right).collect()
}
