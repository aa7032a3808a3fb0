//! Id-aligned dense vectors for entities and mentions.
//!
//! On disk a store is a binary blob plus a JSON manifest:
//!
//! ```text
//! blob:     "EMB1" | u32 count | u32 dim | count*dim f32   (all little-endian)
//! manifest: { "blob": "<file name>", "count": n, "dim": d, "ids": [...], "checksum": "<sha256 hex of blob>" }
//! ```
//!
//! The blob path in the manifest is resolved relative to the manifest's directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::KnowledgeBase;

pub const MAGIC: &[u8; 4] = b"EMB1";
const HEADER_LEN: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("bad magic in {path}: expected \"EMB1\"")]
    Magic { path: PathBuf },
    #[error("size mismatch in {path}: header declares {expected} payload bytes, found {actual}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("checksum mismatch in {path}: manifest {expected}, blob {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("row {row} ({id}) contains a non-finite value")]
    NonFinite { row: usize, id: String },
    #[error("invalid store: {0}")]
    Validation(String),
    #[error("no vector for id {0:?}")]
    NotFound(String),
    #[error("line {line}: {message}")]
    Import { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub blob: String,
    pub count: usize,
    pub dim: usize,
    pub ids: Vec<String>,
    pub checksum: String,
}

#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    /// `vectors` is row-major, `ids.len() * dim` long.
    pub fn new(dim: usize, ids: Vec<String>, vectors: Vec<f32>) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::Validation("dim must be at least 1".into()));
        }
        if vectors.len() != ids.len() * dim {
            return Err(StoreError::Validation(format!(
                "{} ids with dim {dim} need {} values, got {}",
                ids.len(),
                ids.len() * dim,
                vectors.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(StoreError::Validation(format!("duplicate id {id:?}")));
            }
        }
        for (row, chunk) in vectors.chunks_exact(dim).enumerate() {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(StoreError::NonFinite {
                    row,
                    id: ids[row].clone(),
                });
            }
        }
        Ok(Self {
            dim,
            ids,
            vectors,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn lookup(&self, id: &str) -> Result<&[f32], StoreError> {
        self.row_of(id)
            .map(|r| self.row(r))
            .ok_or_else(|| StoreError::NotFound(id.to_string()))
    }

    pub fn encode_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.vectors.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Writes `<manifest stem>.emb` next to the manifest, then the manifest.
    pub fn save(&self, manifest_path: impl AsRef<Path>) -> Result<Manifest, StoreError> {
        let manifest_path = manifest_path.as_ref();
        let stem = manifest_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("store");
        let blob_name = format!("{stem}.emb");
        let blob_path = sibling(manifest_path, &blob_name);
        let blob = self.encode_blob();
        let manifest = Manifest {
            blob: blob_name,
            count: self.ids.len(),
            dim: self.dim,
            ids: self.ids.clone(),
            checksum: sha256_hex(&blob),
        };
        write(&blob_path, &blob)?;
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write(manifest_path, json.as_bytes())?;
        Ok(manifest)
    }

    /// Parses the text import format: one `id<TAB>f1 f2 ...` row per line.
    pub fn from_text(text: &str) -> Result<Self, StoreError> {
        let mut ids = Vec::new();
        let mut vectors = Vec::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (id, values) = line.split_once('\t').ok_or_else(|| StoreError::Import {
                line: line_no,
                message: "expected id<TAB>values".into(),
            })?;
            let row: Vec<f32> = values
                .split_whitespace()
                .map(|v| {
                    v.parse::<f32>().map_err(|e| StoreError::Import {
                        line: line_no,
                        message: format!("bad value {v:?}: {e}"),
                    })
                })
                .collect::<Result<_, _>>()?;
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(StoreError::Import {
                        line: line_no,
                        message: format!("expected {d} values, found {}", row.len()),
                    })
                }
                Some(_) => {}
            }
            ids.push(id.to_string());
            vectors.extend(row);
        }
        let dim = dim.ok_or_else(|| StoreError::Validation("no rows in text import".into()))?;
        Self::new(dim, ids, vectors)
    }

    pub fn validate_alignment(&self, kb: &KnowledgeBase) -> AlignmentReport {
        let missing = kb
            .entities()
            .iter()
            .filter(|e| !self.contains(&e.id))
            .map(|e| e.id.clone())
            .collect();
        let orphans = self
            .ids
            .iter()
            .filter(|id| !kb.contains(id))
            .cloned()
            .collect();
        AlignmentReport { missing, orphans }
    }
}

/// Coverage of a knowledge base by an entity store.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// KB entities without a vector. Retrieval is refused while non-empty.
    pub missing: Vec<String>,
    /// Store rows whose id is not in the KB. Harmless.
    pub orphans: Vec<String>,
}

impl AlignmentReport {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

pub fn load_store(manifest_path: impl AsRef<Path>) -> Result<EmbeddingStore, StoreError> {
    let manifest_path = manifest_path.as_ref();
    let raw = fs::read(manifest_path).map_err(|source| StoreError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| StoreError::Manifest {
            path: manifest_path.to_path_buf(),
            message: e.to_string(),
        })?;
    if manifest.dim == 0 {
        return Err(StoreError::Validation("manifest dim is 0".into()));
    }
    if manifest.ids.len() != manifest.count {
        return Err(StoreError::Validation(format!(
            "manifest lists {} ids but count is {}",
            manifest.ids.len(),
            manifest.count
        )));
    }

    let blob_path = sibling(manifest_path, &manifest.blob);
    let blob = fs::read(&blob_path).map_err(|source| StoreError::Io {
        path: blob_path.clone(),
        source,
    })?;
    let (count, dim, payload) = decode_header(&blob, &blob_path)?;
    if count != manifest.count || dim != manifest.dim {
        return Err(StoreError::Validation(format!(
            "blob header {count}x{dim} disagrees with manifest {}x{}",
            manifest.count, manifest.dim
        )));
    }
    let actual = sha256_hex(&blob);
    if !actual.eq_ignore_ascii_case(&manifest.checksum) {
        return Err(StoreError::Checksum {
            path: blob_path,
            expected: manifest.checksum,
            actual,
        });
    }
    let vectors = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    EmbeddingStore::new(dim, manifest.ids, vectors)
}

fn decode_header<'a>(blob: &'a [u8], path: &Path) -> Result<(usize, usize, &'a [u8]), StoreError> {
    if blob.len() < HEADER_LEN {
        if blob.len() < 4 || &blob[..4] != MAGIC {
            return Err(StoreError::Magic {
                path: path.to_path_buf(),
            });
        }
        return Err(StoreError::SizeMismatch {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            actual: blob.len(),
        });
    }
    if &blob[..4] != MAGIC {
        return Err(StoreError::Magic {
            path: path.to_path_buf(),
        });
    }
    let count = u32::from_le_bytes(blob[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(blob[8..12].try_into().unwrap()) as usize;
    let payload = &blob[HEADER_LEN..];
    let expected = count * dim * 4;
    if payload.len() != expected {
        return Err(StoreError::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: payload.len(),
        });
    }
    Ok((count, dim, payload))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn sibling(manifest_path: &Path, name: &str) -> PathBuf {
    match manifest_path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(name),
        _ => PathBuf::from(name),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    fs::write(path, bytes).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Entity, KnowledgeBase};
    use proptest::prelude::*;

    fn small() -> EmbeddingStore {
        EmbeddingStore::new(
            2,
            vec!["a".into(), "b".into(), "c".into()],
            vec![1.0, 0.0, 0.5, -2.0, 3.25, 1e-7],
        )
        .unwrap()
    }

    #[test]
    fn save_then_load_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("ents.json");
        let s = small();
        s.save(&m).unwrap();
        let back = load_store(&m).unwrap();
        assert_eq!(back.ids(), s.ids());
        for r in 0..s.len() {
            let a: Vec<u32> = s.row(r).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.row(r).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(fs::metadata(dir.path().join("ents.emb")).unwrap().len(), 12 + 3 * 2 * 4);
    }

    #[test]
    fn truncated_blob_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("s.json");
        small().save(&m).unwrap();
        let blob_path = dir.path().join("s.emb");
        let mut blob = fs::read(&blob_path).unwrap();
        blob.truncate(blob.len() - 4);
        fs::write(&blob_path, blob).unwrap();
        assert!(matches!(
            load_store(&m).unwrap_err(),
            StoreError::SizeMismatch { expected: 24, actual: 20, .. }
        ));
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("s.json");
        small().save(&m).unwrap();
        let blob_path = dir.path().join("s.emb");
        let mut blob = fs::read(&blob_path).unwrap();
        blob[0] = b'X';
        fs::write(&blob_path, blob).unwrap();
        assert!(matches!(load_store(&m).unwrap_err(), StoreError::Magic { .. }));
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("s.json");
        small().save(&m).unwrap();
        let blob_path = dir.path().join("s.emb");
        let mut blob = fs::read(&blob_path).unwrap();
        let last = blob.len() - 1;
        blob[last] ^= 0x01;
        fs::write(&blob_path, blob).unwrap();
        assert!(matches!(load_store(&m).unwrap_err(), StoreError::Checksum { .. }));
    }

    #[test]
    fn zero_dim_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("s.json");
        small().save(&m).unwrap();
        let mut man: Manifest = serde_json::from_slice(&fs::read(&m).unwrap()).unwrap();
        man.dim = 0;
        fs::write(&m, serde_json::to_vec(&man).unwrap()).unwrap();
        assert!(matches!(load_store(&m).unwrap_err(), StoreError::Validation(_)));
    }

    #[test]
    fn nan_row_named() {
        let err = EmbeddingStore::new(2, vec!["a".into(), "b".into()], vec![0.0, 1.0, f32::NAN, 0.0])
            .unwrap_err();
        assert!(matches!(err, StoreError::NonFinite { row: 1, ref id } if id == "b"));
    }

    #[test]
    fn nan_in_blob_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("s.json");
        small().save(&m).unwrap();
        let blob_path = dir.path().join("s.emb");
        let mut blob = fs::read(&blob_path).unwrap();
        blob[12 + 8..12 + 12].copy_from_slice(&f32::INFINITY.to_le_bytes());
        let checksum = sha256_hex(&blob);
        fs::write(&blob_path, &blob).unwrap();
        let mut man: Manifest = serde_json::from_slice(&fs::read(&m).unwrap()).unwrap();
        man.checksum = checksum;
        fs::write(&m, serde_json::to_vec(&man).unwrap()).unwrap();
        assert!(matches!(load_store(&m).unwrap_err(), StoreError::NonFinite { row: 1, .. }));
    }

    #[test]
    fn lookup_rows() {
        let s = small();
        assert_eq!(s.lookup("a").unwrap(), s.row(0));
        assert!(matches!(s.lookup("Zzz"), Err(StoreError::NotFound(id)) if id == "Zzz"));
    }

    #[test]
    fn text_import() {
        let s = EmbeddingStore::from_text("E1\t1 0 0\nE2\t0 1.5 -2\n").unwrap();
        assert_eq!(s.dim(), 3);
        assert_eq!(s.lookup("E2").unwrap(), &[0.0, 1.5, -2.0]);
        assert!(matches!(
            EmbeddingStore::from_text("E1\t1 0\nE2\t1\n").unwrap_err(),
            StoreError::Import { line: 2, .. }
        ));
    }

    #[test]
    fn alignment_report() {
        let kb = KnowledgeBase::new(vec![
            Entity { id: "a".into(), name: "A".into() },
            Entity { id: "b".into(), name: "B".into() },
        ])
        .unwrap();
        let full = EmbeddingStore::new(1, vec!["a".into(), "b".into()], vec![1.0, 2.0]).unwrap();
        assert!(full.validate_alignment(&kb).is_complete());
        let partial = EmbeddingStore::new(1, vec!["a".into(), "zz".into()], vec![1.0, 2.0]).unwrap();
        let r = partial.validate_alignment(&kb);
        assert_eq!(r.missing, vec!["b".to_string()]);
        assert_eq!(r.orphans, vec!["zz".to_string()]);
    }

    fn arb_store() -> impl Strategy<Value = EmbeddingStore> {
        (1usize..=64, 0usize..=1000).prop_flat_map(|(dim, count)| {
            proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), dim * count)
                .prop_map(move |vectors| {
                    let ids = (0..count).map(|i| format!("id{i}")).collect();
                    EmbeddingStore::new(dim, ids, vectors).unwrap()
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn save_load_bitwise(store in arb_store()) {
            let dir = tempfile::tempdir().unwrap();
            let m = dir.path().join("p.json");
            store.save(&m).unwrap();
            let back = load_store(&m).unwrap();
            prop_assert_eq!(back.ids(), store.ids());
            prop_assert_eq!(back.dim(), store.dim());
            prop_assert_eq!(back.encode_blob(), store.encode_blob());
        }
    }
}
