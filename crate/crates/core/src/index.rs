use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use crate::embedding::{Embedding, EMBEDDING_DIM};
use crate::error::{ensure, Error, Result};
use crate::io::ByteReader;

const MAGIC: &[u8; 4] = b"EMBS";
const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoreKind {
    User,
    Audio,
}

impl StoreKind {
    fn code(self) -> u8 {
        match self {
            StoreKind::User => 0,
            StoreKind::Audio => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(StoreKind::User),
            1 => Ok(StoreKind::Audio),
            other => Err(Error::Format(format!("unknown store kind {other}"))),
        }
    }
}

/// Immutable id → embedding table with exact cosine retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    kind: StoreKind,
    ids: Vec<String>,
    /// `len × EMBEDDING_DIM`, row-major, in insertion order.
    vectors: Vec<f32>,
    norms: Vec<f64>,
    rows: HashMap<String, usize>,
}

/// One retrieval result.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub id: String,
    pub score: f64,
}

impl EmbeddingStore {
    pub fn build(kind: StoreKind, entries: impl IntoIterator<Item = (String, Vec<f32>)>) -> Result<Self> {
        let mut store = EmbeddingStore {
            kind,
            ids: Vec::new(),
            vectors: Vec::new(),
            norms: Vec::new(),
            rows: HashMap::new(),
        };
        for (id, v) in entries {
            let e = Embedding::new(v).map_err(|e| match e {
                Error::Dimension(m) | Error::Degenerate(m) | Error::Contract(m) => {
                    Error::Contract(format!("entry `{id}`: {m}"))
                }
                other => other,
            })?;
            if store.rows.insert(id.clone(), store.ids.len()).is_some() {
                return Err(Error::Contract(format!("duplicate id `{id}`")));
            }
            store.norms.push(e.norm());
            store.vectors.extend_from_slice(e.as_slice());
            store.ids.push(id);
        }
        Ok(store)
    }

    pub fn kind(&self) -> StoreKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        EMBEDDING_DIM
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

    pub fn contains(&self, id: &str) -> bool {
        self.rows.contains_key(id)
    }

    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        self.rows.get(id).map(|&r| self.row(r))
    }

    pub fn get(&self, id: &str) -> Result<Embedding> {
        let v = self
            .vector(id)
            .ok_or_else(|| Error::Vocabulary(format!("`{id}` is not in the store")))?;
        Embedding::new(v.to_vec())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().enumerate().map(|(r, id)| (id.as_str(), self.row(r)))
    }

    fn row(&self, r: usize) -> &[f32] {
        &self.vectors[r * EMBEDDING_DIM..(r + 1) * EMBEDDING_DIM]
    }

    /// Cosine of every entry against `query`, in storage order.
    pub fn scores(&self, query: &[f32]) -> Result<Vec<f64>> {
        ensure!(
            query.len() == EMBEDDING_DIM,
            Dimension,
            "query has {} values, store holds {EMBEDDING_DIM}-dim vectors",
            query.len()
        );
        let qn = crate::embedding::norm(query);
        if qn == 0.0 || !qn.is_finite() {
            return Err(Error::Degenerate("query has zero norm".into()));
        }
        Ok((0..self.len())
            .map(|r| {
                let dot: f64 = self
                    .row(r)
                    .iter()
                    .zip(query)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                (dot / (qn * self.norms[r])).clamp(-1.0, 1.0)
            })
            .collect())
    }

    /// The `min(n, len)` best entries by cosine, ties broken by ascending id.
    pub fn top_n(&self, query: &[f32], n: usize) -> Result<Vec<Scored>> {
        ensure!(n >= 1, Contract, "top_n needs n >= 1");
        let scores = self.scores(query)?;
        let cmp = |&a: &usize, &b: &usize| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.ids[a].cmp(&self.ids[b]))
        };
        let mut order: Vec<usize> = (0..self.len()).collect();
        let k = n.min(order.len());
        if k < order.len() {
            order.select_nth_unstable_by(k, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(order
            .into_iter()
            .map(|r| Scored {
                id: self.ids[r].clone(),
                score: scores[r],
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(19 + self.len() * (2 + 16 + 4 * EMBEDDING_DIM));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&(EMBEDDING_DIM as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (id, v) in self.iter() {
            let len = u16::try_from(id.len())
                .map_err(|_| Error::Contract(format!("id `{id}` longer than 65535 bytes")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a whole store file; nothing is returned unless every record is valid.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        ensure!(r.take(4)? == MAGIC, Format, "not an embedding store (bad magic)");
        let version = r.u16()?;
        ensure!(version == VERSION, Format, "unsupported store version {version}");
        let kind = StoreKind::from_code(r.u8()?)?;
        let dim = r.u32()? as usize;
        ensure!(dim == EMBEDDING_DIM, Format, "store dimension {dim}, expected {EMBEDDING_DIM}");
        let count = r.u64()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("id is not UTF-8".into()))?
                .to_string();
            entries.push((id, r.f32s(dim)?));
        }
        ensure!(r.is_empty(), Format, "trailing bytes after {count} entries");
        Self::build(kind, entries).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Users best matched to a new track's audio embedding.
pub fn recommend_new_track(ae: &[f32], users: &EmbeddingStore, n: usize) -> Result<Vec<Scored>> {
    users.top_n(ae, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(i: usize) -> Vec<f32> {
        let mut v = vec![0.0; EMBEDDING_DIM];
        v[i] = 1.0;
        v
    }

    #[test]
    fn empty_and_small_stores() {
        let empty = EmbeddingStore::build(StoreKind::User, Vec::new()).unwrap();
        assert!(empty.is_empty());
        let s = EmbeddingStore::build(
            StoreKind::Audio,
            [("a", unit(0)), ("b", unit(1)), ("c", unit(2))].map(|(k, v)| (k.to_string(), v)),
        )
        .unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.vector("b").unwrap(), unit(1).as_slice());
        let top = s.top_n(&unit(0), 2).unwrap();
        assert_eq!(top[0], Scored { id: "a".into(), score: 1.0 });
        assert_eq!(top[1], Scored { id: "b".into(), score: 0.0 });
    }

    #[test]
    fn build_rejects_duplicates_and_bad_vectors() {
        let dup = [("x".to_string(), unit(0)), ("x".to_string(), unit(1))];
        assert!(EmbeddingStore::build(StoreKind::User, dup).is_err());
        let short = [("x".to_string(), vec![1.0; 3])];
        assert!(EmbeddingStore::build(StoreKind::User, short).is_err());
        let zero = [("x".to_string(), vec![0.0; EMBEDDING_DIM])];
        assert!(EmbeddingStore::build(StoreKind::User, zero).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let s = EmbeddingStore::build(
            StoreKind::User,
            ["d", "b", "c", "a"].map(|k| (k.to_string(), unit(0))),
        )
        .unwrap();
        let ids: Vec<String> = s.top_n(&unit(0), 3).unwrap().into_iter().map(|x| x.id).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn zero_query_is_degenerate() {
        let s = EmbeddingStore::build(StoreKind::User, [("a".to_string(), unit(0))]).unwrap();
        assert!(matches!(s.top_n(&[0.0; EMBEDDING_DIM], 1), Err(Error::Degenerate(_))));
        assert_eq!(recommend_new_track(&unit(5), &s, 10).unwrap()[0].id, "a");
    }

    #[test]
    fn bytes_round_trip_and_truncation() {
        let s = EmbeddingStore::build(
            StoreKind::Audio,
            (0..5).map(|i| (format!("t{i}"), (0..40).map(|j| (i * 40 + j) as f32 * 0.37 - 3.0).collect())),
        )
        .unwrap();
        let bytes = s.to_bytes().unwrap();
        assert_eq!(EmbeddingStore::from_bytes(&bytes).unwrap(), s);
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(EmbeddingStore::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(EmbeddingStore::from_bytes(&bad).is_err());
    }
}
