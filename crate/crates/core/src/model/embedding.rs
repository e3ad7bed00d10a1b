//! File-backed semantic embeddings in the `AIDE-EMB1` format:
//!
//! ```text
//! "AIDE-EMB1" | u32 count | u32 dim | count x ( u16 id_len | id (UTF-8) | dim x f32 )
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 9] = b"AIDE-EMB1";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let id = id.into();
        let record = self.ids.len();
        if vector.len() != self.dim {
            return Err(Error::Format {
                record,
                message: format!("vector has dimension {}, table has {}", vector.len(), self.dim),
            });
        }
        if id.len() > u16::MAX as usize {
            return Err(Error::Format {
                record,
                message: "id longer than 65535 bytes".into(),
            });
        }
        if self.index.contains_key(&id) {
            return Err(Error::Format {
                record,
                message: format!("duplicate id {id:?}"),
            });
        }
        self.index.insert(id.clone(), record);
        self.ids.push(id);
        self.vectors.push(vector);
        Ok(())
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

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn lookup(&self, id: &str) -> Result<&[f32]> {
        self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.len() * (2 + 4 * self.dim));
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = |message: &str| Error::Format {
            record: 0,
            message: message.to_string(),
        };
        if bytes.len() < EMBEDDING_MAGIC.len() || &bytes[..EMBEDDING_MAGIC.len()] != EMBEDDING_MAGIC {
            return Err(header("bad magic, expected AIDE-EMB1"));
        }
        let mut r = Reader {
            bytes,
            pos: EMBEDDING_MAGIC.len(),
        };
        let count = r.u32().ok_or_else(|| header("truncated header"))? as usize;
        let dim = r.u32().ok_or_else(|| header("truncated header"))? as usize;
        let mut table = Self::new(dim);
        for record in 0..count {
            let truncated = || Error::Format {
                record,
                message: "truncated record".into(),
            };
            let id_len = r.u16().ok_or_else(truncated)? as usize;
            let id = std::str::from_utf8(r.take(id_len).ok_or_else(truncated)?)
                .map_err(|e| Error::Format {
                    record,
                    message: format!("id is not UTF-8: {e}"),
                })?
                .to_string();
            let raw = r.take(4 * dim).ok_or_else(truncated)?;
            let v = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            table.insert(id, v)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                record: count,
                message: format!("{} trailing bytes after last record", bytes.len() - r.pos),
            });
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn load_embedding_table(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingTable::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn raw(records: &[(&str, Vec<f32>)], dim: u32) -> Vec<u8> {
        let mut out = EMBEDDING_MAGIC.to_vec();
        out.extend((records.len() as u32).to_le_bytes());
        out.extend(dim.to_le_bytes());
        for (id, v) in records {
            out.extend((id.len() as u16).to_le_bytes());
            out.extend(id.as_bytes());
            for x in v {
                out.extend(x.to_le_bytes());
            }
        }
        out
    }

    #[test]
    fn two_records() {
        let t = EmbeddingTable::from_bytes(&raw(&[("a", vec![1.0; 4]), ("b", vec![2.0; 4])], 4)).unwrap();
        assert_eq!((t.len(), t.dim()), (2, 4));
        assert_eq!(t.lookup("b").unwrap(), &[2.0; 4]);
        assert!(matches!(t.lookup("c"), Err(Error::UnknownId(_))));
    }

    #[test]
    fn duplicate_reported_at_second() {
        let bytes = raw(&[("a", vec![0.0; 2]), ("b", vec![0.0; 2]), ("a", vec![1.0; 2])], 2);
        match EmbeddingTable::from_bytes(&bytes) {
            Err(Error::Format { record, .. }) => assert_eq!(record, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = raw(&[("a", vec![0.0; 2])], 2);
        assert!(EmbeddingTable::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(matches!(EmbeddingTable::from_bytes(&bytes), Err(Error::Format { record: 0, .. })));
    }

    #[test]
    fn random_round_trip_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let mut t = EmbeddingTable::new(16);
        for i in 0..100 {
            t.insert(format!("img/{i:03}.png"), (0..16).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect())
                .unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.emb");
        t.save(&path).unwrap();
        let back = load_embedding_table(&path).unwrap();
        assert_eq!(back, t);
        for id in t.ids() {
            let a = t.get(id).unwrap();
            let b = back.get(id).unwrap();
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
