//! Batch embedding export and table-based scoring.
//!
//! Tables are written as `EMB1` files, all little-endian:
//! magic `EMB1`, `u8` kind (0 user, 1 item), `u32` dim, `u64` count, then
//! `count` records of `u64` id followed by `dim` `f32` values. A file is
//! fully determined by the model and the inputs, so re-exporting gives the
//! same bytes.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{write_atomic, EncodedEvent, Model};
use crate::tensor::TensorError;

pub const MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Error)]
pub enum ServingError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not an embedding table (bad magic)")]
    BadMagic,
    #[error("unknown entity kind {0}")]
    Kind(u8),
    #[error("duplicate id {0} in table")]
    Duplicate(u64),
    #[error("{0} trailing bytes after table")]
    Trailing(usize),
    #[error("expected a {expected} table, found {found}")]
    WrongKind { expected: EntityKind, found: EntityKind },
    #[error("table dims differ: users {users}, items {items}")]
    DimMismatch { users: usize, items: usize },
    #[error("user {id}: {source}")]
    User { id: u64, source: TensorError },
    #[error("item {id}: {source}")]
    Item { id: u64, source: TensorError },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntityKind {
    User,
    Item,
}

impl EntityKind {
    fn byte(self) -> u8 {
        match self {
            EntityKind::User => 0,
            EntityKind::Item => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self, ServingError> {
        match b {
            0 => Ok(EntityKind::User),
            1 => Ok(EntityKind::Item),
            other => Err(ServingError::Kind(other)),
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityKind::User => "user",
            EntityKind::Item => "item",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub kind: EntityKind,
    pub dim: usize,
    /// Records in export order.
    pub records: Vec<(u64, Vec<f32>)>,
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// User vectors from each user's (already delayed and truncated) history.
/// An empty history gives the [CLS]-only vector.
pub fn export_users<'a>(
    model: &Model,
    users: impl IntoIterator<Item = (u64, &'a [EncodedEvent])>,
) -> Result<EmbeddingTable, ServingError> {
    let records = users
        .into_iter()
        .map(|(id, h)| {
            let v = model.embed_user(h).map_err(|source| ServingError::User { id, source })?;
            Ok((id, to_f32(&v)))
        })
        .collect::<Result<Vec<_>, ServingError>>()?;
    Ok(EmbeddingTable {
        kind: EntityKind::User,
        dim: model.config.d,
        records,
    })
}

/// Item vectors from tokenized titles.
pub fn export_items<'a>(
    model: &Model,
    items: impl IntoIterator<Item = (u64, &'a [u32])>,
) -> Result<EmbeddingTable, ServingError> {
    let records = items
        .into_iter()
        .map(|(id, t)| {
            let v = model.embed_item(t).map_err(|source| ServingError::Item { id, source })?;
            Ok((id, to_f32(&v)))
        })
        .collect::<Result<Vec<_>, ServingError>>()?;
    Ok(EmbeddingTable {
        kind: EntityKind::Item,
        dim: model.config.d,
        records,
    })
}

impl EmbeddingTable {
    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[self.kind.byte()])?;
        let dim = u32::try_from(self.dim).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "dim exceeds u32"))?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for (id, v) in &self.records {
            if v.len() != self.dim {
                return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("record {id} has {} values", v.len())));
            }
            w.write_all(&id.to_le_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> io::Result<Vec<u8>> {
        let mut b = Vec::with_capacity(17 + self.records.len() * (8 + 4 * self.dim));
        self.write_to(&mut b)?;
        Ok(b)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ServingError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ServingError::BadMagic);
        }
        let mut k = [0u8; 1];
        r.read_exact(&mut k)?;
        let kind = EntityKind::from_byte(k[0])?;
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8);
        let mut seen = HashSet::new();
        let mut records = Vec::new();
        for _ in 0..count {
            r.read_exact(&mut b8)?;
            let id = u64::from_le_bytes(b8);
            if !seen.insert(id) {
                return Err(ServingError::Duplicate(id));
            }
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut b4)?;
                v.push(f32::from_le_bytes(b4));
            }
            records.push((id, v));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(ServingError::Trailing(rest.len()));
        }
        Ok(Self { kind, dim, records })
    }

    /// Writes to a temporary file next to `path`, then renames it.
    pub fn save(&self, path: &Path) -> Result<(), ServingError> {
        write_atomic(path, &self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ServingError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&bytes[..])
    }
}

/// A loaded table keyed by id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    pub kind: EntityKind,
    pub dim: usize,
    vectors: HashMap<u64, Vec<f32>>,
}

impl EmbeddingIndex {
    pub fn new(table: EmbeddingTable) -> Self {
        Self {
            kind: table.kind,
            dim: table.dim,
            vectors: table.records.into_iter().collect(),
        }
    }

    pub fn get(&self, id: u64) -> Option<&[f32]> {
        self.vectors.get(&id).map(|v| &v[..])
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("unknown user {0}")]
    UnknownUser(u64),
    #[error("unknown item {0}")]
    UnknownItem(u64),
}

/// User and item tables loaded once for scoring. Scores are plain inner
/// products of the stored vectors; no context enters.
#[derive(Clone, Debug)]
pub struct Scorer {
    users: EmbeddingIndex,
    items: EmbeddingIndex,
}

impl Scorer {
    pub fn new(users: EmbeddingTable, items: EmbeddingTable) -> Result<Self, ServingError> {
        for (t, expected) in [(&users, EntityKind::User), (&items, EntityKind::Item)] {
            if t.kind != expected {
                return Err(ServingError::WrongKind { expected, found: t.kind });
            }
        }
        if users.dim != items.dim {
            return Err(ServingError::DimMismatch {
                users: users.dim,
                items: items.dim,
            });
        }
        Ok(Self {
            users: EmbeddingIndex::new(users),
            items: EmbeddingIndex::new(items),
        })
    }

    pub fn load(users: &Path, items: &Path) -> Result<Self, ServingError> {
        Self::new(EmbeddingTable::load(users)?, EmbeddingTable::load(items)?)
    }

    /// One result per requested item, in request order.
    pub fn score(&self, user: u64, items: &[u64]) -> Vec<Result<f64, ScoreError>> {
        let u = self.users.get(user);
        items
            .iter()
            .map(|&i| {
                let u = u.ok_or(ScoreError::UnknownUser(user))?;
                let v = self.items.get(i).ok_or(ScoreError::UnknownItem(i))?;
                Ok(dot32(u, v))
            })
            .collect()
    }
}

/// Inner product accumulated in f64.
pub fn dot32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[cfg(test)]
mod tests;
