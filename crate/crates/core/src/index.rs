//! Exhaustive inner-product index over passage embeddings.

use std::cmp::Ordering;
use std::path::Path;

use thiserror::Error;

use crate::corpus::{DocId, Document};
use crate::encoder::{dot, EncoderError, EncoderParams, Role, CHECKPOINT_MAGIC};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("index input error: {0}")]
    Input(String),
    #[error("index dump format error: {0}")]
    Format(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub doc_id: DocId,
    /// Raw inner product, before temperature scaling.
    pub score: f64,
}

/// Descending score, then ascending doc id.
pub fn hit_order(a: &SearchHit, b: &SearchHit) -> Ordering {
    // adding 0.0 folds -0.0 into 0.0 so signed zeros tie
    (b.score + 0.0)
        .total_cmp(&(a.score + 0.0))
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    dim: usize,
    vectors: Vec<f64>,
    ids: Vec<DocId>,
}

impl FlatIndex {
    /// Encode every document with the passage role.
    pub fn build(docs: &[Document], encoder: &EncoderParams) -> Result<Self, IndexError> {
        if docs.is_empty() {
            return Err(IndexError::Input("cannot index an empty corpus".into()));
        }
        let dim = encoder.out_dim();
        let mut vectors = Vec::with_capacity(docs.len() * dim);
        let mut ids = Vec::with_capacity(docs.len());
        for d in docs {
            vectors.extend(encoder.encode(Role::Passage, &d.tokens())?.vec);
            ids.push(d.doc_id);
        }
        Ok(Self { dim, vectors, ids })
    }

    pub fn from_vectors(dim: usize, vectors: Vec<f64>, ids: Vec<DocId>) -> Result<Self, IndexError> {
        if dim == 0 || vectors.len() != dim * ids.len() {
            return Err(IndexError::Input(format!(
                "{} values do not form {} rows of width {dim}",
                vectors.len(),
                ids.len()
            )));
        }
        Ok(Self { dim, vectors, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[DocId] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Top `min(k, n)` rows by inner product.
    pub fn search(&self, query: &[f64], k: usize) -> Vec<SearchHit> {
        let k = k.max(1).min(self.len());
        let mut hits: Vec<SearchHit> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, &doc_id)| SearchHit {
                doc_id,
                score: dot(query, self.row(i)),
            })
            .collect();
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, hit_order);
            hits.truncate(k);
        }
        hits.sort_by(hit_order);
        hits
    }

    /// `MOPO1`, u32 row count, u32 width, f32 rows, then u32 doc ids.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut out = Vec::with_capacity(13 + 4 * (self.vectors.len() + self.ids.len()));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.vectors {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = std::fs::read(path)?;
        let m = CHECKPOINT_MAGIC.len();
        if bytes.len() < m + 8 || &bytes[..m] != CHECKPOINT_MAGIC {
            return Err(IndexError::Format("missing MOPO1 header".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let (n, dim) = (word(m) as usize, word(m + 4) as usize);
        let body = &bytes[m + 8..];
        if body.len() != 4 * (n * dim + n) {
            return Err(IndexError::Format(format!(
                "expected {} payload bytes for {n} rows of width {dim}, found {}",
                4 * (n * dim + n),
                body.len()
            )));
        }
        let (floats, ids) = body.split_at(4 * n * dim);
        let vectors = floats
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let ids = ids
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::from_vectors(dim, vectors, ids)
    }
}
