//! Token and latent containers shared by every stage of the pipeline.

use crate::error::{input, Result};

/// Integer token grid `batch × len` over the augmented vocabulary.
///
/// Ids `0..vocab` are ordinary tokens; the id `vocab` is the mask symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub vocab: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, len: usize, vocab: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != batch * len {
            return Err(input(format!(
                "token grid has {} ids, expected {batch}×{len}",
                ids.len()
            )));
        }
        if let Some(bad) = ids.iter().find(|&&id| id as usize > vocab) {
            return Err(input(format!("token id {bad} outside augmented vocabulary 0..={vocab}")));
        }
        Ok(Self { batch, len, vocab, ids })
    }

    pub fn filled(batch: usize, len: usize, vocab: usize, id: u32) -> Self {
        Self { batch, len, vocab, ids: vec![id; batch * len] }
    }

    pub fn from_rows(rows: &[Vec<u32>], vocab: usize) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != len) {
            return Err(input("ragged token rows"));
        }
        Self::new(rows.len(), len, vocab, rows.concat())
    }

    pub fn mask_id(&self) -> u32 {
        self.vocab as u32
    }

    pub fn get(&self, b: usize, j: usize) -> u32 {
        self.ids[b * self.len + j]
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    pub fn is_masked(&self, b: usize, j: usize) -> bool {
        self.get(b, j) == self.mask_id()
    }

    pub fn mask_indicator(&self) -> Vec<bool> {
        let m = self.mask_id();
        self.ids.iter().map(|&id| id == m).collect()
    }

    pub fn ensure_mask_free(&self) -> Result<()> {
        if self.ids.iter().any(|&id| id == self.mask_id()) {
            return Err(input("clean tokens must not contain the mask symbol"));
        }
        Ok(())
    }

    /// Rows `start..start+count` as a new batch.
    pub fn rows(&self, start: usize, count: usize) -> TokenBatch {
        TokenBatch {
            batch: count,
            len: self.len,
            vocab: self.vocab,
            ids: self.ids[start * self.len..(start + count) * self.len].to_vec(),
        }
    }
}

/// Real tensor `batch × len × dim` of continuous embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl LatentBatch {
    pub fn zeros(batch: usize, len: usize, dim: usize) -> Self {
        Self { batch, len, dim, data: vec![0.0; batch * len * dim] }
    }

    pub fn new(batch: usize, len: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * len * dim {
            return Err(input(format!(
                "latent tensor has {} values, expected {batch}×{len}×{dim}",
                data.len()
            )));
        }
        Ok(Self { batch, len, dim, data })
    }

    pub fn same_shape(&self, other: &LatentBatch) -> bool {
        self.batch == other.batch && self.len == other.len && self.dim == other.dim
    }

    pub fn vector(&self, b: usize, j: usize) -> &[f64] {
        let o = (b * self.len + j) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn vector_mut(&mut self, b: usize, j: usize) -> &mut [f64] {
        let o = (b * self.len + j) * self.dim;
        &mut self.data[o..o + self.dim]
    }

    pub fn sequence(&self, b: usize) -> &[f64] {
        let n = self.len * self.dim;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(input("latent tensor contains non-finite values"));
        }
        Ok(())
    }
}
