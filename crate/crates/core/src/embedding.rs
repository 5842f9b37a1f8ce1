//! Word-embedding matrices and mean pooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An n x d word-embedding matrix for a query (one row per token).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    rows: Vec<Vec<f64>>,
}

impl EmbeddingMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("embedding matrix has no rows".into()));
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(Error::InvalidInput("embedding dimension is zero".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::InvalidInput(format!(
                    "row {i} has dimension {}, expected {d}",
                    row.len()
                )));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "row {i} contains a non-finite value"
                )));
            }
        }
        Ok(Self { rows })
    }

    /// Token count.
    pub fn n_tokens(&self) -> usize {
        self.rows.len()
    }

    /// Embedding dimension.
    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// A pooled sentence embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceEmbedding {
    pub values: Vec<f64>,
}

impl SentenceEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Mean pooling over token rows: component j is the mean of column j.
pub fn mean_pool(e: &EmbeddingMatrix) -> SentenceEmbedding {
    let n = e.n_tokens() as f64;
    let d = e.dim();
    let mut values = vec![0.0; d];
    for row in e.rows() {
        for (acc, x) in values.iter_mut().zip(row) {
            *acc += x;
        }
    }
    for acc in &mut values {
        *acc /= n;
    }
    SentenceEmbedding { values }
}

/// Row-wise broadcast add: every row gets `v` added.
pub fn broadcast_add(e: &EmbeddingMatrix, v: &[f64]) -> Result<EmbeddingMatrix> {
    if v.len() != e.dim() {
        return Err(Error::InvalidInput(format!(
            "perturbation dimension {} does not match embedding dimension {}",
            v.len(),
            e.dim()
        )));
    }
    let rows = e
        .rows()
        .iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a + b).collect())
        .collect();
    EmbeddingMatrix::new(rows)
}

/// Adds two vectors; used where the broadcast identity lets the pooled form
/// stand in for the full matrix.
pub fn add_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Euclidean norm.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
