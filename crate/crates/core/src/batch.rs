//! Embedding batches and their pairwise similarity.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Norm tolerance accepted on embedding rows.
const NORM_TOL: f64 = 1e-6;

/// One mini-batch: raw inputs, unit-norm embeddings, and class labels.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub inputs: Array2<f64>,
    pub embeddings: Array2<f64>,
    pub labels: Vec<usize>,
}

impl EmbeddingBatch {
    /// Build a batch from raw embeddings, normalizing each row to unit norm.
    ///
    /// Rows with norm below 1e-12 are perturbed by 1e-12 per coordinate
    /// before normalizing so the result stays finite.
    pub fn from_raw(
        inputs: Array2<f64>,
        raw_embeddings: Array2<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let b = raw_embeddings.nrows();
        let d = raw_embeddings.ncols();
        if b < 2 {
            return Err(Error::InvalidBatch(format!(
                "batch needs at least 2 examples, got {b}"
            )));
        }
        if d < 1 {
            return Err(Error::InvalidBatch("embedding dimension must be >= 1".into()));
        }
        if labels.len() != b || inputs.nrows() != b {
            return Err(Error::Shape(format!(
                "inputs ({}), embeddings ({}) and labels ({}) disagree on batch size",
                inputs.nrows(),
                b,
                labels.len()
            )));
        }
        let embeddings = normalize_rows(raw_embeddings);
        Ok(Self {
            inputs,
            embeddings,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }
}

/// L2-normalize every row, perturbing near-zero rows first.
pub fn normalize_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let mut norm = row.dot(&row).sqrt();
        if norm < 1e-12 {
            row.mapv_inplace(|v| v + 1e-12);
            norm = row.dot(&row).sqrt();
        }
        row.mapv_inplace(|v| v / norm);
    }
    m
}

/// Pairwise inner products of unit-norm embeddings.
///
/// Symmetric by construction: each off-diagonal entry is computed once and
/// mirrored, so `values[i][j]` and `values[j][i]` are the same float.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }
}

/// Compute the similarity matrix S_ij = <f_i, f_j> of a batch.
///
/// Entries are clamped to [-1, 1] to absorb rounding on unit-norm inputs.
pub fn similarity(batch: &EmbeddingBatch) -> Result<SimilarityMatrix> {
    let e = &batch.embeddings;
    let b = e.nrows();
    for (row, r) in e.rows().into_iter().enumerate() {
        let norm = r.dot(&r).sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::Normalization { row, norm });
        }
    }
    let mut values = Array2::zeros((b, b));
    for i in 0..b {
        for j in i..b {
            let s = e.row(i).dot(&e.row(j)).clamp(-1.0, 1.0);
            values[(i, j)] = s;
            values[(j, i)] = s;
        }
    }
    Ok(SimilarityMatrix { values })
}
