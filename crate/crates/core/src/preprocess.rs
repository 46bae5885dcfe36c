//! Matrix normalizations shared by the similarity measures.

use thiserror::Error;

use crate::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("matrix has no rows")]
    EmptyMatrix,
    #[error("matrix has zero Frobenius norm")]
    ZeroMatrix,
    #[error("cannot pad {cols} columns down to {target}")]
    TargetTooSmall { cols: usize, target: usize },
    #[error("non-finite value in row {0}")]
    NonFiniteInput(usize),
}

type Result<T> = std::result::Result<T, PreprocessError>;

/// A matrix whose columns have zero mean.
#[derive(Clone, Debug, PartialEq)]
pub struct CenteredMatrix(Matrix);

impl CenteredMatrix {
    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }
}

impl std::ops::Deref for CenteredMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

/// A row-stochastic matrix: every row is a probability distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMatrix(Matrix);

impl ProbabilityMatrix {
    /// Wraps `m` after checking entries lie in `[0, 1]` and rows sum to 1
    /// within 1e-9.
    pub fn new(m: Matrix) -> std::result::Result<Self, usize> {
        for (i, row) in m.row_iter().enumerate() {
            let in_range = row.iter().all(|&p| (0.0..=1.0).contains(&p));
            if !in_range || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(i);
            }
        }
        Ok(ProbabilityMatrix(m))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }
}

impl std::ops::Deref for ProbabilityMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

pub fn center_columns(m: &Matrix) -> Result<CenteredMatrix> {
    if m.nrows() == 0 {
        return Err(PreprocessError::EmptyMatrix);
    }
    let mut out = m.clone();
    let n = m.nrows() as f64;
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    Ok(CenteredMatrix(out))
}

pub fn unit_frobenius(m: &Matrix) -> Result<Matrix> {
    let norm = m.norm();
    if norm == 0.0 {
        return Err(PreprocessError::ZeroMatrix);
    }
    Ok(m / norm)
}

/// Appends zero columns up to `target` columns.
pub fn zero_pad(m: &Matrix, target: usize) -> Result<Matrix> {
    if target < m.ncols() {
        return Err(PreprocessError::TargetTooSmall {
            cols: m.ncols(),
            target,
        });
    }
    Ok(m.clone().resize_horizontally(target, 0.0))
}

/// Row-wise softmax with the row maximum subtracted before exponentiation.
pub fn softmax_rows(logits: &Matrix) -> Result<ProbabilityMatrix> {
    let mut out = logits.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(PreprocessError::NonFiniteInput(i));
        }
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let total = row.sum();
        row /= total;
    }
    Ok(ProbabilityMatrix(out))
}
