//! Representational similarity measures on activation matrices.
//!
//! All four measures treat two representations as equivalent when they differ
//! only by rotation, reflection, isotropic scaling or translation.
//!
//! | measure         | range    | preprocessing                          |
//! |-----------------|----------|----------------------------------------|
//! | [`cka`]         | `[0, 1]` | caller centers columns                 |
//! | [`procrustes_sim`] | `[0, 1]` | zero-pad, center, unit Frobenius norm |
//! | [`jaccard_sim`] | `[0, 1]` | center, cosine k-NN                    |
//! | [`rtd`]         | `>= 0`   | center, unit Frobenius norm            |

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{center_columns, unit_frobenius, zero_pad, CenteredMatrix, PreprocessError};
use crate::Matrix;

mod rtd;

pub use rtd::{
    directed_bars, directed_rtd, distance_matrix, rtd, rtd_with_batch_size, single_linkage_merges, Bar, Merge,
    MergeTree, RTD_BATCH_SIZE,
};

#[derive(Debug, Error, PartialEq)]
pub enum RepSimError {
    #[error("row counts differ: {0} vs {1}")]
    RowCountMismatch(usize, usize),
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("k = {k} out of range for {n} points (need 1 <= k <= n - 1)")]
    KOutOfRange { k: usize, n: usize },
    #[error("row {0} is zero; cosine similarity undefined")]
    ZeroRow(usize),
    #[error("distance matrix is not symmetric at ({0}, {1})")]
    AsymmetricMatrix(usize, usize),
    #[error("negative or non-finite distance at ({0}, {1})")]
    NegativeDistance(usize, usize),
    #[error("distance matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
}

impl From<PreprocessError> for RepSimError {
    fn from(e: PreprocessError) -> Self {
        RepSimError::DegenerateInput(e.to_string())
    }
}

type Result<T> = std::result::Result<T, RepSimError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepMeasure {
    Cka,
    ProcrustesSim,
    Jaccard,
    NegRtd,
}

/// One representational similarity value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepSimScore {
    pub measure: RepMeasure,
    pub value: f64,
    pub k: Option<usize>,
}

fn check_rows(a: &Matrix, b: &Matrix, needed: usize) -> Result<()> {
    if a.nrows() != b.nrows() {
        return Err(RepSimError::RowCountMismatch(a.nrows(), b.nrows()));
    }
    if a.nrows() < needed {
        return Err(RepSimError::TooFewRows { needed, got: a.nrows() });
    }
    Ok(())
}

/// Linear CKA of two column-centered representations.
///
/// `||R2^T R||_F^2 / (||R^T R||_F ||R2^T R2||_F)`, evaluated in feature
/// space when both widths are at most N and through the N×N Gram matrices
/// otherwise.
pub fn cka(r: &CenteredMatrix, r2: &CenteredMatrix) -> Result<f64> {
    check_rows(r, r2, 2)?;
    let n = r.nrows();
    let (cross, self_a, self_b) = if r.ncols().max(r2.ncols()) <= n {
        let cross = r2.tr_mul(r).norm_squared();
        (cross, r.tr_mul(r).norm(), r2.tr_mul(r2).norm())
    } else {
        let k = r.as_matrix() * r.transpose();
        let l = r2.as_matrix() * r2.transpose();
        (k.dot(&l), k.norm(), l.norm())
    };
    if self_a == 0.0 || self_b == 0.0 {
        return Err(RepSimError::DegenerateInput(
            "representation with zero Frobenius norm".into(),
        ));
    }
    Ok((cross / (self_a * self_b)).clamp(0.0, 1.0))
}

/// Below this squared distance the nuclear-norm expression has lost about
/// half of its significant digits to cancellation, and the distance is read
/// off the aligned residual instead.
const RESIDUAL_SWITCH: f64 = 1e-4;

/// Procrustes similarity `(2 - d) / 2` where `d` is the orthogonal
/// Procrustes distance between the padded, centered, unit-norm inputs.
pub fn procrustes_sim(r: &Matrix, r2: &Matrix) -> Result<f64> {
    let d = procrustes_distance(r, r2)?;
    Ok(((2.0 - d) / 2.0).clamp(0.0, 1.0))
}

/// `min_Q ||R Q - R2||_F = (||R||^2 + ||R2||^2 - 2 ||R^T R2||_*)^(1/2)` after
/// preprocessing. Lies in `[0, 2]`.
pub fn procrustes_distance(r: &Matrix, r2: &Matrix) -> Result<f64> {
    check_rows(r, r2, 2)?;
    let width = r.ncols().max(r2.ncols());
    let prep = |m: &Matrix| -> Result<Matrix> {
        let padded = zero_pad(m, width)?;
        Ok(unit_frobenius(center_columns(&padded)?.as_matrix())?)
    };
    let (mut a, mut b) = (prep(r)?, prep(r2)?);

    // With more features than rows, R^T R2 has rank <= N. Replace each side
    // by the triangular factor of a thin QR of its transpose; this keeps the
    // singular values of the cross product and the aligned residual norm.
    if width > a.nrows() {
        a = a.transpose().qr().r().transpose();
        b = b.transpose().qr().r().transpose();
    }

    let svd = a.tr_mul(&b).svd(true, true);
    let nuclear: f64 = svd.singular_values.sum();
    let squared = a.norm_squared() + b.norm_squared() - 2.0 * nuclear;
    if squared > RESIDUAL_SWITCH {
        return Ok(squared.sqrt());
    }
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let rotation = u * v_t;
    Ok((a * rotation - b).norm())
}

/// For every row, the `k` other rows with the largest cosine similarity,
/// ordered from most to least similar. Equal similarities go to the lower
/// index.
///
/// The caller is expected to have centered the columns.
pub fn knn_indices(r: &Matrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = r.nrows();
    if k == 0 || k >= n {
        return Err(RepSimError::KOutOfRange { k, n });
    }
    let mut unit = r.clone();
    for (i, mut row) in unit.row_iter_mut().enumerate() {
        let norm = row.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(RepSimError::ZeroRow(i));
        }
        row /= norm;
    }
    let unit_t = unit.transpose();
    let order = |x: &(f64, usize), y: &(f64, usize)| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1));

    // cosine similarities a block of rows at a time, O(KNN_BLOCK * N) memory
    let starts: Vec<usize> = (0..n).step_by(KNN_BLOCK).collect();
    let blocks: Vec<Vec<Vec<usize>>> = starts
        .into_par_iter()
        .map(|start| {
            let len = KNN_BLOCK.min(n - start);
            let sims = unit.rows(start, len) * &unit_t;
            (0..len)
                .map(|b| {
                    let i = start + b;
                    let mut cand: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (sims[(b, j)], j)).collect();
                    if k < cand.len() {
                        cand.select_nth_unstable_by(k - 1, order);
                        cand.truncate(k);
                    }
                    cand.sort_unstable_by(order);
                    cand.into_iter().map(|(_, j)| j).collect()
                })
                .collect()
        })
        .collect();
    Ok(blocks.into_iter().flatten().collect())
}

const KNN_BLOCK: usize = 128;

/// Default neighborhood size.
pub const DEFAULT_K: usize = 10;

/// Mean intersection-over-union of the cosine k-NN sets of each row, with
/// neighbors found on the column-centered inputs.
pub fn jaccard_sim(r: &Matrix, r2: &Matrix, k: usize) -> Result<f64> {
    check_rows(r, r2, 2)?;
    let a = knn_indices(center_columns(r)?.as_matrix(), k)?;
    let b = knn_indices(center_columns(r2)?.as_matrix(), k)?;
    let total: f64 = a
        .iter()
        .zip(&b)
        .map(|(na, nb)| {
            let inter = na.iter().filter(|j| nb.contains(j)).count();
            inter as f64 / (2 * k - inter) as f64
        })
        .sum();
    Ok(total / r.nrows() as f64)
}

impl RepMeasure {
    /// Smallest row count the measure accepts, given the neighborhood size.
    pub fn min_rows(self, k: usize) -> usize {
        match self {
            RepMeasure::Jaccard => (k + 1).max(2),
            _ => 2,
        }
    }

    /// Evaluates the measure on raw activations. `k` is used by Jaccard
    /// only and `seed` by RTD batching. RTD is returned negated so that
    /// larger always means more similar.
    pub fn evaluate(self, r: &Matrix, r2: &Matrix, k: usize, seed: u64) -> Result<RepSimScore> {
        let value = match self {
            RepMeasure::Cka => cka(&center_columns(r)?, &center_columns(r2)?)?,
            RepMeasure::ProcrustesSim => procrustes_sim(r, r2)?,
            RepMeasure::Jaccard => jaccard_sim(r, r2, k)?,
            // adding 0.0 turns -0.0 into 0.0
            RepMeasure::NegRtd => -rtd(r, r2, seed)? + 0.0,
        };
        Ok(RepSimScore {
            measure: self,
            value,
            k: (self == RepMeasure::Jaccard).then_some(k),
        })
    }
}
