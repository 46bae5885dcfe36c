//! Prediction-level similarity: agreement rate and Jensen-Shannon similarity.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{softmax_rows, PreprocessError, ProbabilityMatrix};
use crate::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum FuncSimError {
    #[error("shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("need at least one row")]
    Empty,
    #[error("row {0} is not a probability distribution")]
    InvalidDistribution(usize),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

type Result<T> = std::result::Result<T, FuncSimError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuncMeasure {
    Agreement,
    Jsdsim,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuncSimScore {
    pub measure: FuncMeasure,
    pub value: f64,
}

fn check_shapes(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(FuncSimError::ShapeMismatch(a.shape(), b.shape()));
    }
    if a.nrows() == 0 {
        return Err(FuncSimError::Empty);
    }
    Ok(())
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<'a>(row: impl IntoIterator<Item = &'a f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, &v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (j, v);
        }
    }
    best.0
}

/// Predicted class per row.
pub fn predictions(logits: &Matrix) -> Vec<usize> {
    logits.row_iter().map(|r| argmax(r.iter())).collect()
}

/// Fraction of rows whose argmax classes coincide.
pub fn agreement(l: &Matrix, l2: &Matrix) -> Result<f64> {
    check_shapes(l, l2)?;
    let same = predictions(l)
        .into_iter()
        .zip(predictions(l2))
        .filter(|(a, b)| a == b)
        .count();
    Ok(same as f64 / l.nrows() as f64)
}

/// Mean row-wise Jensen-Shannon divergence in nats.
pub fn jsd(p: &ProbabilityMatrix, p2: &ProbabilityMatrix) -> Result<f64> {
    check_shapes(p, p2)?;
    let mut total = 0.0;
    for (a, b) in p.row_iter().zip(p2.row_iter()) {
        let mut row = 0.0;
        for (&x, &y) in a.iter().zip(b.iter()) {
            let mean = 0.5 * (x + y);
            if mean == 0.0 {
                continue;
            }
            if x > 0.0 {
                row += 0.5 * x * (x / mean).ln();
            }
            if y > 0.0 {
                row += 0.5 * y * (y / mean).ln();
            }
        }
        total += row;
    }
    Ok((total / p.nrows() as f64).clamp(0.0, LN_2))
}

/// `1 - JSD / ln 2` of the softmaxed logits; 1 means identical predicted
/// distributions.
pub fn jsdsim(l: &Matrix, l2: &Matrix) -> Result<f64> {
    check_shapes(l, l2)?;
    let (p, p2) = (softmax_rows(l)?, softmax_rows(l2)?);
    Ok(1.0 - jsd(&p, &p2)? / LN_2)
}

/// Wraps a matrix as probabilities, mapping a bad row to
/// [`FuncSimError::InvalidDistribution`].
pub fn probabilities(m: Matrix) -> Result<ProbabilityMatrix> {
    ProbabilityMatrix::new(m).map_err(FuncSimError::InvalidDistribution)
}
