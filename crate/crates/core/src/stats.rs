//! Rank correlation with permutation p-values, agree/disagree subgroup
//! analysis, and bounds on the agreement of two classifiers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::funcsim::predictions;
use crate::repsim::{RepMeasure, RepSimError};
use crate::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("vectors have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 observations, got {0}")]
    TooShort(usize),
    #[error("vector is constant; rank correlation undefined")]
    ConstantVector,
    #[error("need at least 100 permutations, got {0}")]
    TooFewPermutations(usize),
    #[error("shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("{group} subgroup has {size} rows, need at least {needed}")]
    SubgroupTooSmall {
        group: &'static str,
        size: usize,
        needed: usize,
    },
    #[error("accuracy {0} outside [0, 1]")]
    BadAccuracy(f64),
    #[error("class count must be at least 2, got {0}")]
    BadClassCount(usize),
    #[error(transparent)]
    Measure(#[from] RepSimError),
}

type Result<T> = std::result::Result<T, StatsError>;

/// Ranks starting at 1; tied values share the mean of their ranks.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn centered(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

fn pearson_centered(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let den = (a.iter().map(|x| x * x).sum::<f64>() * b.iter().map(|y| y * y).sum::<f64>()).sqrt();
    (num / den).clamp(-1.0, 1.0)
}

fn centered_ranks(x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooShort(x.len()));
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return Err(StatsError::ConstantVector);
    }
    Ok((centered(&average_ranks(x)), centered(&average_ranks(y))))
}

/// Spearman's rho: Pearson correlation of the average ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    let (rx, ry) = centered_ranks(x, y)?;
    Ok(pearson_centered(&rx, &ry))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rho: f64,
    pub p_value: f64,
    pub n_pairs: usize,
    pub n_permutations: usize,
    pub seed: u64,
}

pub const DEFAULT_PERMUTATIONS: usize = 10_000;

/// Two-sided statistics compare `|rho|` with this slack so that permutations
/// reproducing the observed ranking are counted despite summation order.
const TIE_SLACK: f64 = 1e-12;

/// `|rho|` for `m` random permutations of `y` against fixed `x`.
///
/// Permutation `i` is drawn from its own ChaCha stream (`seed`, stream `i`),
/// so the result does not depend on how the work is scheduled.
pub fn permutation_null(x: &[f64], y: &[f64], m: usize, seed: u64) -> Result<Vec<f64>> {
    let (rx, ry) = centered_ranks(x, y)?;
    Ok((0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut shuffled = ry.clone();
            shuffled.shuffle(&mut rng);
            pearson_centered(&rx, &shuffled).abs()
        })
        .collect())
}

/// Add-one estimate `(1 + #{null >= |observed|}) / (m + 1)`.
pub fn pvalue_from_null(null: &[f64], observed: f64) -> f64 {
    let threshold = observed.abs() - TIE_SLACK;
    let hits = null.iter().filter(|&&v| v >= threshold).count();
    (1 + hits) as f64 / (null.len() + 1) as f64
}

/// Spearman correlation with a two-sided permutation p-value.
pub fn permutation_pvalue(x: &[f64], y: &[f64], m: usize, seed: u64) -> Result<CorrelationReport> {
    if m < 100 {
        return Err(StatsError::TooFewPermutations(m));
    }
    let rho = spearman_rho(x, y)?;
    let null = permutation_null(x, y, m, seed)?;
    Ok(CorrelationReport {
        rho,
        p_value: pvalue_from_null(&null, rho),
        n_pairs: x.len(),
        n_permutations: m,
        seed,
    })
}

/// Row indices where the two models' predictions agree and disagree, both
/// ascending.
pub fn subgroup_split(l: &Matrix, l2: &Matrix) -> Result<(Vec<usize>, Vec<usize>)> {
    if l.shape() != l2.shape() {
        return Err(StatsError::ShapeMismatch(l.shape(), l2.shape()));
    }
    let (a, b) = (predictions(l), predictions(l2));
    Ok((0..l.nrows()).partition(|&i| a[i] == b[i]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupResult {
    pub measure: RepMeasure,
    pub k: Option<usize>,
    pub value_agree: f64,
    pub value_disagree: f64,
    pub n_agree: usize,
    pub n_disagree: usize,
}

/// Applies `measure` separately to the rows where the predictions agree and
/// where they disagree. Centering, normalization and neighborhoods are
/// recomputed inside each subset.
pub fn subgroup_similarity(
    r: &Matrix,
    r2: &Matrix,
    l: &Matrix,
    l2: &Matrix,
    measure: RepMeasure,
    k: usize,
    seed: u64,
) -> Result<SubgroupResult> {
    if r.nrows() != r2.nrows() {
        return Err(RepSimError::RowCountMismatch(r.nrows(), r2.nrows()).into());
    }
    if r.nrows() != l.nrows() {
        return Err(StatsError::LengthMismatch(r.nrows(), l.nrows()));
    }
    let (agree, disagree) = subgroup_split(l, l2)?;
    let needed = measure.min_rows(k);
    for (group, idx) in [("agree", &agree), ("disagree", &disagree)] {
        if idx.len() < needed {
            return Err(StatsError::SubgroupTooSmall {
                group,
                size: idx.len(),
                needed,
            });
        }
    }
    let score = |idx: &[usize]| -> Result<f64> {
        Ok(measure
            .evaluate(&r.select_rows(idx), &r2.select_rows(idx), k, seed)?
            .value)
    };
    Ok(SubgroupResult {
        measure,
        k: (measure == RepMeasure::Jaccard).then_some(k),
        value_agree: score(&agree)?,
        value_disagree: score(&disagree)?,
        n_agree: agree.len(),
        n_disagree: disagree.len(),
    })
}

/// Limits and reference expectations for the agreement of two classifiers
/// with known accuracies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementBounds {
    pub min_agreement: f64,
    pub max_agreement: f64,
    /// Errors independent of each other and uniform over the wrong classes.
    pub expected_independent: f64,
    /// The weaker model copies the stronger one except on a flipped-to-wrong
    /// mass equal to the accuracy gap.
    pub expected_correlated: f64,
}

pub fn agreement_bounds(acc_a: f64, acc_b: f64, classes: usize) -> Result<AgreementBounds> {
    for acc in [acc_a, acc_b] {
        if !(0.0..=1.0).contains(&acc) {
            return Err(StatsError::BadAccuracy(acc));
        }
    }
    if classes < 2 {
        return Err(StatsError::BadClassCount(classes));
    }
    let gap = (acc_a - acc_b).abs();
    let max_agreement = 1.0 - gap;
    let min_agreement = (acc_a + acc_b - 1.0).max(0.0);
    let expected_independent = acc_a * acc_b + (1.0 - acc_a) * (1.0 - acc_b) / (classes - 1) as f64;
    Ok(AgreementBounds {
        min_agreement,
        max_agreement,
        expected_independent,
        expected_correlated: max_agreement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn spearman_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman_rho(&x, &[2.0, 5.0, 9.0, 10.0]).unwrap(), 1.0);
        assert_eq!(spearman_rho(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        // no ties: 1 - 6 * sum d^2 / (n (n^2 - 1)) with d = (0, -1, 1, 0)
        let oracle = 1.0 - 6.0 * 2.0 / (4.0 * 15.0);
        assert_eq!(oracle, 0.8);
        assert_abs_diff_eq!(
            spearman_rho(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap(),
            oracle,
            epsilon = 1e-15
        );
    }

    #[test]
    fn spearman_errors() {
        assert_eq!(
            spearman_rho(&[1., 2., 3.], &[1., 1., 1.]),
            Err(StatsError::ConstantVector)
        );
        assert_eq!(
            spearman_rho(&[1., 2., 3.], &[1., 2.]),
            Err(StatsError::LengthMismatch(3, 2))
        );
        assert_eq!(spearman_rho(&[1., 2.], &[1., 2.]), Err(StatsError::TooShort(2)));
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[10., 20., 10., 30.]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn monotone_data_gets_minimal_pvalue() {
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v + 1.0).collect();
        let report = permutation_pvalue(&x, &y, 999, 5).unwrap();
        assert_eq!(report.rho, 1.0);
        assert_eq!(report.p_value, 1.0 / 1000.0);
        assert_eq!(report, permutation_pvalue(&x, &y, 999, 5).unwrap());
        assert_eq!(
            permutation_pvalue(&x, &y, 99, 5),
            Err(StatsError::TooFewPermutations(99))
        );
    }

    #[test]
    fn pvalue_monotone_in_observed() {
        let x: Vec<f64> = (0..15).map(f64::from).collect();
        let y: Vec<f64> = (0..15).map(|i| ((i * 7) % 15) as f64).collect();
        let null = permutation_null(&x, &y, 500, 3).unwrap();
        let mut last = f64::INFINITY;
        for step in 0..=20 {
            let p = pvalue_from_null(&null, step as f64 / 20.0);
            assert!(p <= last);
            last = p;
        }
    }

    #[test]
    fn split_mixed_case() {
        let onehots = |cls: &[usize]| Matrix::from_fn(cls.len(), 3, |i, j| f64::from(u8::from(cls[i] == j)));
        let (a, b) = (onehots(&[0, 1, 2, 0]), onehots(&[0, 2, 2, 1]));
        assert_eq!(subgroup_split(&a, &b).unwrap(), (vec![0, 2], vec![1, 3]));
        assert_eq!(subgroup_split(&a, &a).unwrap(), (vec![0, 1, 2, 3], vec![]));
        let flipped = onehots(&[1, 2, 0, 1]);
        assert_eq!(subgroup_split(&a, &flipped).unwrap(), (vec![], vec![0, 1, 2, 3]));
    }

    #[test]
    fn identical_models_have_empty_disagree_group() {
        let r = Matrix::from_fn(6, 2, |i, j| (i * 2 + j) as f64);
        let l = Matrix::from_fn(6, 2, |i, j| ((i + j) % 2) as f64);
        assert_eq!(
            subgroup_similarity(&r, &r, &l, &l, RepMeasure::Cka, 10, 0),
            Err(StatsError::SubgroupTooSmall {
                group: "disagree",
                size: 0,
                needed: 2
            })
        );
    }

    #[test]
    fn disagreeing_rows_can_be_more_similar() {
        // rows 0..3 agree in prediction, rows 3..6 disagree. Model B copies
        // A's representation on the disagreeing rows and scrambles it on the
        // agreeing ones.
        let r = Matrix::from_row_slice(6, 2, &[1., 0., 0., 1., -1., -1., 2., 1., -1., 3., 0., -2.]);
        let r2 = Matrix::from_row_slice(6, 2, &[0., 1., -1., -1., 1., 0., 2., 1., -1., 3., 0., -2.]);
        let l = Matrix::from_row_slice(6, 2, &[1., 0., 1., 0., 1., 0., 1., 0., 1., 0., 1., 0.]);
        let l2 = Matrix::from_row_slice(6, 2, &[1., 0., 1., 0., 1., 0., 0., 1., 0., 1., 0., 1.]);
        let res = subgroup_similarity(&r, &r2, &l, &l2, RepMeasure::Cka, 10, 0).unwrap();
        assert_eq!((res.n_agree, res.n_disagree), (3, 3));

        // independent evaluation of the CKA formula on each subset
        let cka_direct = |rows: std::ops::Range<usize>| {
            let a = crate::preprocess::center_columns(&r.rows(rows.start, 3).into_owned()).unwrap();
            let b = crate::preprocess::center_columns(&r2.rows(rows.start, 3).into_owned()).unwrap();
            let num = b.tr_mul(&a).norm_squared();
            num / (a.tr_mul(&a).norm() * b.tr_mul(&b).norm())
        };
        assert_abs_diff_eq!(res.value_disagree, cka_direct(3..6), epsilon = 1e-12);
        assert_abs_diff_eq!(res.value_agree, cka_direct(0..3), epsilon = 1e-12);
        assert_abs_diff_eq!(res.value_disagree, 1.0, epsilon = 1e-12);
        assert!(res.value_disagree > res.value_agree);
    }

    #[test]
    fn bounds_examples() {
        let b = agreement_bounds(1.0, 1.0, 10).unwrap();
        assert_eq!(
            [
                b.min_agreement,
                b.max_agreement,
                b.expected_independent,
                b.expected_correlated
            ],
            [1.0; 4]
        );
        let b = agreement_bounds(0.5, 0.5, 2).unwrap();
        assert_eq!(
            (b.min_agreement, b.max_agreement, b.expected_independent),
            (0.0, 1.0, 0.5)
        );
        let b = agreement_bounds(0.6283, 0.5311, 1000).unwrap();
        assert_abs_diff_eq!(b.max_agreement, 0.9028, epsilon = 1e-12);
        assert_abs_diff_eq!(b.min_agreement, 0.1594, epsilon = 1e-12);
        assert_abs_diff_eq!(
            b.expected_independent,
            0.6283 * 0.5311 + 0.3717 * 0.4689 / 999.0,
            epsilon = 1e-15
        );
        assert!(matches!(agreement_bounds(1.2, 0.5, 3), Err(StatsError::BadAccuracy(_))));
        assert!(matches!(
            agreement_bounds(0.2, 0.5, 1),
            Err(StatsError::BadClassCount(1))
        ));
    }

    /// Enumerates every pair of prediction vectors over N inputs (all with
    /// true label 0) and C classes, grouping by the two correct counts.
    #[test]
    fn bounds_match_exhaustive_enumeration() {
        const N: usize = 4;
        const C: usize = 3;
        let vectors: Vec<[usize; N]> = (0..C.pow(N as u32))
            .map(|mut code| {
                let mut v = [0; N];
                for slot in &mut v {
                    *slot = code % C;
                    code /= C;
                }
                v
            })
            .collect();
        let correct = |v: &[usize; N]| v.iter().filter(|&&p| p == 0).count();
        for ca in 0..=N {
            for cb in 0..=N {
                let (mut lo, mut hi, mut sum, mut count) = (usize::MAX, 0, 0usize, 0usize);
                for a in vectors.iter().filter(|v| correct(v) == ca) {
                    for b in vectors.iter().filter(|v| correct(v) == cb) {
                        let agree = a.iter().zip(b).filter(|(x, y)| x == y).count();
                        lo = lo.min(agree);
                        hi = hi.max(agree);
                        sum += agree;
                        count += 1;
                    }
                }
                let (acc_a, acc_b) = (ca as f64 / N as f64, cb as f64 / N as f64);
                let bounds = agreement_bounds(acc_a, acc_b, C).unwrap();
                assert_abs_diff_eq!(bounds.min_agreement, lo as f64 / N as f64, epsilon = 1e-12);
                assert_abs_diff_eq!(bounds.max_agreement, hi as f64 / N as f64, epsilon = 1e-12);
                let mean = sum as f64 / (count * N) as f64;
                assert_abs_diff_eq!(bounds.expected_independent, mean, epsilon = 1e-12);

                // flip-noise model: take any A, flip |ca - cb| of the
                // stronger model's correct rows to a wrong class
                if ca >= cb {
                    for a in vectors.iter().filter(|v| correct(v) == ca) {
                        let mut b = *a;
                        let mut to_flip = ca - cb;
                        for p in b.iter_mut() {
                            if to_flip > 0 && *p == 0 {
                                *p = 1;
                                to_flip -= 1;
                            }
                        }
                        let agree = a.iter().zip(&b).filter(|(x, y)| x == y).count();
                        assert_abs_diff_eq!(bounds.expected_correlated, agree as f64 / N as f64, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn bounds_ordered_and_symmetric(a in 0.0f64..=1.0, b in 0.0f64..=1.0, c in 2usize..2000) {
            let x = agreement_bounds(a, b, c).unwrap();
            let y = agreement_bounds(b, a, c).unwrap();
            prop_assert!(x.min_agreement <= x.expected_independent + 1e-12);
            prop_assert!(x.expected_independent <= x.max_agreement + 1e-12);
            prop_assert!(x.min_agreement <= x.expected_correlated && x.expected_correlated <= x.max_agreement);
            prop_assert!((x.expected_independent - y.expected_independent).abs() < 1e-15);
            prop_assert_eq!(x.min_agreement, y.min_agreement);
            prop_assert_eq!(x.max_agreement, y.max_agreement);
        }

        #[test]
        fn split_partitions_indices(cls_a in prop::collection::vec(0usize..3, 1..30), seed in any::<u64>()) {
            let n = cls_a.len();
            let cls_b: Vec<usize> = cls_a.iter().enumerate().map(|(i, &c)| (c + (seed as usize >> (i % 60)) % 2) % 3).collect();
            let onehots = |cls: &[usize]| Matrix::from_fn(n, 3, |i, j| f64::from(u8::from(cls[i] == j)));
            let (agree, disagree) = subgroup_split(&onehots(&cls_a), &onehots(&cls_b)).unwrap();
            let mut all: Vec<usize> = agree.iter().chain(&disagree).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!(agree.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(disagree.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
