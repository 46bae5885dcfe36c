//! Topology divergence between two representations from their degree-0
//! cross-barcode.
//!
//! Both inputs are centered and scaled to unit Frobenius norm, then turned
//! into Euclidean distance matrices `D` and `D'`. Single linkage on the
//! elementwise minimum `M = min(D, D')` produces N - 1 merges. Every merge of
//! two clusters `A` and `B` at threshold `t` opens a bar that closes at the
//! first threshold where some point of `A` and some point of `B` are
//! connected under `D'`. Since `M <= D'`, bars have non-negative length; the
//! directed divergence is the total bar length and the reported value
//! averages both directions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_rows, RepSimError, Result};
use crate::preprocess::{center_columns, unit_frobenius};
use crate::Matrix;

/// Largest number of rows handled in one filtration. Larger inputs are split
/// into disjoint random batches and the divergences averaged.
pub const RTD_BATCH_SIZE: usize = 500;

/// One single-linkage merge: clusters rooted at `root_a` and `root_b` join at
/// `threshold`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Merge {
    pub threshold: f64,
    pub root_a: usize,
    pub root_b: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MergeTree {
    pub merges: Vec<Merge>,
}

/// A cross-barcode interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bar {
    pub birth: f64,
    pub death: f64,
}

impl Bar {
    pub fn length(&self) -> f64 {
        self.death - self.birth
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            members: (0..n).map(|i| vec![i]).collect(),
        }
    }

    fn find(&mut self, mut node: usize) -> usize {
        let mut root = node;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[node] != root {
            let next = self.parent[node];
            self.parent[node] = root;
            node = next;
        }
        root
    }

    /// Merges the two (distinct) roots, smaller cluster into larger, and
    /// returns the surviving root.
    fn union(&mut self, a: usize, b: usize) -> usize {
        let (keep, absorb) = if self.members[a].len() >= self.members[b].len() {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[absorb] = keep;
        let moved = std::mem::take(&mut self.members[absorb]);
        self.members[keep].extend(moved);
        keep
    }
}

fn check_distances(d: &Matrix) -> Result<()> {
    if d.nrows() != d.ncols() {
        return Err(RepSimError::NotSquare(d.nrows(), d.ncols()));
    }
    let n = d.nrows();
    for i in 0..n {
        for j in 0..n {
            let v = d[(i, j)];
            if !v.is_finite() || v < 0.0 {
                return Err(RepSimError::NegativeDistance(i, j));
            }
            if j > i && v != d[(j, i)] {
                return Err(RepSimError::AsymmetricMatrix(i, j));
            }
        }
    }
    Ok(())
}

/// Edges of the complete graph sorted by weight; equal weights keep
/// lexicographic `(i, j)` order.
fn sorted_edges(d: &Matrix) -> Vec<(f64, usize, usize)> {
    let n = d.nrows();
    let mut edges = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            edges.push((d[(i, j)], i, j));
        }
    }
    edges.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    edges
}

/// Kruskal sweep. `on_merge` sees the threshold and the member lists of the
/// two clusters before they are joined.
fn sweep(d: &Matrix, mut on_merge: impl FnMut(f64, usize, usize, &[usize], &[usize])) {
    let n = d.nrows();
    let mut sets = DisjointSet::new(n);
    let mut remaining = n.saturating_sub(1);
    for (w, i, j) in sorted_edges(d) {
        if remaining == 0 {
            break;
        }
        let (ri, rj) = (sets.find(i), sets.find(j));
        if ri == rj {
            continue;
        }
        on_merge(w, ri, rj, &sets.members[ri], &sets.members[rj]);
        sets.union(ri, rj);
        remaining -= 1;
    }
}

/// Single-linkage merge thresholds of a distance matrix.
pub fn single_linkage_merges(d: &Matrix) -> Result<MergeTree> {
    check_distances(d)?;
    let mut merges = Vec::with_capacity(d.nrows().saturating_sub(1));
    sweep(d, |threshold, root_a, root_b, _, _| {
        merges.push(Merge {
            threshold,
            root_a,
            root_b,
        })
    });
    Ok(MergeTree { merges })
}

/// Subdominant ultrametric: entry (a, b) is the smallest threshold at which
/// `a` and `b` share a single-linkage cluster.
fn ultrametric(d: &Matrix) -> Matrix {
    let n = d.nrows();
    let mut u = Matrix::zeros(n, n);
    sweep(d, |t, _, _, left, right| {
        for &a in left {
            for &b in right {
                u[(a, b)] = t;
                u[(b, a)] = t;
            }
        }
    });
    u
}

/// Bars of the directed cross-barcode: clusters merged under
/// `min(d, target)`, closed by connectivity under `target`.
pub fn directed_bars(d: &Matrix, target: &Matrix) -> Result<Vec<Bar>> {
    check_distances(d)?;
    check_distances(target)?;
    if d.shape() != target.shape() {
        return Err(RepSimError::RowCountMismatch(d.nrows(), target.nrows()));
    }
    let joint = d.zip_map(target, f64::min);
    let connected = ultrametric(target);
    let mut bars = Vec::with_capacity(d.nrows().saturating_sub(1));
    sweep(&joint, |birth, _, _, left, right| {
        let death = left
            .iter()
            .flat_map(|&a| right.iter().map(move |&b| (a, b)))
            .map(|(a, b)| connected[(a, b)])
            .fold(f64::INFINITY, f64::min);
        bars.push(Bar { birth, death });
    });
    Ok(bars)
}

/// Total bar length of [`directed_bars`], summed in merge order.
pub fn directed_rtd(d: &Matrix, target: &Matrix) -> Result<f64> {
    Ok(directed_bars(d, target)?.iter().map(Bar::length).sum())
}

/// Pairwise Euclidean distances between rows, accumulated coordinate-wise.
pub fn distance_matrix(m: &Matrix) -> Matrix {
    let n = m.nrows();
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[(i, j)] = s.sqrt();
            d[(j, i)] = d[(i, j)];
        }
    }
    d
}

fn normalized_distances(m: &Matrix) -> Result<Matrix> {
    Ok(distance_matrix(&unit_frobenius(center_columns(m)?.as_matrix())?))
}

fn symmetric_rtd(r: &Matrix, r2: &Matrix) -> Result<f64> {
    let (d, d2) = (normalized_distances(r)?, normalized_distances(r2)?);
    Ok(0.5 * (directed_rtd(&d, &d2)? + directed_rtd(&d2, &d)?))
}

/// Symmetric topology divergence; non-negative, zero for equivalent inputs.
/// Inputs with more than [`RTD_BATCH_SIZE`] rows are split into seeded
/// random batches.
pub fn rtd(r: &Matrix, r2: &Matrix, seed: u64) -> Result<f64> {
    rtd_with_batch_size(r, r2, RTD_BATCH_SIZE, seed)
}

pub fn rtd_with_batch_size(r: &Matrix, r2: &Matrix, batch_size: usize, seed: u64) -> Result<f64> {
    check_rows(r, r2, 2)?;
    let n = r.nrows();
    if n <= batch_size {
        return symmetric_rtd(r, r2);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let batches = n.div_ceil(batch_size);
    // near-equal sizes, differing by at most one row
    let (base, extra) = (n / batches, n % batches);
    let mut start = 0;
    let mut total = 0.0;
    for b in 0..batches {
        let len = base + usize::from(b < extra);
        let idx = &order[start..start + len];
        start += len;
        total += symmetric_rtd(&r.select_rows(idx), &r2.select_rows(idx))?;
    }
    Ok(total / batches as f64)
}
