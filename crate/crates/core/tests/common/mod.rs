//! Brute-force reference implementations shared by the integration and
//! acceptance tests. Everything here works on plain nested vectors with
//! scalar loops so that it shares no numerical code with the library.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simlab_core::Matrix;

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rows(m: &Matrix) -> Rows {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn center(x: &Rows) -> Rows {
    let n = x.len() as f64;
    let d = x[0].len();
    let means: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    x.iter()
        .map(|r| r.iter().zip(&means).map(|(v, m)| v - m).collect())
        .collect()
}

fn frobenius(x: &Rows) -> f64 {
    x.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

fn scale(x: &Rows, s: f64) -> Rows {
    x.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

fn pad(x: &Rows, width: usize) -> Rows {
    x.iter()
        .map(|r| {
            let mut r = r.clone();
            r.resize(width, 0.0);
            r
        })
        .collect()
}

/// Linear CKA through the HSIC double sum over centered Gram matrices.
pub fn cka_hsic(r: &Matrix, r2: &Matrix) -> f64 {
    let (a, b) = (center(&rows(r)), center(&rows(r2)));
    let n = a.len();
    let gram = |x: &Rows| -> Rows {
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| x[i].iter().zip(&x[j]).map(|(p, q)| p * q).sum())
                    .collect()
            })
            .collect()
    };
    let (k, l) = (gram(&a), gram(&b));
    let hsic = |p: &Rows, q: &Rows| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += p[i][j] * q[i][j];
            }
        }
        s
    };
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

/// One-sided Jacobi SVD of a square matrix: returns `(U, sigma, V)` with
/// `M = U diag(sigma) V^T`. Columns of `U` belonging to (numerically) zero
/// singular values are completed to an orthonormal basis.
pub fn jacobi_svd(m: &Rows) -> (Rows, Vec<f64>, Rows) {
    let n = m.len();
    // work column-major: w[j] is column j of M V
    let mut w: Rows = (0..n).map(|j| (0..n).map(|i| m[i][j]).collect()).collect();
    let mut v: Rows = (0..n)
        .map(|j| (0..n).map(|i| f64::from(u8::from(i == j))).collect())
        .collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for cols in [&mut w, &mut v] {
                    for i in 0..n {
                        let (x, y) = (cols[p][i], cols[q][i]);
                        cols[p][i] = c * x - s * y;
                        cols[q][i] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma: Vec<f64> = w.iter().map(|c| dot(c, c).sqrt()).collect();
    let top = sigma.iter().cloned().fold(0.0, f64::max);
    let mut u: Rows = Vec::with_capacity(n);
    let mut zero = Vec::new();
    for (j, col) in w.iter().enumerate() {
        if sigma[j] > 1e-12 * top.max(1e-300) {
            u.push(col.iter().map(|x| x / sigma[j]).collect());
        } else {
            u.push(vec![0.0; n]);
            zero.push(j);
        }
    }
    // Gram-Schmidt completion against the standard basis
    let mut e = 0;
    for &j in &zero {
        loop {
            let mut cand: Vec<f64> = (0..n).map(|i| f64::from(u8::from(i == e))).collect();
            e += 1;
            for (k, other) in u.iter().enumerate() {
                if zero.contains(&k) && k >= j {
                    continue;
                }
                let proj = dot(&cand, other);
                for i in 0..n {
                    cand[i] -= proj * other[i];
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 1e-6 {
                u[j] = cand.iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
    // transpose back to row-major
    let to_rows = |cols: &Rows| -> Rows { (0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect() };
    (to_rows(&u), sigma, to_rows(&v))
}

/// Procrustes similarity from an explicitly aligned residual: pad, center
/// and normalize both inputs, rotate the first by `U V^T` from the SVD of
/// `A^T B`, and measure the remaining Frobenius distance.
pub fn procrustes_aligned(r: &Matrix, r2: &Matrix) -> f64 {
    let width = r.ncols().max(r2.ncols());
    let prep = |m: &Matrix| {
        let c = center(&pad(&rows(m), width));
        let f = frobenius(&c);
        scale(&c, 1.0 / f)
    };
    let (a, b) = (prep(r), prep(r2));
    let n = a.len();
    let cross: Rows = (0..width)
        .map(|i| (0..width).map(|j| (0..n).map(|s| a[s][i] * b[s][j]).sum()).collect())
        .collect();
    let (u, _, v) = jacobi_svd(&cross);
    let rot: Rows = (0..width)
        .map(|i| {
            (0..width)
                .map(|j| (0..width).map(|s| u[i][s] * v[j][s]).sum())
                .collect()
        })
        .collect();
    let mut resid = 0.0;
    for s in 0..n {
        for j in 0..width {
            let aligned: f64 = (0..width).map(|i| a[s][i] * rot[i][j]).sum();
            resid += (aligned - b[s][j]).powi(2);
        }
    }
    (2.0 - resid.sqrt()) / 2.0
}

/// Connected components of the graph with edges `w[i][j] <= t`.
fn components(w: &Rows, t: f64) -> Vec<usize> {
    let n = w.len();
    let mut label = vec![usize::MAX; n];
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        label[s] = s;
        let mut stack = vec![s];
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if label[j] == usize::MAX && w[i][j] <= t {
                    label[j] = s;
                    stack.push(j);
                }
            }
        }
    }
    label
}

/// Directed divergence by exhaustive threshold sweep. For every threshold
/// of `M = min(d, target)` the components before and after are compared;
/// each pair of clusters that fuse opens a bar, which closes at the
/// smallest `target` threshold connecting them. Returns `None` when `M`
/// has repeated off-diagonal values, where simultaneous merges make the
/// decomposition ambiguous.
pub fn rtd_sweep(d: &Matrix, target: &Matrix) -> Option<f64> {
    let (d, t) = (rows(d), rows(target));
    let n = d.len();
    let m: Rows = (0..n).map(|i| (0..n).map(|j| d[i][j].min(t[i][j])).collect()).collect();
    let mut levels: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| m[i][j])
        .collect();
    levels.sort_by(f64::total_cmp);
    if levels.windows(2).any(|w| w[0] == w[1]) {
        return None;
    }
    let mut t_levels: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| t[i][j])
        .collect();
    t_levels.sort_by(f64::total_cmp);
    t_levels.dedup();

    let mut total = 0.0;
    let mut before = components(&m, -1.0);
    for &level in &levels {
        let after = components(&m, level);
        // the (at most one) pair of old clusters that fused at this level
        let mut roots: Vec<usize> = (0..n).map(|i| before[i]).collect();
        roots.sort();
        roots.dedup();
        let mut merged: Vec<(usize, usize)> = Vec::new();
        for (x, &ra) in roots.iter().enumerate() {
            for &rb in &roots[x + 1..] {
                if after[ra] == after[rb] {
                    merged.push((ra, rb));
                }
            }
        }
        if let Some(&(ra, rb)) = merged.first() {
            assert_eq!(merged.len(), 1, "distinct levels merge exactly two clusters");
            let a: Vec<usize> = (0..n).filter(|&i| before[i] == ra).collect();
            let b: Vec<usize> = (0..n).filter(|&i| before[i] == rb).collect();
            let death = t_levels
                .iter()
                .copied()
                .find(|&tl| {
                    let c = components(&t, tl);
                    a.iter().any(|&i| b.iter().any(|&j| c[i] == c[j]))
                })
                .expect("the complete graph is connected at its largest weight");
            total += death - level;
        }
        before = after;
    }
    Some(total)
}

/// Multinomial logistic regression by full-batch gradient descent with
/// a fixed step; a slow but plainly correct fit of the same convex
/// objective the probe minimizes. Returns `(weight C×D, bias C)`.
pub fn logistic_fit(x: &Rows, y: &[usize], classes: usize, steps: usize, lr: f64) -> (Rows, Vec<f64>) {
    let (n, d) = (x.len(), x[0].len());
    let mut w = vec![vec![0.0; d]; classes];
    let mut b = vec![0.0; classes];
    for _ in 0..steps {
        let mut gw = vec![vec![0.0; d]; classes];
        let mut gb = vec![0.0; classes];
        for (xi, &yi) in x.iter().zip(y) {
            let z: Vec<f64> = (0..classes)
                .map(|c| b[c] + w[c].iter().zip(xi).map(|(p, q)| p * q).sum::<f64>())
                .collect();
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..classes {
                let g = e[c] / s - f64::from(u8::from(c == yi));
                gb[c] += g / n as f64;
                for k in 0..d {
                    gw[c][k] += g * xi[k] / n as f64;
                }
            }
        }
        for c in 0..classes {
            b[c] -= lr * gb[c];
            for k in 0..d {
                w[c][k] -= lr * gw[c][k];
            }
        }
    }
    (w, b)
}

pub fn logistic_predict(w: &Rows, b: &[f64], x: &Rows) -> Vec<usize> {
    x.iter()
        .map(|xi| {
            let mut best = (f64::NEG_INFINITY, 0);
            for c in 0..w.len() {
                let z = b[c] + w[c].iter().zip(xi).map(|(p, q)| p * q).sum::<f64>();
                if z > best.0 {
                    best = (z, c);
                }
            }
            best.1
        })
        .collect()
}

/// Well-separated Gaussian blobs: `per_class` points around each of
/// `classes` centroids placed `gap` apart along distinct axes.
pub fn blobs(classes: usize, per_class: usize, dim: usize, gap: f64, rng: &mut impl Rng) -> (Matrix, Vec<usize>) {
    assert!(classes <= dim);
    let n = classes * per_class;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let m = Matrix::from_fn(n, dim, |i, j| {
        let centre = if j == labels[i] { gap } else { 0.0 };
        centre + rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    (m, labels)
}
