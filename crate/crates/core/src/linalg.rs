//! Singular components of the reshaped activation matrix.
//!
//! The CAM only needs one or two right singular vectors of a tall
//! `(H*W) x C` matrix, so [`top_component`] runs power iteration on the
//! `C x C` Gram matrix with Hotelling deflation. [`jacobi_svd`] is a full
//! one-sided Jacobi SVD kept as an independent reference for small inputs.

use thiserror::Error;

use crate::tensor::Matrix;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 1000;

/// Largest component index accepted by [`top_component`].
pub const MAX_COMPONENT: usize = 8;

const JACOBI_OFF_DIAG_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 60;
/// Relative size below which a deflated Gram image counts as zero.
const NULL_IMAGE_TOL: f64 = 1e-12;
/// Stalled iterations tolerated before the working matrix is squared.
const SQUARE_EVERY: usize = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: matrix is entirely zero")]
    DegenerateInput,
    #[error("power iteration for component {component} did not converge after {iterations} iterations")]
    NoConvergence {
        component: usize,
        iterations: usize,
        last: Vec<f64>,
    },
}

/// A singular value and its right singular vector.
///
/// `v` is unit length and its largest-magnitude entry (lowest index on ties)
/// is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdComponent {
    pub index: usize,
    pub sigma: f64,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullSvd {
    /// `S x r`, orthonormal columns.
    pub u: Matrix<f64>,
    /// Nonincreasing, length `r = min(S, C)`.
    pub sigmas: Vec<f64>,
    /// `C x r`, orthonormal columns.
    pub v: Matrix<f64>,
}

impl FullSvd {
    /// `U * diag(sigmas) * V^T`.
    pub fn reconstruct(&self) -> Matrix<f64> {
        let r = self.sigmas.len();
        Matrix::from_fn(self.u.rows(), self.v.rows(), |i, j| {
            (0..r)
                .map(|t| self.u.get(i, t) * self.sigmas[t] * self.v.get(j, t))
                .sum()
        })
    }
}

/// `M^T M` accumulated in `f64`. Only the upper triangle is summed; the lower
/// triangle is a mirror, so the result is exactly symmetric.
pub fn gram(m: &Matrix<f32>) -> Matrix<f64> {
    let c = m.cols();
    let mut g = vec![0.0f64; c * c];
    for r in 0..m.rows() {
        let row = m.row(r);
        for a in 0..c {
            let ra = row[a] as f64;
            if ra == 0.0 {
                continue;
            }
            let dst = &mut g[a * c..(a + 1) * c];
            for b in a..c {
                dst[b] += ra * row[b] as f64;
            }
        }
    }
    for a in 0..c {
        for b in 0..a {
            g[a * c + b] = g[b * c + a];
        }
    }
    Matrix::from_vec(c, c, g).expect("gram dims are nonzero")
}

/// Makes the largest-magnitude entry positive (first one on ties).
pub fn normalize_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn sym_matvec(g: &[f64], n: usize, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&g[i * n..(i + 1) * n], x);
    }
}

/// `||M v||_2` with `f64` accumulation.
fn image_norm(m: &Matrix<f32>, v: &[f64]) -> f64 {
    (0..m.rows())
        .map(|r| {
            let s: f64 = m.row(r).iter().zip(v).map(|(&a, b)| a as f64 * b).sum();
            s * s
        })
        .sum::<f64>()
        .sqrt()
}

/// Start vectors in order: normalized all-ones, then `e_1, e_2, ...`.
fn start_candidates(n: usize) -> impl Iterator<Item = Vec<f64>> {
    let ones = vec![1.0 / (n as f64).sqrt(); n];
    std::iter::once(ones).chain((0..n).map(move |i| {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        e
    }))
}

/// Unit vector orthogonal to `found`, used when the deflated spectrum is
/// numerically zero.
fn orthogonal_complement_vector(found: &[SvdComponent], n: usize) -> Vec<f64> {
    for mut x in start_candidates(n) {
        for comp in found {
            let p = dot(&x, &comp.v);
            x.iter_mut().zip(&comp.v).for_each(|(a, b)| *a -= p * b);
        }
        let nx = norm(&x);
        if nx > 1e-6 {
            x.iter_mut().for_each(|a| *a /= nx);
            return x;
        }
    }
    // n <= found.len(): no complement exists
    let mut e = vec![0.0; n];
    e[0] = 1.0;
    e
}

/// The `k`-th singular value and right singular vector of `m` (1-based).
///
/// Components `1..k` are extracted first and deflated out of the Gram matrix
/// (`G <- G - sigma_j^2 v_j v_j^T`). Iteration stops once consecutive unit
/// iterates satisfy `||v_{t+1} - s v_t|| < tol`, `s` the sign of their inner
/// product.
pub fn top_component(
    m: &Matrix<f32>,
    k: usize,
    tol: f64,
    max_iter: usize,
) -> Result<SvdComponent, LinalgError> {
    let c = m.cols();
    if k == 0 || k > c || k > MAX_COMPONENT {
        return Err(LinalgError::InvalidArgument(format!(
            "component {k} outside 1..={}",
            c.min(MAX_COMPONENT)
        )));
    }
    if !(tol > 0.0) {
        return Err(LinalgError::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    if max_iter == 0 {
        return Err(LinalgError::InvalidArgument("max_iter must be at least 1".into()));
    }
    if m.data().iter().all(|&x| x == 0.0) {
        return Err(LinalgError::DegenerateInput);
    }

    let g = gram(m);
    let scale = (0..c).map(|i| g.get(i, i)).fold(0.0f64, f64::max);
    let null_tol = NULL_IMAGE_TOL * scale;
    let mut deflated = g.data().to_vec();
    let mut found: Vec<SvdComponent> = Vec::with_capacity(k);
    let mut w = vec![0.0; c];
    for index in 1..=k {
        if let Some(prev) = found.last() {
            let lambda = prev.sigma * prev.sigma;
            for a in 0..c {
                for b in 0..c {
                    deflated[a * c + b] -= lambda * prev.v[a] * prev.v[b];
                }
            }
        }

        let start = start_candidates(c).find(|x| {
            sym_matvec(&deflated, c, x, &mut w);
            norm(&w) >= null_tol
        });

        let mut v = match start {
            None => orthogonal_complement_vector(&found, c),
            Some(v) => match power_iterate(&deflated, c, v, tol, max_iter, null_tol) {
                Ok(v) => v,
                Err((iterations, mut last)) => {
                    normalize_sign(&mut last);
                    return Err(LinalgError::NoConvergence {
                        component: index,
                        iterations,
                        last,
                    });
                }
            },
        };
        normalize_sign(&mut v);
        let sigma = image_norm(m, &v);
        found.push(SvdComponent { index, sigma, v });
    }
    Ok(found.pop().expect("k >= 1"))
}

/// Power iteration on a symmetric matrix until successive iterates differ by
/// less than `tol` in Euclidean norm (after aligning signs).
///
/// When the iterates stall for [`SQUARE_EVERY`] steps the working matrix is
/// replaced by its normalized square, which keeps the eigenvectors and squares
/// the eigenvalue ratio. Small spectral gaps therefore cost a few `O(n^3)`
/// squarings instead of thousands of matrix-vector products.
fn power_iterate(
    g: &[f64],
    n: usize,
    mut v: Vec<f64>,
    tol: f64,
    max_iter: usize,
    null_tol: f64,
) -> Result<Vec<f64>, (usize, Vec<f64>)> {
    let mut work = std::borrow::Cow::Borrowed(g);
    let mut null_tol = null_tol;
    let mut w = vec![0.0; n];
    for t in 1..=max_iter {
        sym_matvec(&work, n, &v, &mut w);
        let nw = norm(&w);
        if nw < null_tol {
            // remaining spectrum is numerically zero
            return Ok(v);
        }
        let sign = if dot(&v, &w) < 0.0 { -1.0 } else { 1.0 };
        w.iter_mut().for_each(|x| *x /= nw);
        let chord = v
            .iter()
            .zip(&w)
            .map(|(a, b)| (b - sign * a).powi(2))
            .sum::<f64>()
            .sqrt();
        std::mem::swap(&mut v, &mut w);
        if chord < tol {
            return Ok(v);
        }
        if t % SQUARE_EVERY == 0 {
            work = std::borrow::Cow::Owned(normalized_square(&work, n));
            null_tol = NULL_IMAGE_TOL;
        }
    }
    Err((max_iter, v))
}

/// `A^2 / max|diag(A^2)|` for symmetric `A`; rows are computed in parallel,
/// each entry by the same sequential dot product, so results are
/// deterministic.
fn normalized_square(a: &[f64], n: usize) -> Vec<f64> {
    use rayon::prelude::*;
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let ai = &a[i * n..(i + 1) * n];
        for (j, o) in row.iter_mut().enumerate().skip(i) {
            // A symmetric: column j equals row j
            *o = dot(ai, &a[j * n..(j + 1) * n]);
        }
    });
    for i in 0..n {
        for j in 0..i {
            out[i * n + j] = out[j * n + i];
        }
    }
    let scale = (0..n).map(|i| out[i * n + i]).fold(0.0f64, f64::max);
    if scale > 0.0 {
        out.iter_mut().for_each(|x| *x /= scale);
    }
    out
}

/// Full SVD by one-sided Jacobi rotations. Intended for tests and small
/// matrices; always terminates after at most 60 sweeps.
pub fn jacobi_svd(m: &Matrix<f32>) -> FullSvd {
    let (s, c) = (m.rows(), m.cols());
    let as_f64 = |mat: &Matrix<f32>| Matrix::from_fn(mat.rows(), mat.cols(), |i, j| mat.get(i, j) as f64);
    if s >= c {
        let (u, sigmas, v) = one_sided_jacobi(as_f64(m));
        FullSvd { u, sigmas, v }
    } else {
        // M^T = U' S V'^T  =>  M = V' S U'^T
        let (u_t, sigmas, v_t) = one_sided_jacobi(as_f64(&m.transpose()));
        FullSvd {
            u: v_t,
            sigmas,
            v: u_t,
        }
    }
}

/// Jacobi on a tall `rows >= cols` matrix; returns `(U, sigmas, V)` with
/// `U: rows x cols`, `V: cols x cols`.
fn one_sided_jacobi(a: Matrix<f64>) -> (Matrix<f64>, Vec<f64>, Matrix<f64>) {
    let (rows, n) = (a.rows(), a.cols());
    // column-major working copies
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_OFF_DIAG_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                rotate(&mut cols, p, q, cs, sn);
                rotate(&mut vcols, p, q, cs, sn);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(usize, f64)> = cols.iter().map(|col| norm(col)).enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let sigma_max = order.first().map_or(0.0, |o| o.1);
    let rank_tol = sigma_max * (rows.max(n) as f64) * f64::EPSILON;

    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut sigmas = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    for &(j, sigma) in &order {
        if sigma > rank_tol {
            u_cols.push(Some(cols[j].iter().map(|x| x / sigma).collect()));
        } else {
            u_cols.push(None);
        }
        sigmas.push(sigma);
        v_cols.push(vcols[j].clone());
    }
    let u_cols = complete_orthonormal(u_cols, rows);

    let u = Matrix::from_fn(rows, n, |i, j| u_cols[j][i]);
    let v = Matrix::from_fn(n, n, |i, j| v_cols[j][i]);
    (u, sigmas, v)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, cs: f64, sn: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = cs * xp - sn * yq;
        *y = sn * xp + cs * yq;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other column.
fn complete_orthonormal(cols: Vec<Option<Vec<f64>>>, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut next_e = 0;
    cols.into_iter()
        .map(|col| match col {
            Some(c) => c,
            None => loop {
                let mut x = vec![0.0; dim];
                x[next_e % dim] = 1.0;
                next_e += 1;
                for b in &basis {
                    let p = dot(&x, b);
                    x.iter_mut().zip(b).for_each(|(a, bb)| *a -= p * bb);
                }
                let nx = norm(&x);
                if nx > 1e-6 {
                    x.iter_mut().for_each(|a| *a /= nx);
                    basis.push(x.clone());
                    break x;
                }
            },
        })
        .collect()
}
