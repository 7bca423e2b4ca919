//! Small dense linear-algebra helpers shared by the filter, the EM engine and
//! the baselines.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, TascError};

/// Jitter added to the diagonal when a covariance fails its PD check.
pub const JITTER: f64 = 1e-9;

/// Largest condition number accepted before a solve is declared singular.
pub const MAX_CONDITION: f64 = 1e12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factorisation of a symmetric matrix, retrying once with
/// `JITTER * I` added when the plain factorisation fails.
pub fn cholesky_jittered(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    log::warn!("{what}: Cholesky failed, retrying with {JITTER:e} jitter");
    let n = m.nrows();
    Cholesky::new(m + DMatrix::identity(n, n) * JITTER)
        .ok_or_else(|| TascError::numerical(0, format!("{what} is not positive definite")))
}

/// Ratio of the largest to smallest Cholesky pivot squared; a cheap
/// lower bound on the 2-norm condition number of an SPD matrix.
pub fn cholesky_condition(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..l.nrows() {
        let p = l[(i, i)] * l[(i, i)];
        lo = lo.min(p);
        hi = hi.max(p);
    }
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Cholesky factor of an SPD operand that is about to be inverted. No
/// jitter: a failed factorisation or a condition number above
/// `MAX_CONDITION` is reported as singular.
pub fn spd_factor(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let c = Cholesky::new(symmetrize(m))
        .ok_or_else(|| TascError::numerical(0, format!("{what} is not positive definite")))?;
    let cond = cholesky_condition(&c);
    if !(cond <= MAX_CONDITION) {
        return Err(TascError::numerical(
            0,
            format!("{what} is numerically singular (condition ~{cond:.2e})"),
        ));
    }
    Ok(c)
}

/// Inverse of an SPD matrix through its Cholesky factor.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let c = spd_factor(m, what)?;
    Ok(symmetrize(&c.inverse()))
}

/// Solve `m x = b` for a general square `m` by LU.
pub fn lu_solve(m: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| TascError::numerical(0, format!("{what} is singular")))
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

pub fn is_diagonal(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

/// Keep only the diagonal of a square matrix.
pub fn diag_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(&m.diagonal())
}

/// Sum of values independent of their order: terms are sorted before
/// accumulation, so any permutation of the input gives the same bits.
pub fn order_free_sum(terms: &mut [f64]) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Gram matrix `X Xᵀ` (rows of `x` are variables, columns are samples) with
/// each entry accumulated by [`order_free_sum`], so reordering the columns
/// of `x` leaves the result bit-for-bit unchanged.
pub fn order_free_gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, t) = x.shape();
    let mut g = DMatrix::zeros(n, n);
    let mut buf = vec![0.0; t];
    for i in 0..n {
        for j in i..n {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = x[(i, k)] * x[(j, k)];
            }
            let s = order_free_sum(&mut buf);
            g[(i, j)] = s;
            g[(j, i)] = s;
        }
    }
    g
}

/// `X y` with order-free accumulation over the columns of `x`.
pub fn order_free_cross(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let (n, t) = x.shape();
    let mut buf = vec![0.0; t];
    DVector::from_fn(n, |i, _| {
        for (k, b) in buf.iter_mut().enumerate() {
            *b = x[(i, k)] * y[k];
        }
        order_free_sum(&mut buf)
    })
}
