//! Cholesky helpers with the shared jitter schedule.
//!
//! A failed factorization is retried with `1e-8·scale`, `1e-7·scale` and
//! `1e-6·scale` added to the diagonal before giving up.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

pub(crate) const JITTER_BASE: f64 = 1e-8;
pub(crate) const JITTER_RETRIES: usize = 3;

pub(crate) fn cholesky_with_jitter(m: DMatrix<f64>, scale: f64) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let mut jitter = JITTER_BASE * scale;
    for _ in 0..JITTER_RETRIES {
        let mut mj = m.clone();
        for i in 0..n {
            mj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(mj) {
            log::debug!("cholesky of {n}x{n} needed jitter {jitter:e}");
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "{n}x{n} covariance not positive definite after jitter up to {:e}",
        jitter / 10.0
    )))
}

/// In-place lower Cholesky of a row-major `n×n` buffer. Only the lower
/// triangle is read and written. Returns false when not positive definite.
pub(crate) fn chol_in_place(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Factors the unit-scale matrix in `work` (copied from `src`), applying the
/// jitter schedule on failure.
pub(crate) fn small_chol_with_jitter(src: &[f64], work: &mut [f64], n: usize) -> Result<()> {
    work.copy_from_slice(src);
    if chol_in_place(work, n) {
        return Ok(());
    }
    let mut jitter = JITTER_BASE;
    for _ in 0..JITTER_RETRIES {
        work.copy_from_slice(src);
        for i in 0..n {
            work[i * n + i] += jitter;
        }
        if chol_in_place(work, n) {
            return Ok(());
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "{n}x{n} conditioning-set covariance not positive definite after jitter"
    )))
}

/// Solves `L z = b` in place for the lower factor produced by [`chol_in_place`].
pub(crate) fn forward_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}
