//! Multivariate Gaussian conditioning and log-density evaluation.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{ClvmError, Result};
use crate::num_core::LN_2PI;

/// First jitter magnitude tried when a covariance fails to factor, as a
/// fraction of the mean diagonal.
pub const JITTER_START: f64 = 1e-10;
/// Largest jitter magnitude tried before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// A multivariate Gaussian given by its mean and covariance.
#[derive(Debug, Clone)]
pub struct GaussianSpec {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianSpec {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Condition a joint Gaussian on observing some coordinates.
///
/// `observed_idx` lists the observed coordinate indices (strictly increasing)
/// and `observed_vals` their values; the returned distribution is over the
/// remaining coordinates in their original relative order. The observed
/// block's covariance must be invertible — a singular block is an error
/// rather than something to paper over with jitter, because it means the
/// conditioning query itself is degenerate.
pub fn gaussian_condition(
    joint: &GaussianSpec,
    observed_idx: &[usize],
    observed_vals: &DVector<f64>,
) -> Result<GaussianSpec> {
    let d = joint.dim();
    if joint.cov.nrows() != d || joint.cov.ncols() != d {
        return Err(ClvmError::Dimension(format!(
            "covariance is {}x{} but mean has length {d}",
            joint.cov.nrows(),
            joint.cov.ncols()
        )));
    }
    if observed_idx.len() != observed_vals.len() {
        return Err(ClvmError::Dimension(format!(
            "{} observed indices but {} observed values",
            observed_idx.len(),
            observed_vals.len()
        )));
    }
    for w in observed_idx.windows(2) {
        if w[1] <= w[0] {
            return Err(ClvmError::Config(
                "observed indices must be strictly increasing".into(),
            ));
        }
    }
    if let Some(&last) = observed_idx.last() {
        if last >= d {
            return Err(ClvmError::Dimension(format!(
                "observed index {last} out of range for dimension {d}"
            )));
        }
    }

    let obs: Vec<usize> = observed_idx.to_vec();
    let free: Vec<usize> = (0..d).filter(|i| !obs.contains(i)).collect();
    let (na, nb) = (free.len(), obs.len());

    if nb == 0 {
        return Ok(joint.clone());
    }

    let mut mu_a = DVector::zeros(na);
    let mut mu_b = DVector::zeros(nb);
    let mut saa = DMatrix::zeros(na, na);
    let mut sab = DMatrix::zeros(na, nb);
    let mut sbb = DMatrix::zeros(nb, nb);
    for (i, &fi) in free.iter().enumerate() {
        mu_a[i] = joint.mean[fi];
        for (j, &fj) in free.iter().enumerate() {
            saa[(i, j)] = joint.cov[(fi, fj)];
        }
        for (j, &oj) in obs.iter().enumerate() {
            sab[(i, j)] = joint.cov[(fi, oj)];
        }
    }
    for (i, &oi) in obs.iter().enumerate() {
        mu_b[i] = joint.mean[oi];
        for (j, &oj) in obs.iter().enumerate() {
            sbb[(i, j)] = joint.cov[(oi, oj)];
        }
    }

    let chol = Cholesky::new(sbb).ok_or_else(|| {
        ClvmError::Conditioning(
            "observed block of the covariance is not positive definite".into(),
        )
    })?;
    let resid = observed_vals - &mu_b;
    // Σ_bb⁻¹ applied through the factorization, never formed explicitly.
    let gain = chol.solve(&sab.transpose()); // Σ_bb⁻¹ Σ_ba, shape nb × na
    let mean = &mu_a + gain.transpose() * &resid;
    let cov = &saa - &sab * gain;
    // The Schur complement is symmetric in exact arithmetic; restore it.
    let cov = (&cov + cov.transpose()) * 0.5;

    Ok(GaussianSpec { mean, cov })
}

/// Log-density of `x` under N(mean, cov).
///
/// The covariance is factored by Cholesky. If factorization fails (the
/// matrix is at the edge of positive definiteness), a diagonal jitter is
/// added and escalated ×10 from [`JITTER_START`] to [`JITTER_MAX`] (both
/// scaled by the mean diagonal) before giving up.
pub fn gauss_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let d = mean.len();
    if x.len() != d || cov.nrows() != d || cov.ncols() != d {
        return Err(ClvmError::Dimension(format!(
            "gauss_logpdf: x has length {}, mean {}, cov {}x{}",
            x.len(),
            d,
            cov.nrows(),
            cov.ncols()
        )));
    }
    let chol = cholesky_with_jitter(cov)?;
    let resid = x - mean;
    let half_solve = chol.l().solve_lower_triangular(&resid).ok_or_else(|| {
        ClvmError::Factorization("triangular solve failed in gauss_logpdf".into())
    })?;
    let maha = half_solve.norm_squared();
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (d as f64 * LN_2PI + logdet + maha))
}

/// Sum of Gaussian log-densities over the rows of a matrix, factoring the
/// shared covariance once.
pub fn gauss_logpdf_rows(
    rows: &DMatrix<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<f64> {
    let d = mean.len();
    if rows.ncols() != d || cov.nrows() != d || cov.ncols() != d {
        return Err(ClvmError::Dimension(format!(
            "gauss_logpdf_rows: rows are {}×{}, mean {}, cov {}×{}",
            rows.nrows(),
            rows.ncols(),
            d,
            cov.nrows(),
            cov.ncols()
        )));
    }
    let chol = cholesky_with_jitter(cov)?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let base = -0.5 * (d as f64 * LN_2PI + logdet);
    let mut total = 0.0;
    for i in 0..rows.nrows() {
        let r = rows.row(i).transpose() - mean;
        let half = chol.l().solve_lower_triangular(&r).ok_or_else(|| {
            ClvmError::Factorization("triangular solve failed in gauss_logpdf_rows".into())
        })?;
        total += base - 0.5 * half.norm_squared();
    }
    Ok(total)
}

/// Cholesky factorization with an escalating diagonal jitter fallback.
pub fn cholesky_with_jitter(cov: &DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = Cholesky::new(cov.clone()) {
        return Ok(c);
    }
    let scale = (cov.trace() / cov.nrows() as f64).abs().max(1e-300);
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX {
        let mut bumped = cov.clone();
        for i in 0..cov.nrows() {
            bumped[(i, i)] += jitter * scale;
        }
        if let Some(c) = Cholesky::new(bumped) {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(ClvmError::Factorization(format!(
        "covariance not positive definite even with jitter {JITTER_MAX:.0e} × mean diagonal"
    )))
}
