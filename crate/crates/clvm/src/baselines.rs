//! Reference methods: probabilistic PCA in closed form and contrastive PCA.
//!
//! These serve two purposes: they are the comparison methods the latent
//! models are judged against, and the PPCA closed form doubles as an exact
//! oracle for the EM path's reduction cases (no target loading ⇒ pooled
//! PPCA; no shared loading ⇒ PPCA of the target set with a noise floor tied
//! to the background).

use nalgebra::{DMatrix, DVector};

use crate::data_model::ContrastivePair;
use crate::error::{ClvmError, Result};
use crate::num_core::gaussian::gauss_logpdf_rows;
use crate::num_core::sym_eig;

/// Maximum-likelihood PPCA solution.
#[derive(Debug, Clone)]
pub struct PpcaFit {
    /// d×q loading: top-q eigenvectors scaled by √(λ − σ²).
    pub loading: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// Residual variance: mean of the discarded eigenvalues.
    pub sigma2: f64,
    /// All eigenvalues of the sample covariance, descending.
    pub eigenvalues: DVector<f64>,
}

/// Closed-form maximum-likelihood PPCA.
///
/// Eigendecomposes the sample covariance (1/n normalization, centered at the
/// sample mean); the noise variance is the mean of the d−q trailing
/// eigenvalues and the loading columns are the top-q eigenvectors scaled by
/// √(λᵢ − σ²).
pub fn fit_ppca(rows: &DMatrix<f64>, q: usize) -> Result<PpcaFit> {
    let (n, d) = (rows.nrows(), rows.ncols());
    if q >= d {
        return Err(ClvmError::Config(format!(
            "PPCA needs q < d (got q = {q}, d = {d})"
        )));
    }
    if n <= q {
        return Err(ClvmError::Config(format!(
            "PPCA needs more rows than components (got n = {n}, q = {q})"
        )));
    }
    let mean = rows.row_mean().transpose();
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let c = rows.row(i).transpose() - &mean;
        cov += &c * c.transpose();
    }
    cov /= n as f64;
    let eig = sym_eig(&cov)?;
    if eig.values[0] < 1e-12 {
        return Err(ClvmError::Factorization(
            "sample covariance is numerically zero; PPCA is degenerate".into(),
        ));
    }
    let sigma2 = eig.values.iter().skip(q).sum::<f64>() / (d - q) as f64;
    let mut loading = DMatrix::zeros(d, q);
    for j in 0..q {
        let scale = (eig.values[j] - sigma2).max(0.0).sqrt();
        loading.set_column(j, &(eig.vectors.column(j) * scale));
    }
    Ok(PpcaFit {
        loading,
        mean,
        sigma2,
        eigenvalues: eig.values,
    })
}

/// Marginal log-likelihood of rows under a PPCA fit: N(mean, LLᵀ + σ²I).
pub fn ppca_log_likelihood(rows: &DMatrix<f64>, fit: &PpcaFit) -> Result<f64> {
    let d = fit.mean.len();
    let mut cov = &fit.loading * fit.loading.transpose();
    for i in 0..d {
        cov[(i, i)] += fit.sigma2;
    }
    gauss_logpdf_rows(rows, &fit.mean, &cov)
}

/// Contrastive PCA output.
#[derive(Debug, Clone)]
pub struct CpcaResult {
    pub alpha: f64,
    /// d×q orthonormal projection: top eigenvectors of the contrastive
    /// covariance by algebraic eigenvalue.
    pub projection: DMatrix<f64>,
    /// All eigenvalues of the contrastive covariance, descending.
    pub eigenvalues: DVector<f64>,
    /// Centered target rows projected onto the subspace, n×q.
    pub latents: DMatrix<f64>,
}

fn centered_covariance(rows: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (rows.nrows(), rows.ncols());
    let mean = rows.row_mean().transpose();
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let c = rows.row(i).transpose() - &mean;
        cov += &c * c.transpose();
    }
    cov /= n as f64;
    (mean, cov)
}

/// Contrastive PCA: eigendecompose `Cov(target) − α·Cov(background)`.
///
/// Both covariances are centered at their own set means. The contrastive
/// matrix is typically indefinite; directions are ranked by algebraic
/// eigenvalue, so the leading ones maximize target variance net of
/// α-weighted background variance.
pub fn fit_cpca(pair: &ContrastivePair, alpha: f64, q: usize) -> Result<CpcaResult> {
    if alpha < 0.0 {
        return Err(ClvmError::Config(format!("alpha must be ≥ 0, got {alpha}")));
    }
    let d = pair.d();
    if q > d {
        return Err(ClvmError::Config(format!(
            "cannot extract q = {q} directions in d = {d}"
        )));
    }
    if pair.has_missing() {
        return Err(ClvmError::MissingData("cPCA needs complete data".into()));
    }
    let (mean_t, cov_t) = centered_covariance(&pair.target);
    let (_, cov_b) = centered_covariance(&pair.background);
    let contrast = cov_t - cov_b * alpha;
    let eig = sym_eig(&contrast)?;
    let projection = eig.vectors.columns(0, q).clone_owned();
    let mut centered = pair.target.clone();
    for i in 0..pair.n() {
        for j in 0..d {
            centered[(i, j)] -= mean_t[j];
        }
    }
    let latents = centered * &projection;
    Ok(CpcaResult {
        alpha,
        projection,
        eigenvalues: eig.values,
        latents,
    })
}

/// The α → ∞ limit of contrastive PCA, constructed explicitly.
///
/// Projects the centered target onto the null space of the background
/// sample covariance, then takes the top-q principal directions of the
/// projected data, mapped back to the ambient space (d×q, orthonormal).
/// Requires the background covariance to be rank deficient — with a
/// full-rank background the limit would be the zero subspace and the
/// construction is refused.
pub fn cpca_nullspace_limit(pair: &ContrastivePair, q: usize) -> Result<DMatrix<f64>> {
    if pair.has_missing() {
        return Err(ClvmError::MissingData("cPCA needs complete data".into()));
    }
    let d = pair.d();
    let (_, cov_t) = centered_covariance(&pair.target);
    let (_, cov_b) = centered_covariance(&pair.background);
    let eig_b = sym_eig(&cov_b)?;
    let scale = eig_b.values[0].max(1e-300);
    let null_dims: Vec<usize> = (0..d)
        .filter(|&i| eig_b.values[i] <= 1e-9 * scale)
        .collect();
    if null_dims.is_empty() {
        return Err(ClvmError::Config(
            "background covariance is full rank; the large-α limit is degenerate".into(),
        ));
    }
    if q > null_dims.len() {
        return Err(ClvmError::Config(format!(
            "requested q = {q} directions but the background null space has dimension {}",
            null_dims.len()
        )));
    }
    let mut basis = DMatrix::zeros(d, null_dims.len());
    for (c, &i) in null_dims.iter().enumerate() {
        basis.set_column(c, &eig_b.vectors.column(i));
    }
    // PCA of the target inside the null space.
    let projected_cov = basis.transpose() * cov_t * &basis;
    let eig_p = sym_eig(&projected_cov)?;
    let v_q = eig_p.vectors.columns(0, q).clone_owned();
    Ok(basis * v_q)
}

/// Principal angles (radians, ascending) between the column spaces of two
/// matrices with the same row dimension.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() {
        return Err(ClvmError::Dimension(format!(
            "subspaces live in different dimensions: {} vs {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let qa = orthonormal_basis(a)?;
    let qb = orthonormal_basis(b)?;
    let svd = (qa.transpose() * qb).svd(false, false);
    let mut angles: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|&s| s.clamp(-1.0, 1.0).acos())
        .collect();
    angles.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(angles)
}

fn orthonormal_basis(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() == 0 {
        return Err(ClvmError::Dimension("empty subspace".into()));
    }
    let qr = a.clone().qr();
    let q = qr.q();
    // Guard against rank-deficient inputs, where QR columns lose meaning.
    let r = qr.r();
    for i in 0..r.nrows().min(r.ncols()) {
        if r[(i, i)].abs() < 1e-10 {
            return Err(ClvmError::Numerical(
                "subspace matrix is rank deficient".into(),
            ));
        }
    }
    Ok(q)
}
