//! Expectation–maximization for the linear contrastive latent variable model.
//!
//! The generative process couples two datasets through a shared loading:
//!
//! ```text
//! target:     x_i = S z_i + W t_i + μx + ε_i
//! background: y_j = S z_j        + μy + ε_j,    ε ~ N(0, σ² I)
//! ```
//!
//! with standard-normal latents. `z` (dimension k) captures variation common
//! to both sets; `t` (dimension t) captures structure unique to the target
//! set and is usually what the analysis is after. Marginally,
//! `x ~ N(μx, WWᵀ + SSᵀ + σ²I)` and `y ~ N(μy, SSᵀ + σ²I)`.
//!
//! EM here is exact: the E-step computes the joint Gaussian posterior of
//! `(t_i, z_i)` per row (no orthogonality assumption on the loadings), and
//! the M-step solves one linear system that maximizes the expected
//! complete-data log-likelihood over `W, S, μx, μy` simultaneously, followed
//! by the closed-form σ² update. Each iteration can only increase the
//! marginal log-likelihood.
//!
//! Rows with missing entries are rejected here; the variational path in
//! [`crate::vi_engine`] handles missing data by giving each unobserved cell
//! its own variational factor.

use nalgebra::{DMatrix, DVector};

use crate::data_model::ContrastivePair;
use crate::error::{ClvmError, Result};
use crate::exec;
use crate::num_core::gaussian::{cholesky_with_jitter, gauss_logpdf_rows};
use crate::num_core::rng::RngStream;
use crate::num_core::sym_eig;

/// Smallest admissible noise variance.
pub const SIGMA2_FLOOR: f64 = 1e-8;

/// Parameters of the linear model.
#[derive(Debug, Clone)]
pub struct ClvmParams {
    /// Shared loading, d×k.
    pub s: DMatrix<f64>,
    /// Target-only loading, d×t.
    pub w: DMatrix<f64>,
    pub mu_x: DVector<f64>,
    pub mu_y: DVector<f64>,
    pub sigma2: f64,
}

impl ClvmParams {
    pub fn d(&self) -> usize {
        self.mu_x.len()
    }

    pub fn k(&self) -> usize {
        self.s.ncols()
    }

    pub fn t(&self) -> usize {
        self.w.ncols()
    }

    /// Zero-loading parameters, useful as a neutral starting point.
    pub fn zeros(d: usize, k: usize, t: usize) -> Self {
        Self {
            s: DMatrix::zeros(d, k),
            w: DMatrix::zeros(d, t),
            mu_x: DVector::zeros(d),
            mu_y: DVector::zeros(d),
            sigma2: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if self.s.nrows() != d || self.w.nrows() != d || self.mu_y.len() != d {
            return Err(ClvmError::Dimension(format!(
                "inconsistent parameter shapes: S {}×{}, W {}×{}, μx {}, μy {}",
                self.s.nrows(),
                self.s.ncols(),
                self.w.nrows(),
                self.w.ncols(),
                self.mu_x.len(),
                self.mu_y.len()
            )));
        }
        if self.k() + self.t() == 0 {
            return Err(ClvmError::Config("k + t must be at least 1".into()));
        }
        if !(self.sigma2 >= SIGMA2_FLOOR) {
            return Err(ClvmError::Config(format!(
                "sigma2 = {} is below the floor {SIGMA2_FLOOR}",
                self.sigma2
            )));
        }
        let finite = self.s.iter().chain(self.w.iter()).all(|v| v.is_finite())
            && self.mu_x.iter().chain(self.mu_y.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(ClvmError::NonFinite("parameters contain non-finite entries".into()));
        }
        Ok(())
    }

    /// Joint loading [W S], d×(t+k); the per-row latent is stacked as [t; z].
    pub fn joint_loading(&self) -> DMatrix<f64> {
        let (d, t, k) = (self.d(), self.t(), self.k());
        let mut a = DMatrix::zeros(d, t + k);
        a.view_mut((0, 0), (d, t)).copy_from(&self.w);
        a.view_mut((0, t), (d, k)).copy_from(&self.s);
        a
    }

    /// Marginal covariance of a target row: WWᵀ + SSᵀ + σ²I.
    pub fn target_cov(&self) -> DMatrix<f64> {
        let mut c = &self.w * self.w.transpose() + &self.s * self.s.transpose();
        for i in 0..self.d() {
            c[(i, i)] += self.sigma2;
        }
        c
    }

    /// Marginal covariance of a background row: SSᵀ + σ²I.
    pub fn background_cov(&self) -> DMatrix<f64> {
        let mut c = &self.s * self.s.transpose();
        for i in 0..self.d() {
            c[(i, i)] += self.sigma2;
        }
        c
    }
}

/// Exact Gaussian posterior moments of the latents for one row.
///
/// For a target row the posterior is over the stacked `(t, z)`; for a
/// background row only `z` exists and the `t` blocks are empty.
#[derive(Debug, Clone)]
pub struct PosteriorMoments {
    pub mean_t: DVector<f64>,
    pub mean_z: DVector<f64>,
    pub e_tt: DMatrix<f64>,
    pub e_zz: DMatrix<f64>,
    /// Cross second moment E[z tᵀ], k×t.
    pub e_zt: DMatrix<f64>,
}

/// Posterior of the latents given one complete row.
///
/// Uses the joint precision of `(t, z)`: with A = [W S], the posterior is
/// N(G⁻¹Aᵀ(x−μx), σ²G⁻¹) where G = σ²I + AᵀA. No orthogonality between W
/// and S is assumed; when WᵀS = 0, G is block diagonal and this reduces to
/// the familiar separated PPCA-style formulas.
pub fn posterior_moments(
    params: &ClvmParams,
    row: &DVector<f64>,
    is_target: bool,
) -> Result<PosteriorMoments> {
    params.validate()?;
    if row.len() != params.d() {
        return Err(ClvmError::Dimension(format!(
            "row has length {} but d = {}",
            row.len(),
            params.d()
        )));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(ClvmError::MissingData(
            "row contains non-finite entries; the EM path needs complete rows".into(),
        ));
    }
    let (k, t) = (params.k(), params.t());
    if is_target {
        let a = params.joint_loading();
        let post = latent_posterior(&a, params.sigma2)?;
        let mean = &post.gram_chol_solve(&(a.transpose() * (row - &params.mu_x)));
        let e_uu = &post.cov + mean * mean.transpose();
        Ok(PosteriorMoments {
            mean_t: mean.rows(0, t).clone_owned(),
            mean_z: mean.rows(t, k).clone_owned(),
            e_tt: e_uu.view((0, 0), (t, t)).clone_owned(),
            e_zz: e_uu.view((t, t), (k, k)).clone_owned(),
            e_zt: e_uu.view((t, 0), (k, t)).clone_owned(),
        })
    } else {
        let post = latent_posterior(&params.s, params.sigma2)?;
        let mean = post.gram_chol_solve(&(params.s.transpose() * (row - &params.mu_y)));
        let e_zz = &post.cov + &mean * mean.transpose();
        Ok(PosteriorMoments {
            mean_t: DVector::zeros(0),
            mean_z: mean,
            e_tt: DMatrix::zeros(0, 0),
            e_zz,
            e_zt: DMatrix::zeros(k, 0),
        })
    }
}

/// Shared per-dataset posterior pieces: the Cholesky factor of
/// G = σ²I + AᵀA and the posterior covariance σ²G⁻¹ (identical across rows).
struct LatentPosterior {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    cov: DMatrix<f64>,
}

impl LatentPosterior {
    fn gram_chol_solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }
}

fn latent_posterior(a: &DMatrix<f64>, sigma2: f64) -> Result<LatentPosterior> {
    let q = a.ncols();
    let mut gram = a.transpose() * a;
    for i in 0..q {
        gram[(i, i)] += sigma2;
    }
    let chol = nalgebra::Cholesky::new(gram).ok_or_else(|| {
        ClvmError::Factorization("latent-posterior precision is not positive definite".into())
    })?;
    let cov = chol.solve(&(DMatrix::identity(q, q) * sigma2));
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(LatentPosterior { chol, cov })
}

/// Accumulated posterior moments over a full pair, sufficient for the M-step.
///
/// Everything is stored as raw sums so contributions are additive across
/// rows; duplicating the dataset exactly doubles each field.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    pub n: usize,
    pub m: usize,
    pub sum_x: DVector<f64>,
    pub sum_xsq: f64,
    /// Σ E[u_i] over target rows, u = [t; z].
    pub sum_eu: DVector<f64>,
    /// Σ E[u_i u_iᵀ] over target rows.
    pub sum_euu: DMatrix<f64>,
    /// Σ x_i E[u_i]ᵀ over target rows, d×(t+k).
    pub sum_x_eu: DMatrix<f64>,
    pub sum_y: DVector<f64>,
    pub sum_ysq: f64,
    pub sum_ez: DVector<f64>,
    pub sum_ezz: DMatrix<f64>,
    pub sum_y_ez: DMatrix<f64>,
}

/// E-step: exact posterior moments accumulated over all rows.
///
/// Per-row posteriors are independent, so the row means are computed in
/// parallel; the accumulation itself always runs sequentially in row order,
/// which keeps results bit-identical regardless of thread count.
pub fn e_step(params: &ClvmParams, pair: &ContrastivePair) -> Result<SufficientStats> {
    params.validate()?;
    if pair.d() != params.d() {
        return Err(ClvmError::Dimension(format!(
            "pair has d = {} but params have d = {}",
            pair.d(),
            params.d()
        )));
    }
    if pair.has_missing() {
        return Err(ClvmError::MissingData(
            "EM requires complete data; fit rows with missing cells via the variational path"
                .into(),
        ));
    }
    let (d, k, t) = (params.d(), params.k(), params.t());
    let (n, m) = (pair.n(), pair.m());
    let a = params.joint_loading();
    let post_t = latent_posterior(&a, params.sigma2)?;
    let post_b = latent_posterior(&params.s, params.sigma2)?;

    // Row posterior means; order-preserving parallel map.
    let target_means: Vec<DVector<f64>> = {
        let at = a.transpose();
        let mu_x = &params.mu_x;
        let rows = &pair.target;
        exec::map_collect(n, |i| {
            let x = rows.row(i).transpose() - mu_x;
            post_t.gram_chol_solve(&(&at * x))
        })
    };
    let background_means: Vec<DVector<f64>> = {
        let st = params.s.transpose();
        let mu_y = &params.mu_y;
        let rows = &pair.background;
        exec::map_collect(m, |j| {
            let y = rows.row(j).transpose() - mu_y;
            post_b.gram_chol_solve(&(&st * y))
        })
    };

    let mut stats = SufficientStats {
        n,
        m,
        sum_x: DVector::zeros(d),
        sum_xsq: 0.0,
        sum_eu: DVector::zeros(t + k),
        sum_euu: &post_t.cov * n as f64,
        sum_x_eu: DMatrix::zeros(d, t + k),
        sum_y: DVector::zeros(d),
        sum_ysq: 0.0,
        sum_ez: DVector::zeros(k),
        sum_ezz: &post_b.cov * m as f64,
        sum_y_ez: DMatrix::zeros(d, k),
    };
    for (i, mean) in target_means.iter().enumerate() {
        let x = pair.target.row(i).transpose();
        stats.sum_xsq += x.norm_squared();
        stats.sum_euu += mean * mean.transpose();
        stats.sum_x_eu += &x * mean.transpose();
        stats.sum_x += x;
        stats.sum_eu += mean;
    }
    for (j, mean) in background_means.iter().enumerate() {
        let y = pair.background.row(j).transpose();
        stats.sum_ysq += y.norm_squared();
        stats.sum_ezz += mean * mean.transpose();
        stats.sum_y_ez += &y * mean.transpose();
        stats.sum_y += y;
        stats.sum_ez += mean;
    }
    Ok(stats)
}

/// M-step: exact maximizer of the expected complete-data log-likelihood.
///
/// `W, S, μx, μy` solve a single joint normal-equation system — the shared
/// loading's equations receive contributions from both sets, the means act
/// as intercept columns — and σ² then has a closed form in the residual
/// traces. Both maximizations are exact, so EM's ascent property holds.
pub fn m_step(stats: &SufficientStats, current: &ClvmParams) -> Result<ClvmParams> {
    let d = current.d();
    let (k, t) = (current.k(), current.t());
    let p = t + k + 2; // regressors: t-block, z-block, target intercept, background intercept
    let (nf, mf) = (stats.n as f64, stats.m as f64);

    // Gram matrix of the stacked regression design, both sets.
    let mut gram = DMatrix::zeros(p, p);
    gram.view_mut((0, 0), (t + k, t + k))
        .copy_from(&stats.sum_euu);
    gram.view_mut((t, t), (k, k))
        .copy_from(&(stats.sum_euu.view((t, t), (k, k)) + &stats.sum_ezz));
    for r in 0..t + k {
        gram[(r, t + k)] = stats.sum_eu[r];
        gram[(t + k, r)] = stats.sum_eu[r];
    }
    for r in 0..k {
        gram[(t + r, t + k + 1)] = stats.sum_ez[r];
        gram[(t + k + 1, t + r)] = stats.sum_ez[r];
    }
    gram[(t + k, t + k)] = nf;
    gram[(t + k + 1, t + k + 1)] = mf;

    let mut rhs = DMatrix::zeros(d, p);
    rhs.view_mut((0, 0), (d, t + k)).copy_from(&stats.sum_x_eu);
    rhs.view_mut((0, t), (d, k))
        .copy_from(&(stats.sum_x_eu.view((0, t), (d, k)) + &stats.sum_y_ez));
    rhs.view_mut((0, t + k), (d, 1)).copy_from(&stats.sum_x);
    rhs.view_mut((0, t + k + 1), (d, 1)).copy_from(&stats.sum_y);

    let chol = cholesky_with_jitter(&gram).map_err(|_| {
        ClvmError::Factorization(
            "normal equations singular in the M-step even after jitter".into(),
        )
    })?;
    let theta = chol.solve(&rhs.transpose()).transpose(); // d×p

    let w = theta.view((0, 0), (d, t)).clone_owned();
    let s = theta.view((0, t), (d, k)).clone_owned();
    let mu_x = theta.column(t + k).clone_owned();
    let mu_y = theta.column(t + k + 1).clone_owned();

    // σ²: expected residual power per cell under the new linear parameters.
    let a = {
        let mut a = DMatrix::zeros(d, t + k);
        a.view_mut((0, 0), (d, t)).copy_from(&w);
        a.view_mut((0, t), (d, k)).copy_from(&s);
        a
    };
    let centered_x_eu = &stats.sum_x_eu - &mu_x * stats.sum_eu.transpose();
    let t_x = stats.sum_xsq - 2.0 * mu_x.dot(&stats.sum_x) + nf * mu_x.norm_squared()
        - 2.0 * (a.transpose() * &centered_x_eu).trace()
        + (a.transpose() * &a * &stats.sum_euu).trace();
    let centered_y_ez = &stats.sum_y_ez - &mu_y * stats.sum_ez.transpose();
    let t_y = stats.sum_ysq - 2.0 * mu_y.dot(&stats.sum_y) + mf * mu_y.norm_squared()
        - 2.0 * (s.transpose() * &centered_y_ez).trace()
        + (s.transpose() * &s * &stats.sum_ezz).trace();
    let sigma2 = ((t_x + t_y) / ((nf + mf) * d as f64)).max(SIGMA2_FLOOR);

    let params = ClvmParams {
        s,
        w,
        mu_x,
        mu_y,
        sigma2,
    };
    params.validate()?;
    Ok(params)
}

/// Exact marginal log-likelihood of a complete pair.
pub fn log_likelihood(params: &ClvmParams, pair: &ContrastivePair) -> Result<f64> {
    params.validate()?;
    if pair.has_missing() {
        return Err(ClvmError::MissingData(
            "marginal log-likelihood needs complete data".into(),
        ));
    }
    let lx = gauss_logpdf_rows(&pair.target, &params.mu_x, &params.target_cov())?;
    let ly = gauss_logpdf_rows(&pair.background, &params.mu_y, &params.background_cov())?;
    Ok(lx + ly)
}

/// Options for [`fit_em`].
#[derive(Debug, Clone)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop when |Δ log-likelihood| / |log-likelihood| falls below this.
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-7,
            seed: 0,
        }
    }
}

/// A fitted model with its optimization history and per-row latent means.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub params: ClvmParams,
    /// Marginal log-likelihood after init and after each EM iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Posterior latent means per target row, columns [t₁..t_t, z₁..z_k].
    pub target_latents: DMatrix<f64>,
    /// Posterior latent means per background row, columns [z₁..z_k].
    pub background_latents: DMatrix<f64>,
}

/// Spectral initialization shared by the EM and VI paths.
///
/// Each loading starts at its method-of-moments estimate. The background
/// satisfies `cov(y) = SSᵀ + σ²I` alone, so S comes from the probabilistic-PCA
/// solution of the background covariance: top-k eigenvectors scaled by
/// √(λ − σ²₀), with σ²₀ the mean of the discarded eigenvalues. Subtracting
/// the two model covariances gives `cov(x) − cov(y) = WWᵀ` with both the
/// shared and noise terms cancelled, so W comes from the top-t eigenvectors
/// of the covariance difference scaled by √λ (clipped below at zero, since
/// sampling noise can push trailing differences negative). A small seeded
/// Gaussian jitter on W breaks ties when the difference is near-degenerate.
/// Means start at the per-set sample means.
///
/// Starting S on the background spectrum matters: on contrastive data the
/// pooled top eigenvectors are typically the target-enriched directions, and
/// gradient-based fits seeded there settle with the roles of z and t swapped.
pub fn init_params(pair: &ContrastivePair, k: usize, t: usize, seed: u64) -> Result<ClvmParams> {
    let d = pair.d();
    if k + t == 0 {
        return Err(ClvmError::Config("k + t must be at least 1".into()));
    }
    if k >= d || t >= d {
        return Err(ClvmError::Config(format!(
            "latent dimensions must be below d = {d} (got k = {k}, t = {t})"
        )));
    }
    if pair.has_missing() {
        return Err(ClvmError::MissingData(
            "initialization needs complete data".into(),
        ));
    }
    let (n, m) = (pair.n(), pair.m());
    let mu_x = pair.target.row_mean().transpose();
    let mu_y = pair.background.row_mean().transpose();

    let mut cov_t = DMatrix::zeros(d, d);
    for i in 0..n {
        let c = pair.target.row(i).transpose() - &mu_x;
        cov_t += &c * c.transpose();
    }
    cov_t /= n as f64;
    let mut cov_b = DMatrix::zeros(d, d);
    for j in 0..m {
        let c = pair.background.row(j).transpose() - &mu_y;
        cov_b += &c * c.transpose();
    }
    cov_b /= m as f64;

    let eig_b = sym_eig(&cov_b)?;
    let trailing = eig_b.values.iter().skip(k).sum::<f64>() / (d - k) as f64;
    let sigma2 = trailing.max(SIGMA2_FLOOR);
    let mut s = DMatrix::zeros(d, k);
    for j in 0..k {
        let scale = (eig_b.values[j] - sigma2).max(1e-6).sqrt();
        s.set_column(j, &(eig_b.vectors.column(j) * scale));
    }

    let mut rng = RngStream::new(seed).derive(0x494e); // init stream
    let mut w = rng.normal_matrix(d, t) * 0.01;
    if t > 0 {
        let mut diff = cov_t - cov_b;
        // Outer-product sums are symmetric only up to roundoff.
        diff = (&diff + diff.transpose()) * 0.5;
        let eig_d = sym_eig(&diff)?;
        for j in 0..t {
            let scale = eig_d.values[j].max(0.0).sqrt();
            w.column_mut(j).axpy(scale, &eig_d.vectors.column(j), 1.0);
        }
    }

    Ok(ClvmParams {
        s,
        w,
        mu_x,
        mu_y,
        sigma2,
    })
}

/// Fit by EM.
///
/// Iterates exact E/M steps from the spectral initialization until the
/// relative log-likelihood change drops below `rel_tol` or `max_iter` is
/// reached. The returned trace starts with the likelihood at initialization
/// and is non-decreasing (up to 1e-8 numerical slack).
pub fn fit_em(pair: &ContrastivePair, k: usize, t: usize, opts: &EmOptions) -> Result<FittedModel> {
    let mut params = init_params(pair, k, t, opts.seed)?;
    let mut trace = vec![log_likelihood(&params, pair)?];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iter {
        let stats = e_step(&params, pair)?;
        params = m_step(&stats, &params)?;
        let ll = log_likelihood(&params, pair)?;
        if !ll.is_finite() {
            return Err(ClvmError::Numerical(format!(
                "log-likelihood became non-finite at iteration {iterations}"
            )));
        }
        let prev = *trace.last().expect("trace starts non-empty");
        trace.push(ll);
        iterations += 1;
        if (ll - prev).abs() <= opts.rel_tol * ll.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    let target_latents = transform(&params, &pair.target, true)?;
    let background_latents = transform(&params, &pair.background, false)?;
    Ok(FittedModel {
        params,
        trace,
        converged,
        iterations,
        target_latents,
        background_latents,
    })
}

/// Posterior latent means for a batch of complete rows.
///
/// Target rows yield `t + k` columns ordered [t, z]; background rows yield
/// `k` columns. One factorization is shared across the batch.
pub fn transform(params: &ClvmParams, rows: &DMatrix<f64>, is_target: bool) -> Result<DMatrix<f64>> {
    params.validate()?;
    if rows.ncols() != params.d() {
        return Err(ClvmError::Dimension(format!(
            "rows have {} columns but d = {}",
            rows.ncols(),
            params.d()
        )));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(ClvmError::MissingData(
            "transform needs complete rows".into(),
        ));
    }
    let (a, mu) = if is_target {
        (params.joint_loading(), &params.mu_x)
    } else {
        (params.s.clone(), &params.mu_y)
    };
    let post = latent_posterior(&a, params.sigma2)?;
    let q = a.ncols();
    let mut out = DMatrix::zeros(rows.nrows(), q);
    let means: Vec<DVector<f64>> = {
        let at = a.transpose();
        exec::map_collect(rows.nrows(), |i| {
            let c = rows.row(i).transpose() - mu;
            post.gram_chol_solve(&(&at * c))
        })
    };
    for (i, mean) in means.iter().enumerate() {
        out.row_mut(i).copy_from(&mean.transpose());
    }
    Ok(out)
}
