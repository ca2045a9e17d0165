//! Model variants that plug into the variational engine: group-sparse and
//! horseshoe priors on the target loading, automatic relevance determination
//! on the shared loading, and a heavy-tailed Student's-t likelihood.
//!
//! Everything here is a pure function of parameter values (or sampled scale
//! values); the variational bookkeeping lives in [`crate::vi_engine`].

use nalgebra::{DMatrix, DVector, RowDVector};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::error::{ClvmError, Result};

/// Smoothing constant inside the group-norm gradient, so zero rows have a
/// well-defined (near-zero) gradient instead of a subgradient kink.
pub const GROUP_NORM_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Group-sparse penalty
// ---------------------------------------------------------------------------

/// A partition of the d rows of the target loading into penalty groups.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RowGroups {
    groups: Vec<Vec<usize>>,
}

impl RowGroups {
    /// One group per row — the default, giving row-wise sparsity.
    pub fn per_row(d: usize) -> Self {
        Self {
            groups: (0..d).map(|i| vec![i]).collect(),
        }
    }

    /// User-supplied groups; must partition `0..d` exactly.
    pub fn from_groups(groups: Vec<Vec<usize>>, d: usize) -> Result<Self> {
        let mut seen = vec![false; d];
        for g in &groups {
            if g.is_empty() {
                return Err(ClvmError::Config("empty penalty group".into()));
            }
            for &i in g {
                if i >= d {
                    return Err(ClvmError::Config(format!(
                        "group row index {i} out of range for d = {d}"
                    )));
                }
                if seen[i] {
                    return Err(ClvmError::Config(format!(
                        "row {i} appears in more than one group"
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(miss) = seen.iter().position(|&s| !s) {
            return Err(ClvmError::Config(format!(
                "row {miss} is not covered by any group"
            )));
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }
}

/// Group-lasso penalty on the target loading:
/// `r(W) = ρ Σ_g √p_g · ‖W_g‖_F`, where `p_g` is the number of W entries in
/// group g (for per-row groups this is the column count t). Subtracted from
/// the fitting objective, it acts as an improper log-prior favoring entire
/// zero rows.
pub fn group_penalty(w: &DMatrix<f64>, rho: f64, groups: &RowGroups) -> Result<f64> {
    validate_groups(w, rho, groups)?;
    let t = w.ncols();
    let mut total = 0.0;
    for g in groups.groups() {
        let p = (g.len() * t) as f64;
        let mut sq = 0.0;
        for &i in g {
            sq += w.row(i).norm_squared();
        }
        total += p.sqrt() * sq.sqrt();
    }
    Ok(rho * total)
}

/// Gradient of [`group_penalty`] with the norm smoothed as √(‖·‖² + ε).
pub fn group_penalty_gradient(w: &DMatrix<f64>, rho: f64, groups: &RowGroups) -> Result<DMatrix<f64>> {
    validate_groups(w, rho, groups)?;
    let t = w.ncols();
    let mut grad = DMatrix::zeros(w.nrows(), t);
    for g in groups.groups() {
        let p = (g.len() * t) as f64;
        let mut sq = 0.0;
        for &i in g {
            sq += w.row(i).norm_squared();
        }
        let coef = rho * p.sqrt() / (sq + GROUP_NORM_EPS).sqrt();
        for &i in g {
            for j in 0..t {
                grad[(i, j)] = coef * w[(i, j)];
            }
        }
    }
    Ok(grad)
}

fn validate_groups(w: &DMatrix<f64>, rho: f64, groups: &RowGroups) -> Result<()> {
    if rho < 0.0 {
        return Err(ClvmError::Config(format!("rho must be ≥ 0, got {rho}")));
    }
    let covered: usize = groups.groups().iter().map(|g| g.len()).sum();
    if covered != w.nrows() {
        return Err(ClvmError::Config(format!(
            "groups cover {covered} rows but W has {}",
            w.nrows()
        )));
    }
    if let Some(&max) = groups.groups().iter().flatten().max() {
        if max >= w.nrows() {
            return Err(ClvmError::Config(format!(
                "group row index {max} out of range for W with {} rows",
                w.nrows()
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Inverse-gamma and Student-t densities
// ---------------------------------------------------------------------------

/// log IG(x | a, b) = a·ln b − ln Γ(a) − (a+1)·ln x − b/x, for x > 0.
pub fn inv_gamma_logpdf(x: f64, a: f64, b: f64) -> Result<f64> {
    if x <= 0.0 {
        return Err(ClvmError::Config(format!(
            "inverse-gamma density evaluated at non-positive x = {x}"
        )));
    }
    if a <= 0.0 || b <= 0.0 {
        return Err(ClvmError::Config(format!(
            "inverse-gamma parameters must be positive (a = {a}, b = {b})"
        )));
    }
    Ok(a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x)
}

/// Log-density of the Student's-t distribution in its precision
/// parameterization: mixing N(x | μ, σ²) over σ² ~ IG(a, b) yields
/// St(x | μ, ν, λ) with ν = 2a degrees of freedom and precision λ = a/b:
///
/// ```text
/// St(r | ν, λ) = Γ((ν+1)/2)/Γ(ν/2) · √(λ/(πν)) · (1 + λr²/ν)^{−(ν+1)/2}
/// ```
pub fn student_t_logpdf(r: f64, nu: f64, lambda: f64) -> f64 {
    debug_assert!(nu > 0.0 && lambda > 0.0);
    ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0)
        + 0.5 * (lambda / (std::f64::consts::PI * nu)).ln()
        - 0.5 * (nu + 1.0) * (lambda * r * r / nu).ln_1p()
}

/// d/dμ of [`student_t_logpdf`] evaluated at r = x − μ:
/// `(ν+1)·λr / (ν + λr²)`. Bounded in r, which is what makes the likelihood
/// robust — a far outlier's pull saturates instead of growing linearly.
pub fn student_t_score(r: f64, nu: f64, lambda: f64) -> f64 {
    (nu + 1.0) * lambda * r / (nu + lambda * r * r)
}

/// Independent per-dimension Student's-t log-likelihood of one row.
pub fn student_t_loglik(
    x_row: &RowDVector<f64>,
    mean_row: &RowDVector<f64>,
    nu: f64,
    lambda: f64,
) -> Result<f64> {
    if nu <= 0.0 || lambda <= 0.0 {
        return Err(ClvmError::Config(format!(
            "Student-t parameters must be positive (ν = {nu}, λ = {lambda})"
        )));
    }
    if x_row.len() != mean_row.len() {
        return Err(ClvmError::Dimension(format!(
            "row length {} vs mean length {}",
            x_row.len(),
            mean_row.len()
        )));
    }
    Ok(x_row
        .iter()
        .zip(mean_row.iter())
        .map(|(&x, &m)| student_t_logpdf(x - m, nu, lambda))
        .sum())
}

// ---------------------------------------------------------------------------
// Horseshoe prior
// ---------------------------------------------------------------------------

/// One Monte Carlo draw of the horseshoe scale hierarchy.
///
/// The half-Cauchy scales are represented through their inverse-gamma
/// auxiliary form: a ~ C⁺(0, b) is equivalent to a² | ν ~ IG(1/2, 1/ν) with
/// ν ~ IG(1/2, 1/b²). `rho2[i]` is the squared local scale of row i,
/// `tau2` the squared global scale, and the `nu_*` fields the auxiliaries.
#[derive(Debug, Clone)]
pub struct HorseshoeSample {
    pub rho2: Vec<f64>,
    pub tau2: f64,
    pub nu_local: Vec<f64>,
    pub nu_global: f64,
}

/// Joint log-density of the horseshoe hierarchy at sampled scales:
/// `ln p(W | ρ², τ²) + ln p(ρ² | ν) + ln p(ν) + ln p(τ² | ν_τ) + ln p(ν_τ)`
/// with the local scales at unit half-Cauchy and the global at C⁺(0, b_g).
pub fn horseshoe_log_joint(w: &DMatrix<f64>, hs: &HorseshoeSample, b_g: f64) -> Result<f64> {
    let d = w.nrows();
    let t = w.ncols() as f64;
    if hs.rho2.len() != d || hs.nu_local.len() != d {
        return Err(ClvmError::Dimension(format!(
            "horseshoe sample covers {} rows but W has {d}",
            hs.rho2.len()
        )));
    }
    if b_g <= 0.0 {
        return Err(ClvmError::Config(format!("b_g must be positive, got {b_g}")));
    }
    for (&r2, &nl) in hs.rho2.iter().zip(&hs.nu_local) {
        if r2 <= 0.0 || nl <= 0.0 {
            return Err(ClvmError::Numerical(
                "non-positive sampled horseshoe scale; unconstrained transform is broken".into(),
            ));
        }
    }
    if hs.tau2 <= 0.0 || hs.nu_global <= 0.0 {
        return Err(ClvmError::Numerical(
            "non-positive sampled global scale; unconstrained transform is broken".into(),
        ));
    }

    let ln_2pi = crate::num_core::LN_2PI;
    let mut total = 0.0;
    for i in 0..d {
        let scale = hs.rho2[i] * hs.tau2;
        total += -0.5 * t * (ln_2pi + scale.ln()) - w.row(i).norm_squared() / (2.0 * scale);
        total += inv_gamma_logpdf(hs.rho2[i], 0.5, 1.0 / hs.nu_local[i])?;
        total += inv_gamma_logpdf(hs.nu_local[i], 0.5, 1.0)?;
    }
    total += inv_gamma_logpdf(hs.tau2, 0.5, 1.0 / hs.nu_global)?;
    total += inv_gamma_logpdf(hs.nu_global, 0.5, 1.0 / (b_g * b_g))?;
    Ok(total)
}

/// Decide which rows of the target loading to prune.
///
/// Under the fitted lognormal posteriors, `ln ρ_i² + ln τ²` is Gaussian, so
/// the probability that the effective row scale `ρ_i²τ²` falls below `delta`
/// is a normal CDF evaluation; rows where it exceeds `p0` are pruned
/// (`true` in the returned mask).
pub fn prune_rows(
    q_ln_rho2: &[(f64, f64)],
    q_ln_tau2: (f64, f64),
    delta: f64,
    p0: f64,
) -> Result<Vec<bool>> {
    if !(delta > 0.0) {
        return Err(ClvmError::Config(format!("delta must be positive, got {delta}")));
    }
    if !(0.0 < p0 && p0 < 1.0) {
        return Err(ClvmError::Config(format!("p0 must be in (0, 1), got {p0}")));
    }
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal is valid");
    let (m_tau, s_tau) = q_ln_tau2;
    let mut mask = Vec::with_capacity(q_ln_rho2.len());
    for &(m_i, s_i) in q_ln_rho2 {
        let mean = m_i + m_tau;
        let sd = (s_i * s_i + s_tau * s_tau).sqrt().max(1e-12);
        let z = (delta.ln() - mean) / sd;
        mask.push(std_normal.cdf(z) > p0);
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Automatic relevance determination
// ---------------------------------------------------------------------------

/// ARD log-prior of the shared loading at sampled column scales:
/// `Σ_j ln N(S_:j | 0, α_j I_d) + ln IG(α_j | a₀, b₀)`.
pub fn ard_log_prior(s: &DMatrix<f64>, alpha: &[f64], a0: f64, b0: f64) -> Result<f64> {
    if alpha.len() != s.ncols() {
        return Err(ClvmError::Dimension(format!(
            "{} column scales for {} columns",
            alpha.len(),
            s.ncols()
        )));
    }
    let d = s.nrows() as f64;
    let ln_2pi = crate::num_core::LN_2PI;
    let mut total = 0.0;
    for (j, &a_j) in alpha.iter().enumerate() {
        if a_j <= 0.0 {
            return Err(ClvmError::Numerical(
                "non-positive sampled column scale".into(),
            ));
        }
        total += -0.5 * d * (ln_2pi + a_j.ln()) - s.column(j).norm_squared() / (2.0 * a_j);
        total += inv_gamma_logpdf(a_j, a0, b0)?;
    }
    Ok(total)
}

/// Number of shared-loading columns carrying at least `variance_threshold`
/// of the total squared column norm. With the default 1% threshold this is
/// the model's effective shared dimensionality.
pub fn effective_shared_rank(s: &DMatrix<f64>, variance_threshold: f64) -> usize {
    let norms: Vec<f64> = (0..s.ncols()).map(|j| s.column(j).norm_squared()).collect();
    let total: f64 = norms.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    norms
        .iter()
        .filter(|&&n| n / total >= variance_threshold)
        .count()
}

/// Convenience: per-row L2 norms of a loading matrix.
pub fn row_norms(w: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(w.nrows(), |i, _| w.row(i).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num_core::rng::RngStream;

    #[test]
    fn penalty_zero_loading_is_zero() {
        let w = DMatrix::zeros(5, 3);
        let g = RowGroups::per_row(5);
        assert_eq!(group_penalty(&w, 400.0, &g).unwrap(), 0.0);
    }

    #[test]
    fn penalty_single_unit_row_single_column() {
        let mut w = DMatrix::zeros(1, 1);
        w[(0, 0)] = 1.0;
        let g = RowGroups::per_row(1);
        let val = group_penalty(&w, 400.0, &g).unwrap();
        assert!((val - 400.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_matches_naive_row_loop() {
        let mut rng = RngStream::new(1);
        let w = rng.normal_matrix(7, 3);
        let g = RowGroups::per_row(7);
        let got = group_penalty(&w, 2.5, &g).unwrap();
        let naive: f64 = (0..7).map(|i| 2.5 * 3.0f64.sqrt() * w.row(i).norm()).sum();
        assert!((got - naive).abs() < 1e-12);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(2);
        let w = rng.normal_matrix(4, 2);
        let groups = RowGroups::from_groups(vec![vec![0, 1], vec![2], vec![3]], 4).unwrap();
        let grad = group_penalty_gradient(&w, 3.0, &groups).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..2 {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[(i, j)] += h;
                wm[(i, j)] -= h;
                let fd = (group_penalty(&wp, 3.0, &groups).unwrap()
                    - group_penalty(&wm, 3.0, &groups).unwrap())
                    / (2.0 * h);
                assert!(
                    (fd - grad[(i, j)]).abs() < 1e-6,
                    "({i},{j}): fd {fd} vs analytic {}",
                    grad[(i, j)]
                );
            }
        }
    }

    #[test]
    fn penalty_gradient_magnitude_on_unit_rows() {
        // A unit-norm row's gradient has magnitude ρ√p, independent of the
        // row's direction.
        let mut w = DMatrix::zeros(2, 2);
        w[(0, 0)] = 0.6;
        w[(0, 1)] = 0.8;
        w[(1, 0)] = 1.0;
        let g = RowGroups::per_row(2);
        let grad = group_penalty_gradient(&w, 5.0, &g).unwrap();
        let expected = 5.0 * 2.0f64.sqrt();
        assert!((grad.row(0).norm() - expected).abs() < 1e-6);
        assert!((grad.row(1).norm() - expected).abs() < 1e-6);
        // Scaling a row leaves the gradient direction and magnitude intact.
        let mut w2 = w.clone();
        w2[(0, 0)] *= 10.0;
        w2[(0, 1)] *= 10.0;
        let grad2 = group_penalty_gradient(&w2, 5.0, &g).unwrap();
        assert!((grad2.row(0).norm() - expected).abs() < 1e-6);
    }

    #[test]
    fn penalty_zero_row_gradient_is_tiny() {
        let w = DMatrix::zeros(3, 2);
        let g = RowGroups::per_row(3);
        let grad = group_penalty_gradient(&w, 400.0, &g).unwrap();
        assert!(grad.amax() < 1e-9);
    }

    #[test]
    fn groups_must_partition() {
        assert!(RowGroups::from_groups(vec![vec![0], vec![0]], 2).is_err()); // duplicate
        assert!(RowGroups::from_groups(vec![vec![0]], 2).is_err()); // uncovered
        assert!(RowGroups::from_groups(vec![vec![0], vec![2]], 2).is_err()); // out of range
        assert!(RowGroups::from_groups(vec![vec![0], vec![1]], 2).is_ok());
    }

    #[test]
    fn student_t_is_symmetric_and_normalizes() {
        let (nu, lambda) = (4.0, 1.0);
        for c in [0.3, 1.0, 2.7] {
            let plus = student_t_logpdf(c, nu, lambda);
            let minus = student_t_logpdf(-c, nu, lambda);
            assert!((plus - minus).abs() < 1e-14);
        }
        let mass = crate::num_core::quadrature_1d(
            |r| student_t_logpdf(r, nu, lambda).exp(),
            -800.0,
            800.0,
            1e-10,
        )
        .unwrap();
        assert!((mass - 1.0).abs() < 1e-7, "mass {mass}");
    }

    #[test]
    fn student_t_approaches_gaussian_for_large_nu() {
        // a = b·10⁴ ⇒ ν = 2·10⁴, λ = 10⁴/b... pick a = 10⁴, b = 10⁴ so λ = 1.
        let (nu, lambda) = (2.0e4, 1.0);
        for r in [0.0, 0.5, 1.5, 3.0] {
            let t = student_t_logpdf(r, nu, lambda);
            let g = -0.5 * (crate::num_core::LN_2PI + r * r);
            assert!((t - g).abs() < 1e-3, "r={r}: {t} vs {g}");
        }
    }

    #[test]
    fn student_t_score_matches_derivative_and_saturates() {
        let (nu, lambda) = (4.0, 0.7);
        let h = 1e-6;
        for r in [-3.0, -0.4, 0.0, 1.2, 8.0] {
            // score is d/dμ at fixed x, i.e. −d/dr.
            let fd = -(student_t_logpdf(r + h, nu, lambda) - student_t_logpdf(r - h, nu, lambda))
                / (2.0 * h);
            assert!((fd - student_t_score(r, nu, lambda)).abs() < 1e-6);
        }
        // The pull of an extreme residual shrinks instead of growing.
        assert!(
            student_t_score(100.0, nu, lambda).abs() < student_t_score(2.0, nu, lambda).abs()
        );
    }

    #[test]
    fn inv_gamma_density_normalizes_and_peaks_at_mode() {
        let (a, b) = (2.0, 3.0);
        let mass = crate::num_core::quadrature_1d(
            |x| inv_gamma_logpdf(x, a, b).unwrap().exp(),
            1e-6,
            1.0e5,
            1e-9,
        )
        .unwrap();
        assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
        let mode = b / (a + 1.0);
        let at_mode = inv_gamma_logpdf(mode, a, b).unwrap();
        assert!(inv_gamma_logpdf(mode * 1.1, a, b).unwrap() < at_mode);
        assert!(inv_gamma_logpdf(mode * 0.9, a, b).unwrap() < at_mode);
    }

    #[test]
    fn horseshoe_log_joint_prefers_zero_rows_at_equal_scales() {
        let mut rng = RngStream::new(5);
        let mut w = rng.normal_matrix(4, 2);
        for j in 0..2 {
            w[(0, j)] = 0.0;
        }
        let hs = HorseshoeSample {
            rho2: vec![0.5; 4],
            tau2: 1.0,
            nu_local: vec![1.0; 4],
            nu_global: 1.0,
        };
        let base = horseshoe_log_joint(&w, &hs, 1.0).unwrap();
        // Making the zero row nonzero can only lower the joint density.
        let mut w2 = w.clone();
        w2[(0, 0)] = 1.5;
        assert!(horseshoe_log_joint(&w2, &hs, 1.0).unwrap() < base);
    }

    #[test]
    fn horseshoe_rejects_bad_scales() {
        let w = DMatrix::zeros(2, 1);
        let hs = HorseshoeSample {
            rho2: vec![1.0, -0.1],
            tau2: 1.0,
            nu_local: vec![1.0, 1.0],
            nu_global: 1.0,
        };
        assert!(matches!(
            horseshoe_log_joint(&w, &hs, 1.0),
            Err(ClvmError::Numerical(_))
        ));
    }

    #[test]
    fn pruning_thresholds_behave() {
        // Posterior concentrated at scale 10: survives.
        let keep = prune_rows(&[(10.0f64.ln(), 0.1)], (0.0, 0.1), 1e-3, 0.9).unwrap();
        assert!(!keep[0]);
        // Posterior concentrated at 1e-6: pruned.
        let gone = prune_rows(&[(1e-6f64.ln(), 0.1)], (0.0, 0.1), 1e-3, 0.9).unwrap();
        assert!(gone[0]);
    }

    #[test]
    fn pruning_probability_matches_monte_carlo() {
        let q_rho = (-(2.5f64), 0.8);
        let q_tau = (-3.0, 0.6);
        let delta = 1e-3;
        // MC estimate of P(ρ²τ² < δ) under the two lognormals.
        let mut rng = RngStream::new(6);
        let trials = 200_000;
        let mut hits = 0usize;
        for _ in 0..trials {
            let lr = q_rho.0 + q_rho.1 * rng.normal();
            let lt = q_tau.0 + q_tau.1 * rng.normal();
            if (lr + lt).exp() < delta {
                hits += 1;
            }
        }
        let mc = hits as f64 / trials as f64;
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        let z = (delta.ln() - (q_rho.0 + q_tau.0))
            / (q_rho.1 * q_rho.1 + q_tau.1 * q_tau.1).sqrt();
        let analytic = std_normal.cdf(z);
        assert!((mc - analytic).abs() < 1e-3 + 3.0 * (analytic * (1.0 - analytic) / trials as f64).sqrt());
        // And the mask uses that same probability.
        let mask = prune_rows(&[q_rho], q_tau, delta, analytic - 0.01).unwrap();
        assert!(mask[0]);
        let mask = prune_rows(&[q_rho], q_tau, delta, (analytic + 0.01).min(0.999)).unwrap();
        assert!(!mask[0]);
    }

    #[test]
    fn ard_prior_matches_naive_per_column_evaluation() {
        let mut rng = RngStream::new(7);
        let s = rng.normal_matrix(5, 3);
        let alpha = [0.5, 2.0, 1.3];
        let got = ard_log_prior(&s, &alpha, 1e-3, 1e-3).unwrap();
        let mut naive = 0.0;
        for (j, &a_j) in alpha.iter().enumerate() {
            for i in 0..5 {
                naive += -0.5 * (crate::num_core::LN_2PI + a_j.ln())
                    - s[(i, j)] * s[(i, j)] / (2.0 * a_j);
            }
            naive += inv_gamma_logpdf(a_j, 1e-3, 1e-3).unwrap();
        }
        assert!((got - naive).abs() < 1e-10);
    }

    #[test]
    fn ard_prior_attracts_empty_columns_to_small_scales() {
        let mut s = DMatrix::zeros(6, 2);
        s[(0, 1)] = 2.0; // column 1 carries signal, column 0 is empty
        let small_scale = ard_log_prior(&s, &[1e-4, 1.0], 1e-3, 1e-3).unwrap();
        let large_scale = ard_log_prior(&s, &[1.0, 1.0], 1e-3, 1e-3).unwrap();
        assert!(small_scale > large_scale);
    }

    #[test]
    fn effective_rank_counts_dominant_columns() {
        let mut s = DMatrix::zeros(8, 4);
        s[(0, 0)] = 3.0;
        s[(1, 2)] = 2.0;
        assert_eq!(effective_shared_rank(&s, 0.01), 2);
        // A single nonzero column is rank 1.
        let mut one = DMatrix::zeros(8, 4);
        one[(3, 1)] = 0.5;
        assert_eq!(effective_shared_rank(&one, 0.01), 1);
        // Threshold zero counts every column.
        assert_eq!(effective_shared_rank(&s, 0.0), 4);
        // All-zero loading has no effective dimensions.
        assert_eq!(effective_shared_rank(&DMatrix::zeros(8, 4), 0.01), 0);
    }
}
