//! Reparameterized Monte Carlo estimate of the evidence lower bound and its
//! exact per-sample gradient.
//!
//! One pass draws every stochastic quantity (loadings under a variational
//! posterior, scale variables, latent factors, imputed cells), evaluates the
//! bound, and — when a gradient is requested — differentiates the *sampled*
//! estimator analytically. Because the gradient is exact for each draw,
//! finite differences of the estimator under common random numbers must
//! agree with it to truncation error; the tests exploit that.
//!
//! Estimator layout per sample:
//! ```text
//!   Σ_rows E-step terms: log-likelihood of observed + imputed cells,
//!                        − closed-form KL of the row's factor posterior,
//!                        + entropy of per-cell imputation factors
//! + prior log-densities of sampled loadings / scales (variant-dependent)
//! + entropies of their posteriors (lognormal blocks include the Jacobian)
//! − group penalty (when configured)
//! ```

use nalgebra::{DMatrix, DVector};

use super::layout::{ViLayout, VariationalState};
use super::{Likelihood, ModelSpec, SPrior, Sigma2Mode, WPrior};
use crate::data_model::ContrastivePair;
use crate::error::{ClvmError, Result};
use crate::exec;
use crate::num_core::rng::RngStream;
use crate::num_core::LN_2PI;
use crate::variants;

/// ln(2πe); the entropy of N(m, e^{2l}) is l + LN_2PI_E/2.
const LN_2PI_E: f64 = LN_2PI + 1.0;

/// Largest exponent we allow when mapping unconstrained values through exp;
/// beyond this, squares and ratios overflow and the fit has diverged.
const MAX_EXP: f64 = 250.0;

fn checked_exp(x: f64, what: &str) -> Result<f64> {
    if !(x.is_finite() && x < MAX_EXP) {
        return Err(ClvmError::NonFinite(format!(
            "{what} overflowed the exponential transform (unconstrained value {x})"
        )));
    }
    Ok(x.exp())
}

/// Estimate the bound with `n_mc` Monte Carlo samples.
pub fn elbo_estimate(
    spec: &ModelSpec,
    state: &VariationalState,
    pair: &ContrastivePair,
    n_mc: usize,
    rng: &RngStream,
) -> Result<f64> {
    mc_pass(spec, state, pair, n_mc, rng, None)
}

/// Estimate the bound and its gradient with respect to every entry of the
/// flat parameter vector, averaged over `n_mc` samples.
pub fn elbo_gradient(
    spec: &ModelSpec,
    state: &VariationalState,
    pair: &ContrastivePair,
    n_mc: usize,
    rng: &RngStream,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; state.layout.len];
    let elbo = mc_pass(spec, state, pair, n_mc, rng, Some(grad.as_mut_slice()))?;
    Ok((elbo, grad))
}

fn mc_pass(
    spec: &ModelSpec,
    state: &VariationalState,
    pair: &ContrastivePair,
    n_mc: usize,
    rng: &RngStream,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    if n_mc == 0 {
        return Err(ClvmError::Config("n_mc must be at least 1".into()));
    }
    let lay = &state.layout;
    if pair.n() != lay.n || pair.m() != lay.m || pair.d() != lay.d {
        return Err(ClvmError::Dimension(format!(
            "state laid out for n = {}, m = {}, d = {} but data is {}×{} / {}×{}",
            lay.n,
            lay.m,
            lay.d,
            pair.n(),
            pair.d(),
            pair.m(),
            pair.d()
        )));
    }
    if let Some(g) = grad.as_deref() {
        if g.len() != lay.len {
            return Err(ClvmError::Dimension(format!(
                "gradient buffer has {} slots, layout needs {}",
                g.len(),
                lay.len
            )));
        }
    }

    let scale = 1.0 / n_mc as f64;
    let mut total = 0.0;
    for s_idx in 0..n_mc {
        let sample_elbo = one_sample(spec, state, pair, s_idx as u64, rng, grad.as_deref_mut(), scale)?;
        total += sample_elbo;
    }
    let elbo = total * scale;
    if !elbo.is_finite() {
        return Err(ClvmError::NonFinite(
            "bound estimate is not finite; the optimization has diverged".into(),
        ));
    }
    Ok(elbo)
}

// ---------------------------------------------------------------------------
// Per-sample machinery
// ---------------------------------------------------------------------------

enum NoiseModel {
    Gaussian { sigma2: f64, ln_sigma2: f64 },
    StudentT { nu: f64, lambda: f64 },
}

impl NoiseModel {
    /// Per-cell log-density of residual r and its derivative with respect
    /// to the cell's predicted mean.
    fn cell(&self, r: f64) -> (f64, f64) {
        match *self {
            NoiseModel::Gaussian { sigma2, ln_sigma2 } => (
                -0.5 * (LN_2PI + ln_sigma2) - r * r / (2.0 * sigma2),
                r / sigma2,
            ),
            NoiseModel::StudentT { nu, lambda } => (
                variants::student_t_logpdf(r, nu, lambda),
                variants::student_t_score(r, nu, lambda),
            ),
        }
    }

    /// d(log-density)/d(ln σ²) for a Gaussian cell; zero otherwise.
    fn ln_sigma2_score(&self, r: f64) -> f64 {
        match *self {
            NoiseModel::Gaussian { sigma2, .. } => -0.5 + r * r / (2.0 * sigma2),
            NoiseModel::StudentT { .. } => 0.0,
        }
    }
}

struct HsDraw {
    rho2: Vec<f64>,
    tau2: f64,
    nu_l: Vec<f64>,
    nu_g: f64,
    eps_rho2: Vec<f64>,
    eps_tau2: f64,
    eps_nul: Vec<f64>,
    eps_nug: f64,
}

struct ArdDraw {
    alpha: Vec<f64>,
    eps: Vec<f64>,
}

struct ThetaSample {
    s: DMatrix<f64>,
    w: DMatrix<f64>,
    mu_x: DVector<f64>,
    mu_y: DVector<f64>,
    noise: NoiseModel,
    eps_s: Vec<f64>,
    eps_w: Vec<f64>,
    eps_sig: f64,
    hs: Option<HsDraw>,
    ard: Option<ArdDraw>,
}

/// Draw every model-level random quantity for one MC sample. The draw order
/// is fixed so streams stay aligned regardless of which branches execute.
fn sample_theta(
    spec: &ModelSpec,
    state: &VariationalState,
    s_idx: u64,
    rng: &RngStream,
) -> Result<ThetaSample> {
    let lay = &state.layout;
    let (d, k, t) = (lay.d, lay.k, lay.t);
    let theta_tag = (lay.n + lay.m) as u64;
    let mut r = rng.derive2(theta_tag, s_idx);
    let v = &state.values;

    let mut s_mat = state.s_mean();
    let mut eps_s = Vec::new();
    if let Some(ol) = lay.off_s_logstd {
        eps_s.reserve(d * k);
        let flat = s_mat.as_mut_slice();
        for idx in 0..d * k {
            let e = r.normal();
            let sd = checked_exp(v[ol + idx], "shared-loading posterior log-std")?;
            flat[idx] += sd * e;
            eps_s.push(e);
        }
    }

    let mut w_mat = state.w_mean();
    let mut eps_w = Vec::new();
    if let Some(ol) = lay.off_w_logstd {
        eps_w.reserve(d * t);
        let flat = w_mat.as_mut_slice();
        for idx in 0..d * t {
            let e = r.normal();
            let sd = checked_exp(v[ol + idx], "target-loading posterior log-std")?;
            flat[idx] += sd * e;
            eps_w.push(e);
        }
    }

    let mut eps_sig = 0.0;
    let noise = match spec.likelihood {
        Likelihood::StudentT { a, b } => NoiseModel::StudentT {
            nu: 2.0 * a,
            lambda: a / b,
        },
        Likelihood::Gaussian => {
            let o = lay.off_sigma2.expect("gaussian likelihood carries a σ² slot");
            let u = if lay.sigma2_slots == 2 {
                eps_sig = r.normal();
                let sd = checked_exp(v[o + 1], "noise posterior log-std")?;
                v[o] + sd * eps_sig
            } else {
                v[o]
            };
            let sigma2 = checked_exp(u, "noise variance")?;
            NoiseModel::Gaussian {
                sigma2,
                ln_sigma2: u,
            }
        }
    };

    let hs = if let Some(oh) = lay.off_horseshoe {
        let mut rho2 = Vec::with_capacity(d);
        let mut eps_rho2 = Vec::with_capacity(d);
        for i in 0..d {
            let e = r.normal();
            let sd = checked_exp(v[oh + d + i], "local-scale posterior log-std")?;
            rho2.push(checked_exp(v[oh + i] + sd * e, "local scale")?);
            eps_rho2.push(e);
        }
        let eps_tau2 = r.normal();
        let sd_t = checked_exp(v[oh + 2 * d + 1], "global-scale posterior log-std")?;
        let tau2 = checked_exp(v[oh + 2 * d] + sd_t * eps_tau2, "global scale")?;
        let base_nu = oh + 2 * d + 2;
        let mut nu_l = Vec::with_capacity(d);
        let mut eps_nul = Vec::with_capacity(d);
        for i in 0..d {
            let e = r.normal();
            let sd = checked_exp(v[base_nu + d + i], "local-auxiliary posterior log-std")?;
            nu_l.push(checked_exp(v[base_nu + i] + sd * e, "local auxiliary")?);
            eps_nul.push(e);
        }
        let eps_nug = r.normal();
        let sd_ng = checked_exp(v[base_nu + 2 * d + 1], "global-auxiliary posterior log-std")?;
        let nu_g = checked_exp(v[base_nu + 2 * d] + sd_ng * eps_nug, "global auxiliary")?;
        Some(HsDraw {
            rho2,
            tau2,
            nu_l,
            nu_g,
            eps_rho2,
            eps_tau2,
            eps_nul,
            eps_nug,
        })
    } else {
        None
    };

    let ard = if let Some(oa) = lay.off_ard {
        let mut alpha = Vec::with_capacity(k);
        let mut eps = Vec::with_capacity(k);
        for j in 0..k {
            let e = r.normal();
            let sd = checked_exp(v[oa + k + j], "column-scale posterior log-std")?;
            alpha.push(checked_exp(v[oa + j] + sd * e, "column scale")?);
            eps.push(e);
        }
        Some(ArdDraw { alpha, eps })
    } else {
        None
    };

    Ok(ThetaSample {
        s: s_mat,
        w: w_mat,
        mu_x: state.mu_x(),
        mu_y: state.mu_y(),
        noise,
        eps_s,
        eps_w,
        eps_sig,
        hs,
        ard,
    })
}

/// Everything one row contributes: its share of the bound plus gradient
/// payloads destined for disjoint slices of the flat gradient.
struct RowOut {
    elbo: f64,
    g_mu: DVector<f64>,
    g_w: DMatrix<f64>,
    g_s: DMatrix<f64>,
    g_lat: Vec<f64>,
    g_miss: Vec<f64>,
    g_lnsig: f64,
}

#[allow(clippy::too_many_arguments)]
fn row_pass(
    th: &ThetaSample,
    lay: &ViLayout,
    values: &[f64],
    pair: &ContrastivePair,
    idx: usize,
    s_idx: u64,
    rng: &RngStream,
    want_grad: bool,
) -> Result<RowOut> {
    let is_target = idx < lay.n;
    let (d, k) = (lay.d, lay.k);
    let t = if is_target { lay.t } else { 0 };
    let mut r = rng.derive2(idx as u64, s_idx);

    let row_off = if is_target {
        lay.target_row(idx)
    } else {
        lay.background_row(idx - lay.n)
    };
    let what = if is_target { "target" } else { "background" };
    let row_in_set = if is_target { idx } else { idx - lay.n };

    // Factor draws: means at [0..t) and [2t..2t+k), log-stds right after each.
    let mut t_tilde = DVector::zeros(t);
    let mut eps_t = vec![0.0; t];
    let mut kl = 0.0;
    for p in 0..t {
        let m = values[row_off + p];
        let l = values[row_off + t + p];
        let sd = checked_exp(l, "factor posterior log-std")?;
        let e = r.normal();
        t_tilde[p] = m + sd * e;
        eps_t[p] = e;
        kl += 0.5 * (m * m + sd * sd - 1.0 - 2.0 * l);
    }
    let z_off = row_off + 2 * t;
    let mut z_tilde = DVector::zeros(k);
    let mut eps_z = vec![0.0; k];
    for q in 0..k {
        let m = values[z_off + q];
        let l = values[z_off + k + q];
        let sd = checked_exp(l, "factor posterior log-std")?;
        let e = r.normal();
        z_tilde[q] = m + sd * e;
        eps_z[q] = e;
        kl += 0.5 * (m * m + sd * sd - 1.0 - 2.0 * l);
    }

    // Imputation draws for this row's missing cells, column-ascending.
    let (miss_list, starts, cell_off): (&[(usize, usize)], &[usize], fn(&ViLayout, usize) -> usize) =
        if is_target {
            (&lay.missing_target, &lay.miss_t_start, ViLayout::miss_target_cell)
        } else {
            (
                &lay.missing_background,
                &lay.miss_b_start,
                ViLayout::miss_background_cell,
            )
        };
    let c0 = starts[row_in_set];
    let c1 = starts[row_in_set + 1];
    let mut miss_entropy = 0.0;
    // (column, sampled value, eps, log-std).
    let mut draws: Vec<(usize, f64, f64, f64)> = Vec::with_capacity(c1 - c0);
    for c in c0..c1 {
        let o = cell_off(lay, c);
        let m = values[o];
        let l = values[o + 1];
        let sd = checked_exp(l, "imputation posterior log-std")?;
        let e = r.normal();
        draws.push((miss_list[c].1, m + sd * e, e, l));
        miss_entropy += l + 0.5 * LN_2PI_E;
    }

    // Predicted mean of the row.
    let mut mean = if is_target {
        th.mu_x.clone()
    } else {
        th.mu_y.clone()
    };
    mean.gemv(1.0, &th.s, &z_tilde, 1.0);
    if is_target {
        mean.gemv(1.0, &th.w, &t_tilde, 1.0);
    }

    // Likelihood scan over all d cells.
    let data = if is_target {
        &pair.target
    } else {
        &pair.background
    };
    let mut loglik = 0.0;
    let mut g = DVector::zeros(if want_grad { d } else { 0 });
    let mut g_lnsig = 0.0;
    let mut g_miss = vec![0.0; if want_grad { 2 * (c1 - c0) } else { 0 }];
    let mut ptr = 0usize;
    for j in 0..d {
        let x_j = if ptr < draws.len() && draws[ptr].0 == j {
            draws[ptr].1
        } else {
            data[(row_in_set, j)]
        };
        let resid = x_j - mean[j];
        let (ll, score) = th.noise.cell(resid);
        loglik += ll;
        if want_grad {
            g[j] = score;
            g_lnsig += th.noise.ln_sigma2_score(resid);
            if ptr < draws.len() && draws[ptr].0 == j {
                let (_, _, e, l) = draws[ptr];
                // d loglik / d x̃ = −score; entropy adds +1 on the log-std.
                g_miss[2 * ptr] = -score;
                g_miss[2 * ptr + 1] = -score * l.exp() * e + 1.0;
            }
        }
        if ptr < draws.len() && draws[ptr].0 == j {
            ptr += 1;
        }
    }
    if !loglik.is_finite() {
        return Err(ClvmError::NonFinite(format!(
            "{what} row {row_in_set}: non-finite likelihood contribution"
        )));
    }

    let elbo = loglik - kl + miss_entropy;
    if !want_grad {
        return Ok(RowOut {
            elbo,
            g_mu: DVector::zeros(0),
            g_w: DMatrix::zeros(0, 0),
            g_s: DMatrix::zeros(0, 0),
            g_lat: Vec::new(),
            g_miss,
            g_lnsig: 0.0,
        });
    }

    // Chain rule through mean = W t̃ + S z̃ + μ and the factor KLs.
    let g_w = if is_target {
        &g * t_tilde.transpose()
    } else {
        DMatrix::zeros(0, 0)
    };
    let g_s = &g * z_tilde.transpose();
    let bt = th.w.tr_mul(&g);
    let bz = th.s.tr_mul(&g);
    let mut g_lat = vec![0.0; 2 * (t + k)];
    for p in 0..t {
        let m = values[row_off + p];
        let l = values[row_off + t + p];
        g_lat[p] = bt[p] - m;
        g_lat[t + p] = bt[p] * l.exp() * eps_t[p] - ((2.0 * l).exp() - 1.0);
    }
    for q in 0..k {
        let m = values[z_off + q];
        let l = values[z_off + k + q];
        g_lat[2 * t + q] = bz[q] - m;
        g_lat[2 * t + k + q] = bz[q] * l.exp() * eps_z[q] - ((2.0 * l).exp() - 1.0);
    }

    Ok(RowOut {
        elbo,
        g_mu: g,
        g_w,
        g_s,
        g_lat,
        g_miss,
        g_lnsig,
    })
}

/// Evaluate one MC sample; when `grad` is given, add `scale ×` the sample's
/// exact gradient into it.
fn one_sample(
    spec: &ModelSpec,
    state: &VariationalState,
    pair: &ContrastivePair,
    s_idx: u64,
    rng: &RngStream,
    grad: Option<&mut [f64]>,
    scale: f64,
) -> Result<f64> {
    let lay = &state.layout;
    let (d, k, t) = (lay.d, lay.k, lay.t);
    let v = &state.values;
    let th = sample_theta(spec, state, s_idx, rng)?;
    let want_grad = grad.is_some();

    let rows: Vec<Result<RowOut>> = exec::map_collect(lay.n + lay.m, |idx| {
        row_pass(&th, lay, v, pair, idx, s_idx, rng, want_grad)
    });

    let mut elbo = 0.0;
    let mut dw_like = DMatrix::zeros(d, t);
    let mut ds_like = DMatrix::zeros(d, k);
    let mut lnsig_like = 0.0;
    // Fold in fixed order so parallel runs stay bit-identical.
    let mut grad = grad;
    for (idx, row) in rows.into_iter().enumerate() {
        let row = row?;
        elbo += row.elbo;
        if let Some(gv) = grad.as_deref_mut() {
            let is_target = idx < lay.n;
            let row_in_set = if is_target { idx } else { idx - lay.n };
            let mu_off = if is_target { lay.off_mu_x } else { lay.off_mu_y };
            for j in 0..d {
                gv[mu_off + j] += scale * row.g_mu[j];
            }
            if is_target {
                dw_like += &row.g_w;
            }
            ds_like += &row.g_s;
            lnsig_like += row.g_lnsig;
            let row_off = if is_target {
                lay.target_row(row_in_set)
            } else {
                lay.background_row(row_in_set)
            };
            for (sl, gval) in row.g_lat.iter().enumerate() {
                gv[row_off + sl] += scale * gval;
            }
            let (starts, cell_off): (&[usize], fn(&ViLayout, usize) -> usize) = if is_target {
                (&lay.miss_t_start, ViLayout::miss_target_cell)
            } else {
                (&lay.miss_b_start, ViLayout::miss_background_cell)
            };
            let c0 = starts[row_in_set];
            for (ci, pairvals) in row.g_miss.chunks_exact(2).enumerate() {
                let o = cell_off(lay, c0 + ci);
                gv[o] += scale * pairvals[0];
                gv[o + 1] += scale * pairvals[1];
            }
        }
    }

    // --- Model-level terms -------------------------------------------------

    // Target loading prior/penalty.
    match &spec.w_prior {
        WPrior::None => {
            if let Some(gv) = grad.as_deref_mut() {
                for idx in 0..d * t {
                    gv[lay.off_w_mean + idx] += scale * dw_like.as_slice()[idx];
                }
            }
        }
        WPrior::Group { rho, groups } => {
            elbo -= variants::group_penalty(&th.w, *rho, groups)?;
            if let Some(gv) = grad.as_deref_mut() {
                let pen = variants::group_penalty_gradient(&th.w, *rho, groups)?;
                for idx in 0..d * t {
                    gv[lay.off_w_mean + idx] +=
                        scale * (dw_like.as_slice()[idx] - pen.as_slice()[idx]);
                }
            }
        }
        WPrior::Horseshoe { b_g } => {
            let hs = th.hs.as_ref().expect("horseshoe draw exists");
            let sample = variants::HorseshoeSample {
                rho2: hs.rho2.clone(),
                tau2: hs.tau2,
                nu_local: hs.nu_l.clone(),
                nu_global: hs.nu_g,
            };
            elbo += variants::horseshoe_log_joint(&th.w, &sample, *b_g)?;
            let ol = lay.off_w_logstd.expect("horseshoe W is variational");
            let oh = lay.off_horseshoe.expect("horseshoe block exists");
            // Entropies: Gaussian q(W), lognormal q of each scale block
            // (the mean term is the log-scale Jacobian).
            for idx in 0..d * t {
                elbo += v[ol + idx] + 0.5 * LN_2PI_E;
            }
            for i in 0..d {
                elbo += v[oh + i] + v[oh + d + i] + 0.5 * LN_2PI_E; // ln ρ²_i
            }
            elbo += v[oh + 2 * d] + v[oh + 2 * d + 1] + 0.5 * LN_2PI_E; // ln τ²
            let bn = oh + 2 * d + 2;
            for i in 0..d {
                elbo += v[bn + i] + v[bn + d + i] + 0.5 * LN_2PI_E; // ln ν_i
            }
            elbo += v[bn + 2 * d] + v[bn + 2 * d + 1] + 0.5 * LN_2PI_E; // ln ν_τ

            if let Some(gv) = grad.as_deref_mut() {
                // Route dW̃ (likelihood + prior pull) into mean/log-std.
                let mut row_norm2 = vec![0.0; d];
                for i in 0..d {
                    row_norm2[i] = th.w.row(i).norm_squared();
                }
                for c in 0..t {
                    for i in 0..d {
                        let idx = c * d + i; // column-major
                        let dw = dw_like[(i, c)] - th.w[(i, c)] / (hs.rho2[i] * hs.tau2);
                        gv[lay.off_w_mean + idx] += scale * dw;
                        gv[ol + idx] +=
                            scale * (dw * v[ol + idx].exp() * th.eps_w[idx] + 1.0);
                    }
                }
                // Scale-block scores (per unconstrained log variable).
                let td = t as f64;
                let mut sum_ratio = 0.0;
                for i in 0..d {
                    let sc_c = -0.5 * td + row_norm2[i] / (2.0 * hs.rho2[i] * hs.tau2) - 1.5
                        + 1.0 / (hs.nu_l[i] * hs.rho2[i]);
                    gv[oh + i] += scale * (sc_c + 1.0);
                    gv[oh + d + i] +=
                        scale * (sc_c * v[oh + d + i].exp() * hs.eps_rho2[i] + 1.0);
                    let sc_n = -0.5 + 1.0 / (hs.nu_l[i] * hs.rho2[i]) - 1.5 + 1.0 / hs.nu_l[i];
                    gv[bn + i] += scale * (sc_n + 1.0);
                    gv[bn + d + i] +=
                        scale * (sc_n * v[bn + d + i].exp() * hs.eps_nul[i] + 1.0);
                    sum_ratio += row_norm2[i] / (2.0 * hs.rho2[i] * hs.tau2);
                }
                let sc_g = -0.5 * d as f64 * td + sum_ratio - 1.5 + 1.0 / (hs.nu_g * hs.tau2);
                gv[oh + 2 * d] += scale * (sc_g + 1.0);
                gv[oh + 2 * d + 1] +=
                    scale * (sc_g * v[oh + 2 * d + 1].exp() * hs.eps_tau2 + 1.0);
                let sc_ng = -0.5 + 1.0 / (hs.nu_g * hs.tau2) - 1.5 + 1.0 / (b_g * b_g * hs.nu_g);
                gv[bn + 2 * d] += scale * (sc_ng + 1.0);
                gv[bn + 2 * d + 1] +=
                    scale * (sc_ng * v[bn + 2 * d + 1].exp() * hs.eps_nug + 1.0);
            }
        }
    }

    // Shared loading prior.
    match &spec.s_prior {
        SPrior::None => {
            if let Some(gv) = grad.as_deref_mut() {
                for idx in 0..d * k {
                    gv[lay.off_s_mean + idx] += scale * ds_like.as_slice()[idx];
                }
            }
        }
        SPrior::Ard { a0, b0 } => {
            let ard = th.ard.as_ref().expect("ard draw exists");
            elbo += variants::ard_log_prior(&th.s, &ard.alpha, *a0, *b0)?;
            let ol = lay.off_s_logstd.expect("ard S is variational");
            let oa = lay.off_ard.expect("ard block exists");
            for idx in 0..d * k {
                elbo += v[ol + idx] + 0.5 * LN_2PI_E;
            }
            for j in 0..k {
                elbo += v[oa + j] + v[oa + k + j] + 0.5 * LN_2PI_E;
            }
            if let Some(gv) = grad.as_deref_mut() {
                for j in 0..k {
                    let col_norm2 = th.s.column(j).norm_squared();
                    for i in 0..d {
                        let idx = j * d + i;
                        let ds = ds_like[(i, j)] - th.s[(i, j)] / ard.alpha[j];
                        gv[lay.off_s_mean + idx] += scale * ds;
                        gv[ol + idx] +=
                            scale * (ds * v[ol + idx].exp() * th.eps_s[idx] + 1.0);
                    }
                    let sc_a = -0.5 * d as f64 + col_norm2 / (2.0 * ard.alpha[j]) - (a0 + 1.0)
                        + b0 / ard.alpha[j];
                    gv[oa + j] += scale * (sc_a + 1.0);
                    gv[oa + k + j] += scale * (sc_a * v[oa + k + j].exp() * ard.eps[j] + 1.0);
                }
            }
        }
    }

    // Noise variance.
    match (&th.noise, lay.sigma2_slots) {
        (NoiseModel::Gaussian { .. }, 1) => {
            if let Some(gv) = grad.as_deref_mut() {
                let o = lay.off_sigma2.expect("point σ² slot");
                gv[o] += scale * lnsig_like;
            }
        }
        (NoiseModel::Gaussian { sigma2, .. }, 2) => {
            let o = lay.off_sigma2.expect("variational σ² slots");
            let (a, b) = match spec.sigma2 {
                Sigma2Mode::VariationalIg { a, b } => (a, b),
                Sigma2Mode::Point => unreachable!("two σ² slots imply a variational posterior"),
            };
            elbo += variants::inv_gamma_logpdf(*sigma2, a, b)?;
            elbo += v[o] + v[o + 1] + 0.5 * LN_2PI_E;
            if let Some(gv) = grad.as_deref_mut() {
                let sc = lnsig_like + (-(a + 1.0) + b / sigma2);
                gv[o] += scale * (sc + 1.0);
                gv[o + 1] += scale * (sc * v[o + 1].exp() * th.eps_sig + 1.0);
            }
        }
        _ => {}
    }

    Ok(elbo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{delete_cells, ContrastivePair};
    use crate::num_core::rng::RngStream;
    use crate::variants::RowGroups;
    use crate::vi_engine::{Likelihood, ModelSpec, SPrior, Sigma2Mode, WPrior};
    use nalgebra::DMatrix;

    /// A small complete pair plus a state with every block populated at
    /// "interesting" (non-symmetric, non-zero) values.
    fn tiny_setup(spec: &ModelSpec, missing: bool) -> (ContrastivePair, VariationalState) {
        let mut rng = RngStream::new(42);
        let d = spec.d;
        let n = 5;
        let m = 4;
        let target = DMatrix::from_fn(n, d, |i, j| rng.normal() + (i + j) as f64 * 0.1);
        let background = DMatrix::from_fn(m, d, |i, j| rng.normal() - (i * j) as f64 * 0.05);
        let mut pair = ContrastivePair::new(target, background).unwrap();
        if missing {
            pair = delete_cells(&pair, 0.2, 7).unwrap();
            pair.background_mask[(1, 2)] = false;
            pair.background[(1, 2)] = f64::NAN;
        }
        let lay = ViLayout::new(spec, &pair).unwrap();
        let mut state = VariationalState::zeros(lay);
        for (i, slot) in state.values.iter_mut().enumerate() {
            // Deterministic, irregular, modest values; log-stds end up
            // in roughly [−1.5, −0.5].
            *slot = 0.3 * ((i as f64 * 0.7).sin()) - 0.1;
        }
        // Shift log-std blocks down so sampled scales stay tame.
        let l = state.layout.clone();
        let mut push_down = |off: usize, len: usize| {
            for s in &mut state.values[off..off + len] {
                *s -= 1.0;
            }
        };
        if let Some(o) = l.off_s_logstd {
            push_down(o, l.d * l.k);
        }
        if let Some(o) = l.off_w_logstd {
            push_down(o, l.d * l.t);
        }
        if let Some(o) = l.off_sigma2 {
            if l.sigma2_slots == 2 {
                push_down(o + 1, 1);
            }
        }
        if let Some(o) = l.off_horseshoe {
            push_down(o + l.d, l.d);
            push_down(o + 2 * l.d + 1, 1);
            let bn = o + 2 * l.d + 2;
            push_down(bn + l.d, l.d);
            push_down(bn + 2 * l.d + 1, 1);
        }
        if let Some(o) = l.off_ard {
            push_down(o + l.k, l.k);
        }
        (pair, state)
    }

    /// Exact-gradient property: with common random numbers the analytic
    /// gradient differentiates the *sampled* estimator, so central finite
    /// differences of `elbo_estimate` (same rng) must match coordinate-wise.
    fn check_gradient_crn(spec: &ModelSpec, missing: bool, tol: f64) {
        let (pair, state) = tiny_setup(spec, missing);
        let rng = RngStream::new(99);
        let (_, grad) = elbo_gradient(spec, &state, &pair, 2, &rng).unwrap();
        let h = 1e-5;
        let mut worst = (0usize, 0.0f64);
        for i in 0..state.layout.len {
            let mut sp = state.clone();
            sp.values[i] += h;
            let up = elbo_estimate(spec, &sp, &pair, 2, &rng).unwrap();
            sp.values[i] -= 2.0 * h;
            let dn = elbo_estimate(spec, &sp, &pair, 2, &rng).unwrap();
            let fd = (up - dn) / (2.0 * h);
            let err = (fd - grad[i]).abs() / (1.0 + fd.abs());
            if err > worst.1 {
                worst = (i, err);
            }
        }
        assert!(
            worst.1 < tol,
            "worst coordinate {} rel err {:.3e}",
            worst.0,
            worst.1
        );
    }

    #[test]
    fn gradient_matches_fd_plain_gaussian() {
        check_gradient_crn(&ModelSpec::plain(4, 2, 1), false, 1e-6);
    }

    #[test]
    fn gradient_matches_fd_plain_with_missing() {
        check_gradient_crn(&ModelSpec::plain(4, 2, 1), true, 1e-6);
    }

    #[test]
    fn gradient_matches_fd_student_t_group() {
        let spec = ModelSpec {
            d: 4,
            k: 2,
            t: 1,
            likelihood: Likelihood::StudentT { a: 2.0, b: 2.0 },
            w_prior: WPrior::Group {
                rho: 1.5,
                groups: RowGroups::per_row(4),
            },
            s_prior: SPrior::None,
            sigma2: Sigma2Mode::Point,
        };
        check_gradient_crn(&spec, true, 1e-6);
    }

    #[test]
    fn gradient_matches_fd_full_bayes() {
        let spec = ModelSpec {
            d: 4,
            k: 2,
            t: 1,
            likelihood: Likelihood::Gaussian,
            w_prior: WPrior::Horseshoe { b_g: 1.0 },
            s_prior: SPrior::Ard { a0: 1e-3, b0: 1e-3 },
            sigma2: Sigma2Mode::VariationalIg { a: 2.0, b: 2.0 },
        };
        check_gradient_crn(&spec, true, 5e-6);
    }

    #[test]
    fn gradient_matches_fd_shared_only_and_target_only() {
        // k = 0 (purely target-specific) and t = 0 (pooled factor model)
        // exercise the empty-block edges.
        check_gradient_crn(&ModelSpec::plain(4, 0, 2), false, 1e-6);
        check_gradient_crn(&ModelSpec::plain(4, 2, 0), false, 1e-6);
    }

    #[test]
    fn estimate_is_deterministic_given_stream() {
        let spec = ModelSpec::plain(4, 2, 1);
        let (pair, state) = tiny_setup(&spec, true);
        let a = elbo_estimate(&spec, &state, &pair, 3, &RngStream::new(5)).unwrap();
        let b = elbo_estimate(&spec, &state, &pair, 3, &RngStream::new(5)).unwrap();
        let c = elbo_estimate(&spec, &state, &pair, 3, &RngStream::new(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn parallel_and_sequential_estimates_are_bit_identical() {
        let spec = ModelSpec::plain(4, 2, 1);
        let (pair, state) = tiny_setup(&spec, true);
        let rng = RngStream::new(11);
        let par = elbo_gradient(&spec, &state, &pair, 2, &rng).unwrap();
        crate::exec::force_sequential(true);
        let seq = elbo_gradient(&spec, &state, &pair, 2, &rng).unwrap();
        crate::exec::force_sequential(false);
        assert_eq!(par.0, seq.0);
        assert_eq!(par.1, seq.1);
    }

    #[test]
    fn deterministic_posterior_matches_plug_in_objective() {
        // With all posterior log-stds at −30 the draws collapse onto the
        // means, so the estimate equals the plug-in objective evaluated at
        // the means, up to ~1e-13 noise.
        let spec = ModelSpec::plain(4, 2, 1);
        let (pair, mut state) = tiny_setup(&spec, false);
        let l = state.layout.clone();
        for i in 0..l.n {
            let o = l.target_row(i);
            for p in 0..l.t {
                state.values[o + l.t + p] = -30.0;
            }
            for q in 0..l.k {
                state.values[o + 2 * l.t + l.k + q] = -30.0;
            }
        }
        for j in 0..l.m {
            let o = l.background_row(j);
            for q in 0..l.k {
                state.values[o + l.k + q] = -30.0;
            }
        }
        let got = elbo_estimate(&spec, &state, &pair, 1, &RngStream::new(3)).unwrap();

        // Plug-in: Gaussian row log-densities at the latent means, minus
        // the (now essentially deterministic) KL terms.
        let s = state.s_mean();
        let w = state.w_mean();
        let mu_x = state.mu_x();
        let mu_y = state.mu_y();
        let sigma2 = state.ln_sigma2().unwrap().exp();
        let mut expected = 0.0;
        for i in 0..l.n {
            let (tm, zm) = state.target_latent_means(i);
            let mean = &w * &tm + &s * &zm + &mu_x;
            for j in 0..l.d {
                let r = pair.target[(i, j)] - mean[j];
                expected += -0.5 * (LN_2PI + sigma2.ln()) - r * r / (2.0 * sigma2);
            }
            for p in 0..l.t {
                expected -= 0.5 * (tm[p] * tm[p] - 1.0 + 60.0);
            }
            for q in 0..l.k {
                expected -= 0.5 * (zm[q] * zm[q] - 1.0 + 60.0);
            }
        }
        for jrow in 0..l.m {
            let zm = state.background_latent_mean(jrow);
            let mean = &s * &zm + &mu_y;
            for j in 0..l.d {
                let r = pair.background[(jrow, j)] - mean[j];
                expected += -0.5 * (LN_2PI + sigma2.ln()) - r * r / (2.0 * sigma2);
            }
            for q in 0..l.k {
                expected -= 0.5 * (zm[q] * zm[q] - 1.0 + 60.0);
            }
        }
        assert!(
            (got - expected).abs() < 1e-9 * (1.0 + expected.abs()),
            "got {got}, expected {expected}"
        );
    }

    #[test]
    fn divergent_state_reports_non_finite() {
        let spec = ModelSpec::plain(4, 2, 1);
        let (pair, mut state) = tiny_setup(&spec, false);
        state.values[0] = f64::INFINITY;
        assert!(matches!(
            elbo_estimate(&spec, &state, &pair, 1, &RngStream::new(5)),
            Err(ClvmError::NonFinite(_))
        ));
        let (pair, mut state) = tiny_setup(&spec, false);
        // Oversized log-std overflows the exponential transform.
        let o = state.layout.target_row(0);
        state.values[o + state.layout.t] = 400.0;
        assert!(matches!(
            elbo_estimate(&spec, &state, &pair, 1, &RngStream::new(5)),
            Err(ClvmError::NonFinite(_))
        ));
    }
}
