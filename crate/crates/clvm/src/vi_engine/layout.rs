//! Flat-vector layout of all variational parameters.
//!
//! Every quantity the optimizer touches — model parameters, posterior means
//! and log-standard-deviations, per-row latent factors, per-cell imputation
//! factors — occupies a fixed slice of one `Vec<f64>`. Gradients share the
//! layout, so Adam is a single elementwise loop.

use nalgebra::{DMatrix, DVector};

use super::{Likelihood, ModelSpec, SPrior, Sigma2Mode, WPrior};
use crate::data_model::ContrastivePair;
use crate::error::{ClvmError, Result};

/// Offsets of every block inside the flat parameter vector.
///
/// Block order: S means, W means, μx, μy, then optional S/W log-stds, the
/// noise-variance slot(s), horseshoe and ARD scale blocks, per-row latent
/// factors (target then background), and per-missing-cell factors.
/// Within a latent row the order is `[t means | t log-stds | z means |
/// z log-stds]`; a missing-cell factor is `[mean, log-std]`.
#[derive(Debug, Clone)]
pub struct ViLayout {
    pub d: usize,
    pub k: usize,
    pub t: usize,
    pub n: usize,
    pub m: usize,
    /// S gets a Gaussian posterior (ARD) instead of a point value.
    pub s_variational: bool,
    /// W gets a Gaussian posterior (horseshoe) instead of a point value.
    pub w_variational: bool,
    /// 0 under Student-t, 1 for a point ln σ², 2 for a lognormal posterior.
    pub sigma2_slots: usize,
    pub horseshoe: bool,
    pub ard: bool,

    /// Missing target cells in row-major scan order.
    pub missing_target: Vec<(usize, usize)>,
    /// Missing background cells in row-major scan order.
    pub missing_background: Vec<(usize, usize)>,
    /// CSR-style starts: missing cells of target row i occupy
    /// `missing_target[miss_t_start[i]..miss_t_start[i+1]]`.
    pub miss_t_start: Vec<usize>,
    pub miss_b_start: Vec<usize>,

    pub off_s_mean: usize,
    pub off_w_mean: usize,
    pub off_mu_x: usize,
    pub off_mu_y: usize,
    pub off_s_logstd: Option<usize>,
    pub off_w_logstd: Option<usize>,
    /// First σ² slot (mean of ln σ², or the point value).
    pub off_sigma2: Option<usize>,
    /// Horseshoe block: `[ln ρ² means d | ln ρ² log-stds d | ln τ² mean |
    /// ln τ² log-std | ln ν means d | ln ν log-stds d | ln ν_τ mean |
    /// ln ν_τ log-std]`.
    pub off_horseshoe: Option<usize>,
    /// ARD block: `[ln α means k | ln α log-stds k]`.
    pub off_ard: Option<usize>,
    pub off_target_latent: usize,
    pub off_background_latent: usize,
    pub off_miss_target: usize,
    pub off_miss_background: usize,
    pub len: usize,
}

impl ViLayout {
    pub fn new(spec: &ModelSpec, pair: &ContrastivePair) -> Result<Self> {
        spec.validate(pair)?;
        let (d, k, t) = (spec.d, spec.k, spec.t);
        let (n, m) = (pair.n(), pair.m());

        let s_variational = matches!(spec.s_prior, SPrior::Ard { .. });
        let w_variational = matches!(spec.w_prior, WPrior::Horseshoe { .. });
        let sigma2_slots = match (&spec.likelihood, &spec.sigma2) {
            (Likelihood::StudentT { .. }, _) => 0,
            (Likelihood::Gaussian, Sigma2Mode::Point) => 1,
            (Likelihood::Gaussian, Sigma2Mode::VariationalIg { .. }) => 2,
        };
        let horseshoe = matches!(spec.w_prior, WPrior::Horseshoe { .. });
        let ard = matches!(spec.s_prior, SPrior::Ard { .. });

        let mut missing_target = Vec::new();
        let mut miss_t_start = Vec::with_capacity(n + 1);
        miss_t_start.push(0);
        for i in 0..n {
            for j in 0..d {
                if !pair.target_mask[(i, j)] {
                    missing_target.push((i, j));
                }
            }
            miss_t_start.push(missing_target.len());
        }
        let mut missing_background = Vec::new();
        let mut miss_b_start = Vec::with_capacity(m + 1);
        miss_b_start.push(0);
        for i in 0..m {
            for j in 0..d {
                if !pair.background_mask[(i, j)] {
                    missing_background.push((i, j));
                }
            }
            miss_b_start.push(missing_background.len());
        }

        let mut cursor = 0usize;
        let mut take = |len: usize| {
            let off = cursor;
            cursor += len;
            off
        };

        let off_s_mean = take(d * k);
        let off_w_mean = take(d * t);
        let off_mu_x = take(d);
        let off_mu_y = take(d);
        let off_s_logstd = s_variational.then(|| take(d * k));
        let off_w_logstd = w_variational.then(|| take(d * t));
        let off_sigma2 = (sigma2_slots > 0).then(|| take(sigma2_slots));
        let off_horseshoe = horseshoe.then(|| take(4 * d + 4));
        let off_ard = ard.then(|| take(2 * k));
        let off_target_latent = take(n * 2 * (t + k));
        let off_background_latent = take(m * 2 * k);
        let off_miss_target = take(2 * missing_target.len());
        let off_miss_background = take(2 * missing_background.len());

        Ok(Self {
            d,
            k,
            t,
            n,
            m,
            s_variational,
            w_variational,
            sigma2_slots,
            horseshoe,
            ard,
            missing_target,
            missing_background,
            miss_t_start,
            miss_b_start,
            off_s_mean,
            off_w_mean,
            off_mu_x,
            off_mu_y,
            off_s_logstd,
            off_w_logstd,
            off_sigma2,
            off_horseshoe,
            off_ard,
            off_target_latent,
            off_background_latent,
            off_miss_target,
            off_miss_background,
            len: cursor,
        })
    }

    /// Offset of target row i's latent block (`2(t+k)` slots).
    pub fn target_row(&self, i: usize) -> usize {
        debug_assert!(i < self.n);
        self.off_target_latent + i * 2 * (self.t + self.k)
    }

    /// Offset of background row j's latent block (`2k` slots).
    pub fn background_row(&self, j: usize) -> usize {
        debug_assert!(j < self.m);
        self.off_background_latent + j * 2 * self.k
    }

    /// Offset of the c-th missing target cell's `[mean, log-std]` pair.
    pub fn miss_target_cell(&self, c: usize) -> usize {
        self.off_miss_target + 2 * c
    }

    pub fn miss_background_cell(&self, c: usize) -> usize {
        self.off_miss_background + 2 * c
    }
}

/// The state the optimizer owns: a layout plus the flat value vector.
#[derive(Debug, Clone)]
pub struct VariationalState {
    pub layout: ViLayout,
    pub values: Vec<f64>,
}

impl VariationalState {
    pub fn zeros(layout: ViLayout) -> Self {
        let values = vec![0.0; layout.len];
        Self { layout, values }
    }

    pub fn s_mean(&self) -> DMatrix<f64> {
        let l = &self.layout;
        DMatrix::from_column_slice(l.d, l.k, &self.values[l.off_s_mean..l.off_s_mean + l.d * l.k])
    }

    pub fn w_mean(&self) -> DMatrix<f64> {
        let l = &self.layout;
        DMatrix::from_column_slice(l.d, l.t, &self.values[l.off_w_mean..l.off_w_mean + l.d * l.t])
    }

    pub fn mu_x(&self) -> DVector<f64> {
        let l = &self.layout;
        DVector::from_column_slice(&self.values[l.off_mu_x..l.off_mu_x + l.d])
    }

    pub fn mu_y(&self) -> DVector<f64> {
        let l = &self.layout;
        DVector::from_column_slice(&self.values[l.off_mu_y..l.off_mu_y + l.d])
    }

    pub fn set_s_mean(&mut self, s: &DMatrix<f64>) {
        let l = &self.layout;
        self.values[l.off_s_mean..l.off_s_mean + l.d * l.k].copy_from_slice(s.as_slice());
    }

    pub fn set_w_mean(&mut self, w: &DMatrix<f64>) {
        let l = &self.layout;
        self.values[l.off_w_mean..l.off_w_mean + l.d * l.t].copy_from_slice(w.as_slice());
    }

    /// Current ln σ² (mean of the posterior when variational).
    pub fn ln_sigma2(&self) -> Option<f64> {
        self.layout.off_sigma2.map(|o| self.values[o])
    }

    /// Lognormal posterior (mean, log-std) of ln σ², when variational.
    pub fn sigma2_posterior(&self) -> Option<(f64, f64)> {
        match (self.layout.off_sigma2, self.layout.sigma2_slots) {
            (Some(o), 2) => Some((self.values[o], self.values[o + 1])),
            _ => None,
        }
    }

    /// Posterior (mean, log-std) pairs of the horseshoe ln ρ²_i, row by row.
    pub fn horseshoe_ln_rho2(&self) -> Option<Vec<(f64, f64)>> {
        let l = &self.layout;
        l.off_horseshoe.map(|o| {
            (0..l.d)
                .map(|i| (self.values[o + i], self.values[o + l.d + i]))
                .collect()
        })
    }

    /// Posterior (mean, log-std) of the horseshoe ln τ².
    pub fn horseshoe_ln_tau2(&self) -> Option<(f64, f64)> {
        let l = &self.layout;
        l.off_horseshoe
            .map(|o| (self.values[o + 2 * l.d], self.values[o + 2 * l.d + 1]))
    }

    /// Posterior (mean, log-std) pairs of the ARD ln α_j, column by column.
    pub fn ard_ln_alpha(&self) -> Option<Vec<(f64, f64)>> {
        let l = &self.layout;
        l.off_ard.map(|o| {
            (0..l.k)
                .map(|j| (self.values[o + j], self.values[o + l.k + j]))
                .collect()
        })
    }

    /// Variational means of target row i's factors, `(t_i, z_i)`.
    pub fn target_latent_means(&self, i: usize) -> (DVector<f64>, DVector<f64>) {
        let l = &self.layout;
        let o = l.target_row(i);
        let t_mean = DVector::from_column_slice(&self.values[o..o + l.t]);
        let z_mean = DVector::from_column_slice(&self.values[o + 2 * l.t..o + 2 * l.t + l.k]);
        (t_mean, z_mean)
    }

    /// Variational mean of background row j's shared factor.
    pub fn background_latent_mean(&self, j: usize) -> DVector<f64> {
        let l = &self.layout;
        let o = l.background_row(j);
        DVector::from_column_slice(&self.values[o..o + l.k])
    }

    /// Target factor means as an n×(t+k) matrix, target block first —
    /// the same convention as the EM fit.
    pub fn target_latent_matrix(&self) -> DMatrix<f64> {
        let l = &self.layout;
        let mut out = DMatrix::zeros(l.n, l.t + l.k);
        for i in 0..l.n {
            let (t_m, z_m) = self.target_latent_means(i);
            for p in 0..l.t {
                out[(i, p)] = t_m[p];
            }
            for q in 0..l.k {
                out[(i, l.t + q)] = z_m[q];
            }
        }
        out
    }

    pub fn background_latent_matrix(&self) -> DMatrix<f64> {
        let l = &self.layout;
        let mut out = DMatrix::zeros(l.m, l.k);
        for j in 0..l.m {
            let z_m = self.background_latent_mean(j);
            for q in 0..l.k {
                out[(j, q)] = z_m[q];
            }
        }
        out
    }

    /// Check every entry is finite; `what` names the caller in the error.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if let Some(idx) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(ClvmError::NonFinite(format!(
                "{what}: non-finite variational parameter at flat index {idx}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::generate_synthetic_subgroups;
    use crate::vi_engine::ModelSpec;

    fn toy_pair() -> ContrastivePair {
        generate_synthetic_subgroups(3, 8, 11).unwrap()
    }

    #[test]
    fn plain_layout_has_compact_blocks() {
        let pair = toy_pair();
        let spec = ModelSpec::plain(30, 4, 2);
        let l = ViLayout::new(&spec, &pair).unwrap();
        assert_eq!(l.off_s_mean, 0);
        assert_eq!(l.off_w_mean, 30 * 4);
        assert_eq!(l.off_mu_x, 30 * 4 + 30 * 2);
        assert!(l.off_s_logstd.is_none());
        assert!(l.off_w_logstd.is_none());
        assert_eq!(l.sigma2_slots, 1);
        assert!(l.off_horseshoe.is_none());
        // 12 target rows, 8 background rows, no missing cells.
        assert_eq!(l.missing_target.len(), 0);
        let expected = 30 * 4 + 30 * 2 + 30 + 30 + 1 + 12 * 2 * 6 + 8 * 2 * 4;
        assert_eq!(l.len, expected);
    }

    #[test]
    fn full_variant_layout_accounts_for_every_block() {
        let mut pair = toy_pair();
        // Knock out two target cells and one background cell.
        pair.target_mask[(0, 3)] = false;
        pair.target_mask[(5, 7)] = false;
        pair.background_mask[(2, 1)] = false;
        let spec = ModelSpec {
            d: 30,
            k: 4,
            t: 2,
            likelihood: Likelihood::Gaussian,
            w_prior: WPrior::Horseshoe { b_g: 1.0 },
            s_prior: SPrior::Ard { a0: 1e-3, b0: 1e-3 },
            sigma2: Sigma2Mode::VariationalIg { a: 2.0, b: 2.0 },
        };
        let l = ViLayout::new(&spec, &pair).unwrap();
        assert!(l.s_variational && l.w_variational);
        assert_eq!(l.sigma2_slots, 2);
        assert_eq!(l.missing_target.len(), 2);
        assert_eq!(l.missing_background.len(), 1);
        assert_eq!(l.miss_t_start[1] - l.miss_t_start[0], 1); // row 0 has one
        let expected = 30 * 4 + 30 * 2 // means
            + 30 + 30                   // intercepts
            + 30 * 4 + 30 * 2           // log-stds
            + 2                          // sigma2 posterior
            + 4 * 30 + 4                 // horseshoe
            + 2 * 4                      // ard
            + 12 * 2 * 6 + 8 * 2 * 4     // latents
            + 2 * 2 + 2 * 1; // missing cells
        assert_eq!(l.len, expected);
        assert_eq!(l.off_miss_background + 2, l.len);
    }

    #[test]
    fn student_t_has_no_sigma_slot() {
        let pair = toy_pair();
        let spec = ModelSpec::robust(30, 4, 2);
        let l = ViLayout::new(&spec, &pair).unwrap();
        assert_eq!(l.sigma2_slots, 0);
        assert!(l.off_sigma2.is_none());
    }

    #[test]
    fn state_round_trips_matrices() {
        let pair = toy_pair();
        let spec = ModelSpec::plain(30, 4, 2);
        let l = ViLayout::new(&spec, &pair).unwrap();
        let mut state = VariationalState::zeros(l);
        let mut rng = crate::num_core::rng::RngStream::new(3);
        let s = rng.normal_matrix(30, 4);
        let w = rng.normal_matrix(30, 2);
        state.set_s_mean(&s);
        state.set_w_mean(&w);
        assert_eq!(state.s_mean(), s);
        assert_eq!(state.w_mean(), w);
        state.ensure_finite("test").unwrap();
        state.values[5] = f64::NAN;
        assert!(state.ensure_finite("test").is_err());
    }

    #[test]
    fn latent_matrix_orders_target_block_first() {
        let pair = toy_pair();
        let spec = ModelSpec::plain(30, 4, 2);
        let l = ViLayout::new(&spec, &pair).unwrap();
        let row0 = l.target_row(0);
        let mut state = VariationalState::zeros(l);
        // Row 0: t means 10, 11; z means 20, 21, 22, 23.
        state.values[row0] = 10.0;
        state.values[row0 + 1] = 11.0;
        for q in 0..4 {
            state.values[row0 + 4 + q] = 20.0 + q as f64;
        }
        let mat = state.target_latent_matrix();
        assert_eq!(mat[(0, 0)], 10.0);
        assert_eq!(mat[(0, 1)], 11.0);
        assert_eq!(mat[(0, 2)], 20.0);
        assert_eq!(mat[(0, 5)], 23.0);
    }

    #[test]
    fn student_t_rejects_variational_sigma() {
        let pair = toy_pair();
        let spec = ModelSpec {
            sigma2: Sigma2Mode::VariationalIg { a: 2.0, b: 2.0 },
            ..ModelSpec::robust(30, 4, 2)
        };
        assert!(matches!(
            ViLayout::new(&spec, &pair),
            Err(ClvmError::Config(_))
        ));
    }
}
