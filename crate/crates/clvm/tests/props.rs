//! Randomized structural checks: each test states an algebraic or
//! probabilistic law the library must satisfy for *every* input, then lets
//! proptest hunt for a counterexample.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use clvm::clvm_em::{e_step, log_likelihood, m_step, posterior_moments, ClvmParams};
use clvm::data_model::{
    default_header, delete_cells, load_csv, standardize, write_csv, ContrastivePair, Standardize,
};
use clvm::eval::{adjusted_rand_index, kmeans, procrustes_disparity};
use clvm::num_core::{gaussian_condition, quadrature_1d, sym_eig, GaussianSpec, RngStream};
use clvm::variants::{
    effective_shared_rank, group_penalty, group_penalty_gradient, prune_rows, student_t_logpdf,
    RowGroups,
};

// ---------------------------------------------------------------------------
// Shared generators
// ---------------------------------------------------------------------------

/// A well-scaled random matrix driven by one seed, so shrinking stays cheap.
fn seeded_matrix(nrows: usize, ncols: usize, seed: u64) -> DMatrix<f64> {
    RngStream::new(seed).normal_matrix(nrows, ncols)
}

/// Random SPD matrix A = BBᵀ + εI.
fn seeded_spd(dim: usize, seed: u64) -> DMatrix<f64> {
    let b = seeded_matrix(dim, dim, seed);
    &b * b.transpose() + DMatrix::identity(dim, dim) * 1e-3
}

/// Random model with bounded dimensions; k + t ≥ 1 is the library's contract.
fn seeded_params(d: usize, k: usize, t: usize, seed: u64) -> ClvmParams {
    let rng = RngStream::new(seed);
    ClvmParams {
        s: rng.derive(1).normal_matrix(d, k),
        w: rng.derive(2).normal_matrix(d, t),
        mu_x: rng.derive(3).normal_vector(d),
        mu_y: rng.derive(4).normal_vector(d),
        sigma2: 0.2 + rng.derive(5).uniform(),
    }
}

fn seeded_pair(d: usize, n: usize, m: usize, seed: u64) -> ContrastivePair {
    let rng = RngStream::new(seed);
    ContrastivePair::new(
        rng.derive(10).normal_matrix(n, d),
        rng.derive(11).normal_matrix(m, d),
    )
    .expect("rows are finite")
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

// ---------------------------------------------------------------------------
// data_model
// ---------------------------------------------------------------------------

proptest! {
    /// Standardizing and then undoing the transform is the identity on the
    /// observed cells, and never touches the missing ones.
    #[test]
    fn standardize_round_trips(
        d in 1usize..8,
        n in 2usize..20,
        m in 2usize..20,
        seed in any::<u64>(),
        frac in 0.0f64..0.4,
    ) {
        let pair = seeded_pair(d, n, m, seed);
        let holey = delete_cells(&pair, frac, seed ^ 0x5eed).unwrap();
        let (scaled, params) = standardize(&holey, Standardize::Zscore).unwrap();
        let back = params.invert_pair(&scaled);
        for (orig, rec, mask) in [
            (&holey.target, &back.target, &holey.target_mask),
            (&holey.background, &back.background, &holey.background_mask),
        ] {
            for i in 0..orig.nrows() {
                for j in 0..orig.ncols() {
                    if mask[(i, j)] {
                        prop_assert!((orig[(i, j)] - rec[(i, j)]).abs() < 1e-9);
                    } else {
                        prop_assert!(rec[(i, j)].is_nan());
                    }
                }
            }
        }
    }

    /// CSV write → load preserves every value and the missing-cell pattern.
    #[test]
    fn csv_round_trips(
        d in 1usize..6,
        n in 1usize..12,
        seed in any::<u64>(),
        frac in 0.0f64..0.5,
    ) {
        let mut m = seeded_matrix(n, d, seed);
        let mut rng = RngStream::new(seed ^ 77);
        for v in m.iter_mut() {
            if rng.uniform() < frac {
                *v = f64::NAN;
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round_trip.csv");
        write_csv(&path, &default_header(d), &m, None).unwrap();
        let loaded = load_csv(&path, &["", "NA", "NaN"]).unwrap();
        prop_assert_eq!(loaded.values.nrows(), n);
        prop_assert_eq!(loaded.values.ncols(), d);
        for i in 0..n {
            for j in 0..d {
                if m[(i, j)].is_nan() {
                    prop_assert!(!loaded.mask[(i, j)]);
                } else {
                    prop_assert!(loaded.mask[(i, j)]);
                    prop_assert!((m[(i, j)] - loaded.values[(i, j)]).abs() < 1e-12);
                }
            }
        }
    }

    /// `delete_cells` masks roughly the requested fraction, NaNs exactly the
    /// masked cells, and leaves the input pair untouched.
    #[test]
    fn delete_cells_matches_mask(
        d in 2usize..8,
        n in 5usize..30,
        seed in any::<u64>(),
        frac in 0.0f64..0.6,
    ) {
        let pair = seeded_pair(d, n, n, seed);
        let holey = delete_cells(&pair, frac, seed).unwrap();
        prop_assert!(pair.target.iter().all(|v| v.is_finite()));
        let mut masked = 0usize;
        for i in 0..n {
            for j in 0..d {
                if holey.target_mask[(i, j)] {
                    prop_assert_eq!(holey.target[(i, j)], pair.target[(i, j)]);
                } else {
                    prop_assert!(holey.target[(i, j)].is_nan());
                    masked += 1;
                }
            }
        }
        // Binomial(n·d, frac) stays within 6 standard deviations of its mean.
        let cells = (n * d) as f64;
        let slack = 6.0 * (cells * frac.max(0.01) * (1.0 - frac).max(0.01)).sqrt() + 1.0;
        prop_assert!((masked as f64 - cells * frac).abs() <= slack);
    }
}

// ---------------------------------------------------------------------------
// num_core
// ---------------------------------------------------------------------------

proptest! {
    /// Equal seeds give equal streams; derived streams are reproducible and
    /// tag-separated.
    #[test]
    fn rng_streams_reproduce(seed in any::<u64>(), tag in any::<u64>()) {
        let mut a = RngStream::new(seed);
        let mut b = RngStream::new(seed);
        for _ in 0..16 {
            prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        let mut da = RngStream::new(seed).derive(tag);
        let mut db = RngStream::new(seed).derive(tag);
        for _ in 0..16 {
            prop_assert_eq!(da.uniform().to_bits(), db.uniform().to_bits());
        }
        // Distinct tags must not replay the same stream.
        let mut t1 = RngStream::new(seed).derive(tag);
        let mut t2 = RngStream::new(seed).derive(tag.wrapping_add(1));
        let same = (0..8).all(|_| t1.uniform().to_bits() == t2.uniform().to_bits());
        prop_assert!(!same);
    }

    /// Symmetric eigendecomposition: orthonormal basis, descending values,
    /// exact reconstruction.
    #[test]
    fn sym_eig_reconstructs(dim in 1usize..8, seed in any::<u64>()) {
        let a = seeded_spd(dim, seed);
        let eig = sym_eig(&a).unwrap();
        let v = &eig.vectors;
        let id_err = (v.transpose() * v - DMatrix::identity(dim, dim)).amax();
        prop_assert!(id_err < 1e-9, "basis not orthonormal: {id_err}");
        for w in eig.values.as_slice().windows(2) {
            prop_assert!(w[0] >= w[1] - 1e-12);
        }
        let rebuilt = v * DMatrix::from_diagonal(&eig.values) * v.transpose();
        prop_assert!(max_abs_diff(&rebuilt, &a) < 1e-8 * (1.0 + a.amax()));
    }

    /// Conditioning a Gaussian can only shrink marginal variances, and the
    /// conditional covariance stays symmetric PSD.
    #[test]
    fn conditioning_shrinks_variance(
        dim_x in 1usize..5,
        dim_y in 1usize..5,
        seed in any::<u64>(),
    ) {
        let dim = dim_x + dim_y;
        let cov = seeded_spd(dim, seed);
        let mean = RngStream::new(seed ^ 3).normal_vector(dim);
        let spec = GaussianSpec { mean, cov: cov.clone() };
        let obs = RngStream::new(seed ^ 9).normal_vector(dim_y);
        let observed: Vec<usize> = (dim_x..dim).collect();
        let cond = gaussian_condition(&spec, &observed, &obs).unwrap();
        let sym_err = (&cond.cov - cond.cov.transpose()).amax();
        prop_assert!(sym_err < 1e-9);
        for i in 0..dim_x {
            prop_assert!(cond.cov[(i, i)] <= cov[(i, i)] + 1e-9);
            prop_assert!(cond.cov[(i, i)] >= -1e-9);
        }
        let eig = sym_eig(&cond.cov).unwrap();
        prop_assert!(eig.values.min() > -1e-8 * (1.0 + cov.amax()));
    }

    /// The adaptive Simpson rule is exact on cubics and additive over
    /// adjacent intervals.
    #[test]
    fn quadrature_exact_on_cubics(
        c0 in -3.0f64..3.0, c1 in -3.0f64..3.0,
        c2 in -3.0f64..3.0, c3 in -3.0f64..3.0,
        lo in -4.0f64..0.0, len in 0.1f64..6.0, split in 0.1f64..0.9,
    ) {
        let f = |x: f64| c0 + c1 * x + c2 * x * x + c3 * x * x * x;
        let antiderivative =
            |x: f64| c0 * x + c1 * x * x / 2.0 + c2 * x * x * x / 3.0 + c3 * x * x * x * x / 4.0;
        let hi = lo + len;
        let exact = antiderivative(hi) - antiderivative(lo);
        let got = quadrature_1d(f, lo, hi, 1e-10).unwrap();
        prop_assert!((got - exact).abs() < 1e-8 * (1.0 + exact.abs()));

        let mid = lo + split * len;
        let left = quadrature_1d(f, lo, mid, 1e-10).unwrap();
        let right = quadrature_1d(f, mid, hi, 1e-10).unwrap();
        prop_assert!((left + right - got).abs() < 1e-7 * (1.0 + got.abs()));
    }
}

// ---------------------------------------------------------------------------
// clvm_em
// ---------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Posterior second moments are symmetric and PSD, and the implied
    /// covariance E[uuᵀ] − E[u]E[u]ᵀ is PSD as well.
    #[test]
    fn posterior_moments_are_psd(
        d in 2usize..7,
        k in 0usize..3,
        t in 0usize..3,
        seed in any::<u64>(),
    ) {
        let (k, t) = if k + t == 0 { (1, 0) } else { (k, t) };
        let params = seeded_params(d, k, t, seed);
        let x = RngStream::new(seed ^ 21).normal_vector(d);
        for is_target in [true, false] {
            let t_dim = if is_target { t } else { 0 };
            let q = k + t_dim;
            if q == 0 {
                continue;
            }
            let post = posterior_moments(&params, &x, is_target).unwrap();
            prop_assert_eq!(post.mean_t.len(), t_dim);
            prop_assert_eq!(post.mean_z.len(), k);
            // Assemble the joint posterior over u = (t, z) and check that
            // E[uuᵀ] − E[u]E[u]ᵀ is a symmetric PSD covariance.
            let mut mean_u = DVector::zeros(q);
            mean_u.rows_mut(0, t_dim).copy_from(&post.mean_t);
            mean_u.rows_mut(t_dim, k).copy_from(&post.mean_z);
            let mut second = DMatrix::zeros(q, q);
            second.view_mut((0, 0), (t_dim, t_dim)).copy_from(&post.e_tt);
            second.view_mut((t_dim, t_dim), (k, k)).copy_from(&post.e_zz);
            second.view_mut((t_dim, 0), (k, t_dim)).copy_from(&post.e_zt);
            second
                .view_mut((0, t_dim), (t_dim, k))
                .copy_from(&post.e_zt.transpose());
            let sym_err = (&second - second.transpose()).amax();
            prop_assert!(sym_err < 1e-9);
            let cov = &second - &mean_u * mean_u.transpose();
            let eig = sym_eig(&cov).unwrap();
            prop_assert!(eig.values.min() > -1e-8);
        }
    }

    /// One full EM update never lowers the exact marginal log-likelihood.
    #[test]
    fn em_update_is_monotone(
        d in 2usize..6,
        k in 0usize..3,
        t in 0usize..3,
        n in 4usize..12,
        m in 4usize..12,
        seed in any::<u64>(),
    ) {
        let (k, t) = if k + t == 0 { (1, 0) } else { (k, t) };
        let params = seeded_params(d, k, t, seed);
        let pair = seeded_pair(d, n, m, seed ^ 0xE);
        let before = log_likelihood(&params, &pair).unwrap();
        let stats = e_step(&params, &pair).unwrap();
        let updated = m_step(&stats, &params).unwrap();
        let after = log_likelihood(&updated, &pair).unwrap();
        prop_assert!(
            after >= before - 1e-8,
            "EM step lowered the log-likelihood: {before} → {after}"
        );
    }
}

// ---------------------------------------------------------------------------
// variants
// ---------------------------------------------------------------------------

proptest! {
    /// The group penalty is nonnegative, positively 1-homogeneous, and its
    /// smoothed gradient matches finite differences away from zero rows.
    #[test]
    fn group_penalty_homogeneous(
        d in 1usize..8,
        t in 1usize..4,
        seed in any::<u64>(),
        rho in 0.0f64..50.0,
        c in 0.1f64..10.0,
    ) {
        let w = seeded_matrix(d, t, seed);
        let groups = RowGroups::per_row(d);
        let p = group_penalty(&w, rho, &groups).unwrap();
        prop_assert!(p >= 0.0);
        let scaled = group_penalty(&(&w * c), rho, &groups).unwrap();
        prop_assert!((scaled - c * p).abs() < 1e-8 * (1.0 + p));

        let grad = group_penalty_gradient(&w, rho, &groups).unwrap();
        let h = 1e-6;
        for (i, j) in [(0usize, 0usize), (d - 1, t - 1)] {
            if w.row(i).norm() < 1e-3 {
                continue; // the true gradient is set-valued at a zero row
            }
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[(i, j)] += h;
            minus[(i, j)] -= h;
            let fd = (group_penalty(&plus, rho, &groups).unwrap()
                - group_penalty(&minus, rho, &groups).unwrap())
                / (2.0 * h);
            prop_assert!((grad[(i, j)] - fd).abs() < 1e-4 * (1.0 + fd.abs()));
        }
    }

    /// Pruning is monotone: any row pruned at threshold δ stays pruned at
    /// every larger δ.
    #[test]
    fn pruning_monotone_in_delta(
        d in 1usize..12,
        seed in any::<u64>(),
        delta in 1e-6f64..1e-1,
        grow in 1.5f64..100.0,
    ) {
        let mut rng = RngStream::new(seed);
        let q_rho: Vec<(f64, f64)> = (0..d)
            .map(|_| (rng.uniform_in(-12.0, 2.0), rng.uniform_in(0.05, 2.0)))
            .collect();
        let q_tau = (rng.uniform_in(-4.0, 1.0), rng.uniform_in(0.05, 1.0));
        let tight = prune_rows(&q_rho, q_tau, delta, 0.9).unwrap();
        let loose = prune_rows(&q_rho, q_tau, delta * grow, 0.9).unwrap();
        for (a, b) in tight.iter().zip(&loose) {
            prop_assert!(!a || *b, "pruned at δ but kept at {grow}·δ");
        }
    }

    /// Effective rank is bounded by the column count and invariant to
    /// rescaling the whole loading.
    #[test]
    fn effective_rank_scale_invariant(
        d in 1usize..8,
        k in 1usize..6,
        seed in any::<u64>(),
        c in 0.01f64..100.0,
        threshold in 0.001f64..0.5,
    ) {
        let s = seeded_matrix(d, k, seed);
        let r = effective_shared_rank(&s, threshold);
        prop_assert!(r <= k);
        prop_assert_eq!(effective_shared_rank(&(&s * c), threshold), r);
    }

    /// The Student-t log-density is symmetric and unimodal in the residual.
    #[test]
    fn student_t_symmetric_unimodal(
        r in 0.0f64..20.0,
        nu in 0.5f64..40.0,
        lambda in 0.05f64..10.0,
    ) {
        let at = student_t_logpdf(r, nu, lambda);
        prop_assert!((at - student_t_logpdf(-r, nu, lambda)).abs() < 1e-12);
        let further = student_t_logpdf(r + 0.5, nu, lambda);
        prop_assert!(further <= at + 1e-12);
    }
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

proptest! {
    /// ARI is 1 on identical partitions, bounded by 1, and invariant to
    /// relabeling either side.
    #[test]
    fn ari_relabel_invariant(labels in prop::collection::vec(0i64..5, 4..60), shift in 1i64..7) {
        let self_score = adjusted_rand_index(&labels, &labels).unwrap();
        prop_assert!((self_score - 1.0).abs() < 1e-12);
        let relabeled: Vec<i64> = labels.iter().map(|&l| (l + shift) % 7 + 100).collect();
        // Relabeling is a bijection on the label alphabet, so the score is
        // unchanged even though every name differs.
        let cross = adjusted_rand_index(&labels, &relabeled).unwrap();
        let base: Vec<i64> = labels.iter().map(|&l| (l + shift) % 7).collect();
        let same = adjusted_rand_index(&labels, &base).unwrap();
        prop_assert!((cross - same).abs() < 1e-12);
        prop_assert!(cross <= 1.0 + 1e-12);
    }

    /// k-means emits one in-range label per row and is seed-deterministic.
    #[test]
    fn kmeans_deterministic(
        n in 4usize..40,
        d in 1usize..5,
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        prop_assume!(n >= k);
        let data = seeded_matrix(n, d, seed);
        let a = kmeans(&data, k, seed, 3).unwrap();
        let b = kmeans(&data, k, seed, 3).unwrap();
        prop_assert_eq!(a.len(), n);
        prop_assert!(a.iter().all(|&l| l < k));
        prop_assert_eq!(a, b);
    }

    /// Procrustes disparity vanishes exactly when one cloud is a rotated,
    /// translated, rescaled copy of the other.
    #[test]
    fn procrustes_zero_on_similarity_transforms(
        n in 3usize..30,
        d in 1usize..4,
        seed in any::<u64>(),
        scale in 0.2f64..5.0,
    ) {
        let x = seeded_matrix(n, d, seed);
        prop_assume!(x.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        // Random rotation via QR of a square Gaussian draw.
        let q = seeded_matrix(d, d, seed ^ 0xabc).qr().q();
        let shift = RngStream::new(seed ^ 0xdef).normal_vector(d);
        let mut y = &x * &q * scale;
        for i in 0..n {
            for j in 0..d {
                y[(i, j)] += shift[j];
            }
        }
        let disp = procrustes_disparity(&x, &y).unwrap();
        prop_assert!(disp.abs() < 1e-9, "disparity {disp} on a similarity copy");
        let noisy = &y + seeded_matrix(n, d, seed ^ 0x123) * 0.5;
        prop_assert!(procrustes_disparity(&x, &noisy).unwrap() >= -1e-12);
    }
}
