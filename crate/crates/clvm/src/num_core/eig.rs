//! Symmetric eigendecomposition with a canonical ordering.

use nalgebra::{DMatrix, DVector};

use crate::error::{ClvmError, Result};

/// Relative asymmetry tolerated before a matrix is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Eigenvalues, largest first.
    pub values: DVector<f64>,
    /// Eigenvectors as columns, matching `values`.
    pub vectors: DMatrix<f64>,
}

/// Decompose a symmetric matrix.
///
/// The input is checked for symmetry (relative tolerance [`SYMMETRY_TOL`]
/// against its largest entry), explicitly symmetrized to remove roundoff
/// skew, and decomposed. Eigenvalues are returned in descending order and
/// each eigenvector's sign is fixed so its first component of non-negligible
/// magnitude is positive, making results reproducible across runs.
pub fn sym_eig(a: &DMatrix<f64>) -> Result<SymEig> {
    if a.nrows() != a.ncols() {
        return Err(ClvmError::Dimension(format!(
            "sym_eig needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if max_asym > SYMMETRY_TOL * scale {
        return Err(ClvmError::NotSymmetric {
            max_asym,
            tol: SYMMETRY_TOL * scale,
        });
    }

    let sym = (a + a.transpose()) * 0.5;
    let decomp = sym.symmetric_eigen();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        decomp.eigenvalues[j]
            .partial_cmp(&decomp.eigenvalues[i])
            .expect("eigenvalues of a real symmetric matrix are finite")
    });

    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = decomp.eigenvalues[src];
        let mut col = decomp.eigenvectors.column(src).clone_owned();
        canonical_sign(&mut col);
        vectors.set_column(dst, &col);
    }

    Ok(SymEig { values, vectors })
}

/// Flip `v` in place so its first component with magnitude above a small
/// threshold is positive.
pub fn canonical_sign(v: &mut DVector<f64>) {
    let thresh = 1e-12 * v.amax().max(1e-300);
    for &x in v.iter() {
        if x.abs() > thresh {
            if x < 0.0 {
                v.neg_mut();
            }
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num_core::rng::RngStream;

    /// Characteristic polynomial coefficients via the Faddeev–LeVerrier
    /// recurrence: det(λI − A) = λ^n + c[0] λ^{n−1} + … + c[n−1].
    fn charpoly(a: &DMatrix<f64>) -> Vec<f64> {
        let n = a.nrows();
        let mut coeffs = Vec::with_capacity(n);
        let mut m = DMatrix::<f64>::zeros(n, n);
        let mut c = 1.0;
        for k in 1..=n {
            m = a * &m;
            for i in 0..n {
                m[(i, i)] += c;
            }
            c = -(a * &m).trace() / k as f64;
            coeffs.push(c);
        }
        coeffs
    }

    fn charpoly_eval(coeffs: &[f64], lambda: f64) -> f64 {
        let mut p = 1.0;
        for &c in coeffs {
            p = p * lambda + c;
        }
        p
    }

    fn random_symmetric(n: usize, seed: u64) -> DMatrix<f64> {
        let mut r = RngStream::new(seed);
        let b = r.normal_matrix(n, n);
        &b + b.transpose()
    }

    #[test]
    fn reconstructs_matrix() {
        let a = random_symmetric(6, 1);
        let e = sym_eig(&a).unwrap();
        let recon =
            &e.vectors * DMatrix::from_diagonal(&e.values) * e.vectors.transpose();
        assert!((&a - recon).amax() < 1e-9);
    }

    #[test]
    fn eigenvalues_descend_and_satisfy_charpoly() {
        let a = random_symmetric(5, 2);
        let e = sym_eig(&a).unwrap();
        for w in e.values.as_slice().windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
        let coeffs = charpoly(&a);
        // Each returned eigenvalue must be a root of det(λI − A). Scale the
        // residual by the polynomial's derivative estimate for a meaningful
        // tolerance.
        for &lam in e.values.iter() {
            let p = charpoly_eval(&coeffs, lam);
            let h = 1e-6 * lam.abs().max(1.0);
            let dp = (charpoly_eval(&coeffs, lam + h) - charpoly_eval(&coeffs, lam - h)) / (2.0 * h);
            assert!(
                (p / dp.abs().max(1.0)).abs() < 1e-6,
                "charpoly residual {p} at λ={lam}"
            );
        }
    }

    #[test]
    fn vectors_are_orthonormal() {
        let a = random_symmetric(8, 3);
        let e = sym_eig(&a).unwrap();
        let gram = e.vectors.transpose() * &e.vectors;
        assert!((gram - DMatrix::identity(8, 8)).amax() < 1e-10);
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let a = random_symmetric(4, 4);
        let e1 = sym_eig(&a).unwrap();
        let e2 = sym_eig(&a).unwrap();
        assert_eq!(e1.vectors.as_slice(), e2.vectors.as_slice());
        for j in 0..4 {
            let col = e1.vectors.column(j);
            let first = col.iter().find(|x| x.abs() > 1e-12).unwrap();
            assert!(*first > 0.0);
        }
    }

    #[test]
    fn known_2x2() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1 with vectors (1,1)/√2, (1,-1)/√2.
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let e = sym_eig(&a).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-12);
        assert!((e.values[1] - 1.0).abs() < 1e-12);
        let s = 1.0 / 2.0f64.sqrt();
        assert!((e.vectors[(0, 0)] - s).abs() < 1e-12);
        assert!((e.vectors[(1, 0)] - s).abs() < 1e-12);
        assert!((e.vectors[(0, 1)] - s).abs() < 1e-12);
        assert!((e.vectors[(1, 1)] + s).abs() < 1e-12);
    }

    #[test]
    fn rejects_asymmetric() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]);
        assert!(matches!(
            sym_eig(&a),
            Err(ClvmError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn rejects_non_square() {
        let a = DMatrix::zeros(2, 3);
        assert!(matches!(sym_eig(&a), Err(ClvmError::Dimension(_))));
    }
}
