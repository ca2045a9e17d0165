//! One-dimensional adaptive quadrature.

use crate::error::{ClvmError, Result};

/// Integrate `f` over `[lo, hi]` to absolute tolerance `tol`.
///
/// Adaptive Simpson with the usual Richardson error estimate. The recursion
/// is bounded by an evaluation budget; exhausting it returns an error rather
/// than a silently inaccurate value.
pub fn quadrature_1d<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(ClvmError::Config(
            "quadrature_1d requires finite integration limits".into(),
        ));
    }
    if !(tol > 0.0) {
        return Err(ClvmError::Config("quadrature tolerance must be positive".into()));
    }
    if lo == hi {
        return Ok(0.0);
    }
    let (a, b, sign) = if lo < hi { (lo, hi, 1.0) } else { (hi, lo, -1.0) };

    let mut budget: u64 = 2_000_000;
    let fa = eval(&f, a, &mut budget)?;
    let fb = eval(&f, b, &mut budget)?;
    let m = 0.5 * (a + b);
    let fm = eval(&f, m, &mut budget)?;
    let whole = simpson(a, b, fa, fm, fb);
    let v = adaptive(&f, a, b, fa, fm, fb, whole, tol, 60, &mut budget)?;
    Ok(sign * v)
}

fn eval<F: Fn(f64) -> f64>(f: &F, x: f64, budget: &mut u64) -> Result<f64> {
    if *budget == 0 {
        return Err(ClvmError::Integration(
            "evaluation budget exhausted; integrand too rough for requested tolerance".into(),
        ));
    }
    *budget -= 1;
    let y = f(x);
    if y.is_nan() {
        return Err(ClvmError::NonFinite(format!("integrand returned NaN at x = {x}")));
    }
    Ok(y)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
    budget: &mut u64,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = eval(f, lm, budget)?;
    let frm = eval(f, rm, budget)?;
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 {
        return Err(ClvmError::Integration(format!(
            "recursion limit reached on [{a}, {b}] with residual {delta:.3e}"
        )));
    }
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    let half = 0.5 * tol;
    let l = adaptive(f, a, m, fa, flm, fm, left, half, depth - 1, budget)?;
    let r = adaptive(f, m, b, fm, frm, fb, right, half, depth - 1, budget)?;
    Ok(l + r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num_core::LN_2PI;

    #[test]
    fn polynomial_is_exact() {
        // Simpson integrates cubics exactly.
        let v = quadrature_1d(|x| x * x * x - 2.0 * x + 1.0, -1.0, 3.0, 1e-12).unwrap();
        // ∫ = x⁴/4 − x² + x on [−1,3] = (81/4 − 9 + 3) − (1/4 − 1 − 1) = 16.
        assert!((v - 16.0).abs() < 1e-10);
    }

    #[test]
    fn standard_normal_mass() {
        let pdf = |x: f64| (-0.5 * x * x - 0.5 * LN_2PI).exp();
        let v = quadrature_1d(pdf, -10.0, 10.0, 1e-10).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn oscillatory_integral() {
        // ∫₀^π sin(5x) dx = (1 − cos 5π)/5 = 2/5.
        let v = quadrature_1d(|x| (5.0 * x).sin(), 0.0, std::f64::consts::PI, 1e-10).unwrap();
        assert!((v - 0.4).abs() < 1e-9);
    }

    #[test]
    fn reversed_limits_flip_sign() {
        let a = quadrature_1d(|x| x.exp(), 0.0, 1.0, 1e-10).unwrap();
        let b = quadrature_1d(|x| x.exp(), 1.0, 0.0, 1e-10).unwrap();
        assert!((a + b).abs() < 1e-12);
    }

    #[test]
    fn nan_integrand_is_an_error() {
        let e = quadrature_1d(|x| (x - 0.5).ln(), 0.0, 1.0, 1e-8);
        assert!(matches!(e, Err(ClvmError::NonFinite(_))));
    }

    #[test]
    fn bad_tolerance_rejected() {
        assert!(matches!(
            quadrature_1d(|x| x, 0.0, 1.0, 0.0),
            Err(ClvmError::Config(_))
        ));
    }
}
