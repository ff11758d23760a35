//! Adaptive 1-D quadrature used by the brute-force oracles.

use crate::error::{Error, Result};

const MAX_DEPTH: u32 = 48;

/// Adaptive Simpson integration of `f` over `[lo, hi]` to absolute
/// tolerance `tol` (measured against interval refinement).
pub fn quad_1d(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    if !(lo.is_finite() && hi.is_finite()) || hi < lo {
        return Err(Error::InvalidConfig(format!(
            "bad quadrature interval [{lo}, {hi}]"
        )));
    }
    if lo == hi {
        return Ok(0.0);
    }
    let mid = 0.5 * (lo + hi);
    let flo = f(lo);
    let fmid = f(mid);
    let fhi = f(hi);
    let whole = simpson(lo, hi, flo, fmid, fhi);
    adaptive(f, lo, hi, flo, fmid, fhi, whole, tol, MAX_DEPTH)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(Error::NonConvergence {
            what: "adaptive simpson refinement budget exhausted",
        });
    }
    let l = adaptive(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?;
    let r = adaptive(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?;
    Ok(l + r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::LN_2PI;
    use approx::assert_relative_eq;

    fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
        (-0.5 * (x - mean) * (x - mean) / var - 0.5 * (LN_2PI + var.ln())).exp()
    }

    #[test]
    fn standard_normal_normalizes() {
        let v = quad_1d(&|x| normal_pdf(x, 0.0, 1.0), -10.0, 10.0, 1e-10).unwrap();
        assert!((v - 1.0).abs() < 1e-8, "got {v}");
    }

    #[test]
    fn standard_normal_second_moment() {
        let v = quad_1d(&|x| x * x * normal_pdf(x, 0.0, 1.0), -10.0, 10.0, 1e-8).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn mixture_normalizes() {
        let f = |x: f64| 0.3 * normal_pdf(x, -1.0, 0.25) + 0.7 * normal_pdf(x, 2.0, 1.0);
        let v = quad_1d(&f, -12.0, 13.0, 1e-8).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn unresolvable_singularity_exhausts_budget() {
        // x^(-1/2) is integrable but the refinement near 0 never meets a
        // 1e-12 tolerance within the depth budget.
        let f = |x: f64| if x == 0.0 { 0.0 } else { 1.0 / x.sqrt() };
        match quad_1d(&f, 0.0, 1.0, 1e-12) {
            Err(Error::NonConvergence { .. }) => {}
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }

    #[test]
    fn split_interval_matches_whole() {
        let f = |x: f64| normal_pdf(x, 0.4, 2.0);
        let whole = quad_1d(&f, -12.0, 12.0, 1e-10).unwrap();
        let parts = quad_1d(&f, -12.0, 0.123, 1e-10).unwrap()
            + quad_1d(&f, 0.123, 12.0, 1e-10).unwrap();
        assert_relative_eq!(whole, parts, epsilon = 1e-8);
    }
}
