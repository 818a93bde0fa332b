//! Normal and Student-t distribution functions and their inverses.

use statrs::function::beta::beta_reg;
use libm::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn check_probability(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Argument(format!("probability must lie in (0, 1), got {p}")));
    }
    Ok(())
}

/// Inverse standard normal CDF: Acklam's rational approximation refined by one Halley step.
pub fn normal_quantile(p: f64) -> Result<f64> {
    check_probability(p)?;
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383_577_518_672_69e2,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p == 0.5 {
        return Ok(0.0);
    }
    // Halley refinement; the residual is taken on the smaller tail to keep precision.
    let e = if x < 0.0 {
        0.5 * erfc(-x / SQRT_2) - p
    } else {
        (1.0 - p) - 0.5 * erfc(x / SQRT_2)
    };
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + 0.5 * x * u))
}

/// Upper-tail standard normal quantile `z_a` with `P(Z > z_a) = a`.
pub fn normal_upper(a: f64) -> Result<f64> {
    normal_quantile(1.0 - a)
}

fn check_df(df: f64) -> Result<()> {
    if !(df >= 1.0 && df.is_finite()) {
        return Err(Error::Argument(format!("degrees of freedom must be >= 1, got {df}")));
    }
    Ok(())
}

/// Student-t CDF via the regularized incomplete beta function.
pub fn t_cdf(t: f64, df: f64) -> Result<f64> {
    check_df(df)?;
    if t == 0.0 {
        return Ok(0.5);
    }
    let x = df / (df + t * t);
    let tail = 0.5 * beta_reg(0.5 * df, 0.5, x);
    Ok(if t > 0.0 { 1.0 - tail } else { tail })
}

pub fn t_pdf(t: f64, df: f64) -> f64 {
    let log_norm = ln_gamma(0.5 * (df + 1.0)) - ln_gamma(0.5 * df) - 0.5 * (df * std::f64::consts::PI).ln();
    (log_norm - 0.5 * (df + 1.0) * (t * t / df).ln_1p()).exp()
}

/// Cornish–Fisher expansion of the t quantile around the normal quantile.
fn t_quantile_expansion(z: f64, df: f64) -> f64 {
    let z2 = z * z;
    let g1 = (z2 + 1.0) * z / 4.0;
    let g2 = ((5.0 * z2 + 16.0) * z2 + 3.0) * z / 96.0;
    let g3 = (((3.0 * z2 + 19.0) * z2 + 17.0) * z2 - 15.0) * z / 384.0;
    let g4 = ((((79.0 * z2 + 776.0) * z2 + 1482.0) * z2 - 1920.0) * z2 - 945.0) * z / 92160.0;
    z + g1 / df + g2 / df.powi(2) + g3 / df.powi(3) + g4 / df.powi(4)
}

/// Degrees of freedom above which the Cornish–Fisher series alone is used
/// (its truncation error is far below 1e-10 there).
const T_EXPANSION_DF: f64 = 1e5;

/// Inverse Student-t CDF: Cornish–Fisher start, then safeguarded Newton on `t_cdf`.
pub fn t_quantile(p: f64, df: f64) -> Result<f64> {
    check_probability(p)?;
    check_df(df)?;
    if p == 0.5 {
        return Ok(0.0);
    }
    if p < 0.5 {
        return Ok(-t_quantile(1.0 - p, df)?);
    }
    let z = normal_quantile(p)?;
    if df >= T_EXPANSION_DF {
        return Ok(t_quantile_expansion(z, df));
    }
    if df == 1.0 {
        return Ok((std::f64::consts::PI * (p - 0.5)).tan());
    }
    if df == 2.0 {
        return Ok((2.0 * p - 1.0) / (2.0 * p * (1.0 - p)).sqrt());
    }
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    let mut t = t_quantile_expansion(z, df).max(z);
    for _ in 0..100 {
        let f = t_cdf(t, df)? - p;
        if f > 0.0 {
            hi = hi.min(t);
        } else {
            lo = f64::max(lo, t);
        }
        let step = f / t_pdf(t, df);
        let mut next = t - step;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * t.max(1.0) };
        }
        if (next - t).abs() <= 1e-14 * (1.0 + t.abs()) {
            return Ok(next);
        }
        t = next;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

    #[test]
    fn normal_quantile_values() {
        assert_eq!(normal_quantile(0.5).unwrap(), 0.0);
        assert!((normal_quantile(0.975).unwrap() - 1.959963984540054).abs() < 1e-12);
        assert!((normal_quantile(0.84).unwrap() - 0.994457883209753).abs() < 1e-12);
        assert!((normal_quantile(1e-10).unwrap() + 6.361340902404056).abs() < 1e-9);
        for p in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(normal_quantile(p).is_err());
        }
    }

    #[test]
    fn normal_quantile_inverts_cdf() {
        let oracle = Normal::new(0.0, 1.0).unwrap();
        for k in 1..1000 {
            let p = k as f64 / 1000.0;
            let x = normal_quantile(p).unwrap();
            assert!((oracle.cdf(x) - p).abs() < 1e-10, "p = {p}");
        }
    }

    #[test]
    fn t_quantile_table_values() {
        assert!((t_quantile(0.975, 99.0).unwrap() - 1.984216951).abs() < 1e-8);
        assert!((t_quantile(0.975, 10.0).unwrap() - 2.228138852).abs() < 1e-8);
        assert!((t_quantile(0.995, 5.0).unwrap() - 4.032142984).abs() < 1e-8);
        assert!((t_quantile(0.975, 1.0).unwrap() - 12.70620474).abs() < 1e-7);
        assert!((t_quantile(0.025, 3.0).unwrap() + 3.182446305).abs() < 1e-8);
    }

    #[test]
    fn t_quantile_matches_reference_inversion() {
        for df in [3.0, 4.0, 7.0, 30.0, 99.0, 999.0] {
            let oracle = StudentsT::new(0.0, 1.0, df).unwrap();
            for p in [0.6, 0.8, 0.9, 0.95, 0.975, 0.995, 0.9995] {
                let ours = t_quantile(p, df).unwrap();
                assert!((oracle.cdf(ours) - p).abs() < 1e-12, "df {df} p {p}");
            }
        }
    }

    #[test]
    fn t_approaches_normal() {
        for p in [0.9, 0.975, 0.995] {
            let gap = (t_quantile(p, 1e6).unwrap() - normal_quantile(p).unwrap()).abs();
            assert!(gap < 1e-4);
        }
        // The expansion and Newton branches agree where they meet.
        let below = t_quantile(0.975, T_EXPANSION_DF - 1.0).unwrap();
        let above = t_quantile(0.975, T_EXPANSION_DF).unwrap();
        assert!((below - above).abs() < 1e-8);
    }

    #[test]
    fn t_cdf_symmetry() {
        for t in [0.3, 1.7, 4.0] {
            let a = t_cdf(t, 6.0).unwrap();
            let b = t_cdf(-t, 6.0).unwrap();
            assert!((a + b - 1.0).abs() < 1e-14);
        }
        assert!(t_quantile(0.5, 0.5).is_err());
    }
}
