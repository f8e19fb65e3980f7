//! Small numerical helpers shared across modules: moments, normal
//! quantiles, adaptive quadrature and seed derivation.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Variance with divisor n.
pub fn population_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

pub fn population_sd(values: &[f64]) -> f64 {
    population_variance(values).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

pub fn double_factorial(m: u64) -> f64 {
    let mut acc = 1.0;
    let mut k = m;
    while k > 1 {
        acc *= k as f64;
        k -= 2;
    }
    acc
}

/// SplitMix64 finaliser; turns a master seed and a stream index into an
/// independent child seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SIMPSON_MAX_DEPTH: u32 = 48;
const SIMPSON_PANELS: usize = 64;

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance
/// `tol`. The interval is first cut into fixed panels so narrow features are
/// not missed by the initial coarse sample.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    let width = (b - a) / SIMPSON_PANELS as f64;
    let panel_tol = tol / SIMPSON_PANELS as f64;
    let mut total = 0.0;
    for k in 0..SIMPSON_PANELS {
        let lo = a + width * k as f64;
        let hi = if k + 1 == SIMPSON_PANELS { b } else { lo + width };
        let mid = 0.5 * (lo + hi);
        let (flo, fmid, fhi) = (f(lo), f(mid), f(hi));
        let whole = (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi);
        total += simpson_step(&f, lo, hi, flo, fmid, fhi, whole, panel_tol, SIMPSON_MAX_DEPTH)?;
    }
    Ok(total)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
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
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if !delta.is_finite() {
        return Err(Error::Instability(format!("non-finite integrand near {m}")));
    }
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(Error::Instability(format!(
            "tolerance {tol:e} not reached on [{a}, {b}]"
        )));
    }
    Ok(
        simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?
            + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?,
    )
}

/// Integral of `f` over the whole real line, via the substitution
/// `x = t / (1 - t^2)` on `(-1, 1)`. The integrand must decay fast enough
/// that `f(x) (1 + t^2) / (1 - t^2)^2` vanishes at the endpoints.
pub fn integrate_real_line<F: Fn(f64) -> f64>(f: F, tol: f64) -> Result<f64> {
    let g = |t: f64| {
        let one_minus = 1.0 - t * t;
        if one_minus <= 0.0 {
            return 0.0;
        }
        let x = t / one_minus;
        let jac = (1.0 + t * t) / (one_minus * one_minus);
        let v = f(x) * jac;
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    integrate(g, -1.0, 1.0, tol)
}
