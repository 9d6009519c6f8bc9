//! Scalar probability helpers: Gaussian tail machinery, Poisson mass
//! functions, and small-sample statistics used by the diagnostics.

use rand::Rng;
use statrs::function::erf::{erf, erfc};
use statrs::function::gamma::{gamma_ur, ln_gamma};

pub const SQRT_2PI: f64 = 2.506628274631000502415765284811;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal survival function `P(X > x)`.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// `log P(X > x)`, stable far into the upper tail.
pub fn ln_norm_sf(x: f64) -> f64 {
    if x < 7.0 {
        norm_sf(x).ln()
    } else {
        // Asymptotic expansion of Mills' ratio.
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2)
            + 105.0 / (x2 * x2 * x2 * x2);
        -0.5 * x2 - (x * SQRT_2PI).ln() + series.ln()
    }
}

/// Inverse-CDF sample from the standard normal conditioned on `X >= u`.
///
/// Solves `log S(t) = log U + log S(u)` in the log domain by Newton iteration,
/// which stays accurate for levels up to `u ≈ 8`.
pub fn sample_normal_tail<R: Rng + ?Sized>(rng: &mut R, u: f64) -> f64 {
    let unif: f64 = loop {
        let v: f64 = rng.random();
        if v > 0.0 {
            break v;
        }
    };
    let target = unif.ln() + ln_norm_sf(u);
    // Exponential-tail initial guess, exact as u -> infinity.
    let mut t = (u * u - 2.0 * unif.ln()).sqrt().max(u);
    for _ in 0..40 {
        let g = ln_norm_sf(t) - target;
        // d/dt log S(t) = -phi(t)/S(t)
        let dldt = -(-0.5 * t * t - ln_norm_sf(t)).exp() / SQRT_2PI;
        let step = g / dldt;
        t -= step;
        if t < u {
            t = u;
        }
        if step.abs() < 1e-13 * t.max(1.0) {
            break;
        }
    }
    t
}

/// Density of the centered bivariate normal with unit variances and
/// correlation `rho`, evaluated at `(x, y)`.
pub fn binorm_pdf(x: f64, y: f64, rho: f64) -> f64 {
    let q = 1.0 - rho * rho;
    (-(x * x - 2.0 * rho * x * y + y * y) / (2.0 * q)).exp() / (2.0 * std::f64::consts::PI * q.sqrt())
}

/// `log P(Poisson(lambda) = k)`.
pub fn poisson_ln_pmf(k: u64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    k as f64 * lambda.ln() - lambda - ln_gamma(k as f64 + 1.0)
}

pub fn poisson_pmf(k: u64, lambda: f64) -> f64 {
    poisson_ln_pmf(k, lambda).exp()
}

/// `P(Poisson(lambda) <= k)` via the regularized upper incomplete gamma.
pub fn poisson_cdf(k: u64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 1.0;
    }
    gamma_ur(k as f64 + 1.0, lambda)
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    assert!(n > 1, "need at least two samples");
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Two-sample Kolmogorov-Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a: Vec<f64> = a.to_vec();
    let mut b: Vec<f64> = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut i = 0;
    let mut j = 0;
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// One-sample KS distance of `xs` against a CDF.
pub fn ks_one_sample(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs: Vec<f64> = xs.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let c = cdf(*x);
        d = d.max((c - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - c).abs());
    }
    d
}

/// Asymptotic p-value of the one-sample KS statistic.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let lambda = (n as f64).sqrt() * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64 * lambda).powi(2)).exp();
        p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
    }
    p.clamp(0.0, 1.0)
}

/// Error function re-export point used by kernel tests.
pub fn erf_(x: f64) -> f64 {
    erf(x)
}
