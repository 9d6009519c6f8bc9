//! Bessel functions of the first kind.
//!
//! `J_0 .. J_n` are evaluated together by Miller's backward recurrence with
//! the even-order normalisation `J_0 + 2 J_2 + 2 J_4 + ... = 1`, which keeps
//! every intermediate bounded and delivers better than 1e-12 absolute error
//! over the argument range used here. The same routine backs the plane-wave
//! sampler and the monochromatic kernel derivatives.

/// `J_0(x), ..., J_nmax(x)`.
pub fn jn_all(x: f64, nmax: usize) -> Vec<f64> {
    let ax = x.abs();
    if ax < 1e-300 {
        let mut out = vec![0.0; nmax + 1];
        out[0] = 1.0;
        return out;
    }
    // Start far enough above max(nmax, x) that the downward recurrence has
    // converged to the minimal solution by the time it reaches nmax.
    let top = ax.max(nmax as f64);
    let start = (top + 15.0 + 2.5 * top.sqrt()).ceil() as usize;
    let mut jj = vec![0.0f64; start + 2];
    jj[start + 1] = 0.0;
    jj[start] = 1e-30;
    let mut scale = 1.0f64;
    for n in (1..=start).rev() {
        jj[n - 1] = (2.0 * n as f64 / ax) * jj[n] - jj[n + 1];
        if jj[n - 1].abs() > 1e250 {
            let s = 1e-250;
            scale *= s;
            for v in jj[n - 1..].iter_mut() {
                *v *= s;
            }
        }
    }
    let _ = scale;
    let mut norm = jj[0];
    let mut k = 2;
    while k <= start {
        norm += 2.0 * jj[k];
        k += 2;
    }
    let inv = 1.0 / norm;
    let mut out: Vec<f64> = jj[..=nmax.min(start)].iter().map(|v| v * inv).collect();
    out.resize(nmax + 1, 0.0);
    if x < 0.0 {
        for (n, v) in out.iter_mut().enumerate() {
            if n % 2 == 1 {
                *v = -*v;
            }
        }
    }
    out
}

pub fn j0(x: f64) -> f64 {
    jn_all(x, 0)[0]
}

pub fn j1(x: f64) -> f64 {
    jn_all(x, 1)[1]
}

/// Scaled function `phi_nu(s) = Gamma(nu+1) (sqrt(s)/2)^(-nu) J_nu(sqrt(s))`,
/// analytic in `s` with `phi_nu(0) = 1`. Only the orders needed for kernel
/// derivatives are supported: integers 0..=8 and half-integers 1/2..=13/2.
pub fn phi_scaled(two_nu: usize, s: f64) -> f64 {
    debug_assert!(s >= 0.0);
    if s < 1e-12 {
        // phi_nu(s) = 1 - s/(4(nu+1)) + O(s^2)
        let nu = two_nu as f64 / 2.0;
        return 1.0 - s / (4.0 * (nu + 1.0)) + s * s / (32.0 * (nu + 1.0) * (nu + 2.0));
    }
    let r = s.sqrt();
    if two_nu % 2 == 0 {
        let n = two_nu / 2;
        if r < 0.5 {
            return phi_series(n as f64, s);
        }
        let j = jn_all(r, n);
        let mut fact = 1.0f64;
        for k in 1..=n {
            fact *= k as f64;
        }
        fact * (2.0 / r).powi(n as i32) * j[n]
    } else {
        // Half-integer order: spherical Bessel closed forms.
        // phi_{l+1/2}(s) = (2l+1)!! * j_l(r) / r^l
        let l = (two_nu - 1) / 2;
        if r < 0.5 {
            return phi_series(two_nu as f64 / 2.0, s);
        }
        let jl = spherical_jl(l, r);
        let mut dfact = 1.0f64;
        let mut k = 2 * l + 1;
        while k > 1 {
            dfact *= k as f64;
            k -= 2;
        }
        dfact * jl / r.powi(l as i32)
    }
}

/// Power series for `phi_nu(s)`; accurate for small `s` (no cancellation).
pub(crate) fn phi_series(nu: f64, s: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for m in 1..60 {
        term *= -s / (4.0 * m as f64 * (nu + m as f64));
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

/// Spherical Bessel `j_l(r)` for small `l`, by the closed trigonometric forms.
fn spherical_jl(l: usize, r: f64) -> f64 {
    let (s, c) = (r.sin(), r.cos());
    match l {
        0 => s / r,
        1 => s / (r * r) - c / r,
        2 => (3.0 / (r * r) - 1.0) * s / r - 3.0 * c / (r * r),
        3 => (15.0 / (r * r * r) - 6.0 / r) * s / r - (15.0 / (r * r) - 1.0) * c / r,
        _ => {
            // upward recurrence from l = 2, 3; fine for r >= 0.5 and small l
            let mut jm1 = spherical_jl(2, r);
            let mut jl = spherical_jl(3, r);
            for k in 3..l {
                let next = (2.0 * k as f64 + 1.0) / r * jl - jm1;
                jm1 = jl;
                jl = next;
            }
            jl
        }
    }
}
