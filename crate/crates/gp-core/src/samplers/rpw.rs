//! Random plane wave sampler on a disk, via the Fourier-Bessel expansion
//!
//! ```text
//! f(r, θ) = a₀ J₀(r) + √2 Σ_{n=1..N} J_n(r) (a_n cos nθ + b_n sin nθ)
//! ```
//!
//! with i.i.d. standard normal coefficients. The expansion is exact in law
//! with covariance `J₀(‖x-y‖)` up to the truncation tail
//! `2 Σ_{n>N} J_n(ρ)²`, which decays superexponentially once `n > e ρ / 2`.
//!
//! Derivatives near the origin avoid the polar chain rule: for `r < 1/2` the
//! terms are rewritten as harmonic polynomials times functions of `s = r²`,
//! `J_n(r) cos nθ = Re((x+iy)^n) g_n(s)` with `g_n = J_n(r)/r^n` analytic,
//! so gradients and Hessians stay exact all the way to `r = 0`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::bessel::jn_all;

use super::Jet2;

const POLAR_SWITCH_RADIUS: f64 = 0.5;
/// Orders above this contribute < 1e-60 inside the switch radius.
const LOCAL_ORDER_CAP: usize = 26;
const ORDER_SEARCH_CAP: usize = 100_000;

#[derive(Clone, Debug)]
pub struct RpwSeries {
    a0: f64,
    ac: Vec<f64>,
    bc: Vec<f64>,
    nmax: usize,
    radius: f64,
}

/// Smallest order with covariance tail `2 Σ_{n>N} J_n(ρ)² <= tolerance`.
pub fn required_order(radius: f64, tolerance: f64) -> Result<usize> {
    assert!(radius > 0.0 && tolerance > 0.0);
    let top = ((std::f64::consts::E * radius / 2.0).ceil() as usize + 80)
        .max((radius as usize) + 80);
    if top > ORDER_SEARCH_CAP {
        return Err(Error::DomainTooLarge {
            required: top,
            max_degree: ORDER_SEARCH_CAP,
            tolerance,
        });
    }
    let j = jn_all(radius, top);
    // cumulative tail from the top down
    let mut tail = 0.0;
    let mut best = top;
    for n in (1..=top).rev() {
        tail += 2.0 * j[n] * j[n];
        if tail > tolerance {
            best = n;
            break;
        }
        best = n;
    }
    Ok(best)
}

impl RpwSeries {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, radius: f64, tolerance: f64) -> Result<Self> {
        let nmax = required_order(radius, tolerance)?;
        let a0 = rng.sample(StandardNormal);
        let mut ac = Vec::with_capacity(nmax);
        let mut bc = Vec::with_capacity(nmax);
        for _ in 0..nmax {
            ac.push(rng.sample(StandardNormal));
            bc.push(rng.sample(StandardNormal));
        }
        Ok(Self {
            a0,
            ac,
            bc,
            nmax,
            radius,
        })
    }

    pub fn order(&self) -> usize {
        self.nmax
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Achieved covariance tail bound on the sampling disk.
    pub fn tail_bound(&self) -> f64 {
        let top = self.nmax + 200;
        let j = jn_all(self.radius, top);
        2.0 * j[self.nmax + 1..].iter().map(|v| v * v).sum::<f64>()
    }

    pub fn value(&self, p: [f64; 2]) -> f64 {
        self.jet2(p).f
    }

    pub fn jet2(&self, p: [f64; 2]) -> Jet2 {
        let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
        if r < POLAR_SWITCH_RADIUS {
            self.jet2_local(p)
        } else {
            self.jet2_polar(p, r)
        }
    }

    /// Harmonic-polynomial route, exact and stable through the origin.
    fn jet2_local(&self, p: [f64; 2]) -> Jet2 {
        let (x, y) = (p[0], p[1]);
        let s = x * x + y * y;
        let ncap = self.nmax.min(LOCAL_ORDER_CAP);
        let g = scaled_gq(ncap + 2, s);
        let sqrt2 = std::f64::consts::SQRT_2;

        // z^n real and imaginary parts, three consecutive orders
        let mut re = vec![0.0; ncap + 1];
        let mut im = vec![0.0; ncap + 1];
        re[0] = 1.0;
        for n in 1..=ncap {
            re[n] = re[n - 1] * x - im[n - 1] * y;
            im[n] = re[n - 1] * y + im[n - 1] * x;
        }

        let mut f = self.a0 * g[0];
        let mut gx = self.a0 * (-0.5 * g[1]) * 2.0 * x;
        let mut gy = self.a0 * (-0.5 * g[1]) * 2.0 * y;
        // hessian accumulators (xx, yy, xy)
        let g0p = -0.5 * g[1];
        let g0pp = 0.25 * g[2];
        let mut hxx = self.a0 * (2.0 * g0p + 4.0 * x * x * g0pp);
        let mut hyy = self.a0 * (2.0 * g0p + 4.0 * y * y * g0pp);
        let mut hxy = self.a0 * 4.0 * x * y * g0pp;

        for n in 1..=ncap {
            let nf = n as f64;
            let gq = g[n];
            let gqp = -0.5 * g[n + 1];
            let gqpp = 0.25 * g[n + 2];
            let (pn, qn) = (re[n], im[n]);
            // derivatives of the harmonic polynomials
            let (p1r, p1i) = if n >= 1 { (re[n - 1], im[n - 1]) } else { (0.0, 0.0) };
            let (p2r, p2i) = if n >= 2 { (re[n - 2], im[n - 2]) } else { (0.0, 0.0) };
            let ca = sqrt2 * self.ac[n - 1];
            let cb = sqrt2 * self.bc[n - 1];
            // value
            f += gq * (ca * pn + cb * qn);
            // gradient: ∇(gq·P) = gq ∇P + 2 gq' x⃗ P
            let dp_x = nf * p1r;
            let dp_y = -nf * p1i;
            let dq_x = nf * p1i;
            let dq_y = nf * p1r;
            gx += ca * (gq * dp_x + 2.0 * x * gqp * pn) + cb * (gq * dq_x + 2.0 * x * gqp * qn);
            gy += ca * (gq * dp_y + 2.0 * y * gqp * pn) + cb * (gq * dq_y + 2.0 * y * gqp * qn);
            // hessian of gq·P:
            let nn1 = nf * (nf - 1.0);
            let d2p_xx = nn1 * p2r;
            let d2p_xy = -nn1 * p2i;
            let d2p_yy = -nn1 * p2r;
            let d2q_xx = nn1 * p2i;
            let d2q_xy = nn1 * p2r;
            let d2q_yy = -nn1 * p2i;
            hxx += ca
                * (gq * d2p_xx + 2.0 * gqp * pn + 4.0 * x * gqp * dp_x + 4.0 * x * x * gqpp * pn)
                + cb * (gq * d2q_xx
                    + 2.0 * gqp * qn
                    + 4.0 * x * gqp * dq_x
                    + 4.0 * x * x * gqpp * qn);
            hyy += ca
                * (gq * d2p_yy + 2.0 * gqp * pn + 4.0 * y * gqp * dp_y + 4.0 * y * y * gqpp * pn)
                + cb * (gq * d2q_yy
                    + 2.0 * gqp * qn
                    + 4.0 * y * gqp * dq_y
                    + 4.0 * y * y * gqpp * qn);
            hxy += ca
                * (gq * d2p_xy + 2.0 * gqp * (x * dp_y + y * dp_x) / 1.0 + 4.0 * x * y * gqpp * pn)
                + cb * (gq * d2q_xy + 2.0 * gqp * (x * dq_y + y * dq_x) + 4.0 * x * y * gqpp * qn);
        }
        Jet2 {
            f,
            g: [gx, gy],
            h: [hxx, hyy, hxy],
        }
    }

    /// Polar route for `r >= 1/2`, with `J'` and `J''` from the three-term
    /// relations and the standard polar-to-cartesian jet transform.
    fn jet2_polar(&self, p: [f64; 2], r: f64) -> Jet2 {
        let n = self.nmax;
        let j = jn_all(r, n + 2);
        let jat = |k: i64| -> f64 {
            if k >= 0 {
                j[k as usize]
            } else if (-k) % 2 == 0 {
                j[(-k) as usize]
            } else {
                -j[(-k) as usize]
            }
        };
        let cos_t = p[0] / r;
        let sin_t = p[1] / r;
        // cos nθ, sin nθ by rotation recurrence
        let sqrt2 = std::f64::consts::SQRT_2;
        let (mut fr, mut ft, mut frr, mut frt, mut ftt) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut f = self.a0 * j[0];
        fr += self.a0 * -j[1];
        frr += self.a0 * (jat(-2) - 2.0 * j[0] + j[2]) / 4.0;
        let mut cn = cos_t;
        let mut sn = sin_t;
        for k in 1..=n {
            let ca = sqrt2 * self.ac[k - 1];
            let cb = sqrt2 * self.bc[k - 1];
            let ang = ca * cn + cb * sn;
            let dang = -ca * sn + cb * cn; // d/d(nθ) of components times…
            let kf = k as f64;
            let jk = j[k];
            let jkp = (jat(k as i64 - 1) - j[k + 1]) / 2.0;
            let jkpp = (jat(k as i64 - 2) - 2.0 * j[k] + j[k + 2]) / 4.0;
            f += jk * ang;
            fr += jkp * ang;
            frr += jkpp * ang;
            ft += jk * kf * dang;
            frt += jkp * kf * dang;
            ftt += -jk * kf * kf * ang;
            // advance angle
            let c_next = cn * cos_t - sn * sin_t;
            let s_next = sn * cos_t + cn * sin_t;
            cn = c_next;
            sn = s_next;
        }
        let (c, s) = (cos_t, sin_t);
        let gx = fr * c - ft * s / r;
        let gy = fr * s + ft * c / r;
        let hxx = frr * c * c - 2.0 * frt * s * c / r
            + fr * s * s / r
            + ftt * s * s / (r * r)
            + 2.0 * ft * s * c / (r * r);
        let hyy = frr * s * s + 2.0 * frt * s * c / r
            + fr * c * c / r
            + ftt * c * c / (r * r)
            - 2.0 * ft * s * c / (r * r);
        let hxy = frr * s * c + frt * (c * c - s * s) / r
            - fr * s * c / r
            - ftt * s * c / (r * r)
            + ft * (s * s - c * c) / (r * r);
        Jet2 {
            f,
            g: [gx, gy],
            h: [hxx, hyy, hxy],
        }
    }
}

/// `g_n(s) = J_n(√s)/ (√s)^n` for `n = 0..=nmax`, by direct series
/// (small `s` only; every term shrinks monotonically).
fn scaled_gq(nmax: usize, s: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(nmax + 1);
    for n in 0..=nmax {
        let mut inv_fact = 1.0f64; // 1/(n+m)!/... built incrementally
        for k in 1..=n {
            inv_fact /= k as f64;
        }
        // term m=0: 1/(2^n n!)
        let mut term = inv_fact / 2f64.powi(n as i32);
        let mut sum = term;
        for m in 1..40 {
            term *= -s / (4.0 * m as f64 * (m + n) as f64);
            sum += term;
            if term.abs() < 1e-18 * sum.abs().max(1e-280) {
                break;
            }
        }
        out.push(sum);
    }
    out
}
