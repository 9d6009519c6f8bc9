//! Exact-in-law sampler for the Bargmann-Fock field.
//!
//! On a bounded box the field is realised as the Gaussian entire series
//!
//! ```text
//! f(x) = exp(-‖x-c‖²/2) Σ_{j,k<=N} a_jk (x1-c1)^j (x2-c2)^k / sqrt(j! k!)
//! ```
//!
//! with i.i.d. standard normal coefficients `a_jk` and `c` the box center.
//! The truncated covariance deficit at a point with per-axis offsets
//! `(t1, t2) = ((x1-c1)², (x2-c2)²)` equals
//! `1 - P(Pois(t1) <= N) P(Pois(t2) <= N)`, so the degree `N` is solved from
//! the requested tolerance at the worst corner of the (slightly inflated)
//! box.
//!
//! Evaluation works with the pre-weighted basis `u_j(t) = e^{-t²/2} t^j/√j!`,
//! whose entries stay in `[0, 1]`; values, gradients, Hessians and third
//! derivatives come from exact recurrences on `u`.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geom::Box2;
use crate::stats::poisson_cdf;

use super::{Jet2, Jet3};

/// Largest usable half-extent: beyond this `exp(-t²/2)` underflows f64.
pub const MAX_HALF_EXTENT: f64 = 37.0;

/// Padding added to the domain when solving the degree, so evaluations that
/// stray one scan cell beyond the box keep full accuracy.
const DEGREE_PAD: f64 = 0.5;

const DEGREE_SEARCH_CAP: usize = 20_000;

#[derive(Clone, Debug)]
pub struct BfSeries {
    center: [f64; 2],
    degree: usize,
    coeffs: Array2<f64>,
}

/// Smallest degree with covariance deficit below `tolerance` on a box with
/// the given per-axis half extents.
pub fn required_degree(half: [f64; 2], tolerance: f64) -> Result<usize> {
    let t1 = (half[0] + DEGREE_PAD).powi(2);
    let t2 = (half[1] + DEGREE_PAD).powi(2);
    let deficit = |n: usize| -> f64 {
        1.0 - poisson_cdf(n as u64, t1) * poisson_cdf(n as u64, t2)
    };
    let (mut lo, mut hi) = (0usize, DEGREE_SEARCH_CAP);
    if deficit(hi) > tolerance {
        return Err(Error::DomainTooLarge {
            required: usize::MAX,
            max_degree: DEGREE_SEARCH_CAP,
            tolerance,
        });
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        if deficit(mid) <= tolerance {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(lo)
}

impl BfSeries {
    /// Draw the coefficient matrix for the given box. Fails when the box is
    /// too large for the tolerance within `max_degree`, reporting the degree
    /// that would be required.
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        domain: Box2,
        tolerance: f64,
        max_degree: usize,
    ) -> Result<Self> {
        assert!(tolerance > 0.0);
        let half = domain.half_extent();
        let max_half = half[0].max(half[1]);
        if max_half + DEGREE_PAD > MAX_HALF_EXTENT {
            return Err(Error::DomainOutOfRange {
                half: max_half,
                max: MAX_HALF_EXTENT - DEGREE_PAD,
            });
        }
        let degree = required_degree(half, tolerance)?;
        if degree > max_degree {
            return Err(Error::DomainTooLarge {
                required: degree,
                max_degree,
                tolerance,
            });
        }
        let n = degree + 1;
        let mut coeffs = Array2::zeros((n, n));
        for j in 0..n {
            for k in 0..n {
                coeffs[(j, k)] = rng.sample(StandardNormal);
            }
        }
        Ok(Self {
            center: domain.center(),
            degree,
            coeffs,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Covariance deficit actually achieved on `domain`.
    pub fn deficit_on(&self, domain: &Box2) -> f64 {
        let half = domain.half_extent();
        let t1 = half[0] * half[0];
        let t2 = half[1] * half[1];
        1.0 - poisson_cdf(self.degree as u64, t1) * poisson_cdf(self.degree as u64, t2)
    }

    /// Weighted monomial basis `u_j(t) = e^{-t²/2} t^j / sqrt(j!)`.
    fn basis(&self, t: f64) -> Array1<f64> {
        let n = self.degree + 1;
        let mut u = Array1::zeros(n);
        u[0] = (-0.5 * t * t).exp();
        for j in 1..n {
            u[j] = u[j - 1] * t / (j as f64).sqrt();
        }
        u
    }

    /// First derivative of the weighted basis: `u'_j = √j u_{j-1} - t u_j`.
    fn basis_d1(u: &Array1<f64>, t: f64) -> Array1<f64> {
        let n = u.len();
        Array1::from_shape_fn(n, |j| {
            let prev = if j >= 1 { (j as f64).sqrt() * u[j - 1] } else { 0.0 };
            prev - t * u[j]
        })
    }

    /// `u''_j = √(j(j-1)) u_{j-2} - 2t √j u_{j-1} + (t²-1) u_j`.
    fn basis_d2(u: &Array1<f64>, t: f64) -> Array1<f64> {
        let n = u.len();
        Array1::from_shape_fn(n, |j| {
            let jj = j as f64;
            let a = if j >= 2 {
                (jj * (jj - 1.0)).sqrt() * u[j - 2]
            } else {
                0.0
            };
            let b = if j >= 1 { jj.sqrt() * u[j - 1] } else { 0.0 };
            a - 2.0 * t * b + (t * t - 1.0) * u[j]
        })
    }

    /// `u'''_j = √(j(j-1)(j-2)) u_{j-3} - 3t √(j(j-1)) u_{j-2}
    ///           + 3(t²-1) √j u_{j-1} + t(3-t²) u_j`.
    fn basis_d3(u: &Array1<f64>, t: f64) -> Array1<f64> {
        let n = u.len();
        Array1::from_shape_fn(n, |j| {
            let jj = j as f64;
            let a = if j >= 3 {
                (jj * (jj - 1.0) * (jj - 2.0)).sqrt() * u[j - 3]
            } else {
                0.0
            };
            let b = if j >= 2 {
                (jj * (jj - 1.0)).sqrt() * u[j - 2]
            } else {
                0.0
            };
            let c = if j >= 1 { jj.sqrt() * u[j - 1] } else { 0.0 };
            a - 3.0 * t * b + 3.0 * (t * t - 1.0) * c + t * (3.0 - t * t) * u[j]
        })
    }

    pub fn value(&self, p: [f64; 2]) -> f64 {
        let ux = self.basis(p[0] - self.center[0]);
        let vy = self.basis(p[1] - self.center[1]);
        ux.dot(&self.coeffs.dot(&vy))
    }

    pub fn jet2(&self, p: [f64; 2]) -> Jet2 {
        let tx = p[0] - self.center[0];
        let ty = p[1] - self.center[1];
        let u = self.basis(tx);
        let u1 = Self::basis_d1(&u, tx);
        let u2 = Self::basis_d2(&u, tx);
        let v = self.basis(ty);
        let v1 = Self::basis_d1(&v, ty);
        let v2 = Self::basis_d2(&v, ty);
        let w0 = self.coeffs.dot(&v);
        let w1 = self.coeffs.dot(&v1);
        let w2 = self.coeffs.dot(&v2);
        Jet2 {
            f: u.dot(&w0),
            g: [u1.dot(&w0), u.dot(&w1)],
            h: [u2.dot(&w0), u.dot(&w2), u1.dot(&w1)],
        }
    }

    pub fn jet3(&self, p: [f64; 2]) -> Jet3 {
        let tx = p[0] - self.center[0];
        let ty = p[1] - self.center[1];
        let u = self.basis(tx);
        let u1 = Self::basis_d1(&u, tx);
        let u2 = Self::basis_d2(&u, tx);
        let u3 = Self::basis_d3(&u, tx);
        let v = self.basis(ty);
        let v1 = Self::basis_d1(&v, ty);
        let v2 = Self::basis_d2(&v, ty);
        let v3 = Self::basis_d3(&v, ty);
        let w0 = self.coeffs.dot(&v);
        let w1 = self.coeffs.dot(&v1);
        let w2 = self.coeffs.dot(&v2);
        let w3 = self.coeffs.dot(&v3);
        Jet3 {
            f: u.dot(&w0),
            g: [u1.dot(&w0), u.dot(&w1)],
            h: [u2.dot(&w0), u.dot(&w2), u1.dot(&w1)],
            t: [u3.dot(&w0), u2.dot(&w1), u1.dot(&w2), u.dot(&w3)],
        }
    }

    /// Field values on the tensor grid `xs × ys`, as one matrix product.
    pub fn values_on_grid(&self, xs: &[f64], ys: &[f64]) -> Array2<f64> {
        let n = self.degree + 1;
        let mut ug = Array2::zeros((xs.len(), n));
        for (i, &x) in xs.iter().enumerate() {
            ug.row_mut(i).assign(&self.basis(x - self.center[0]));
        }
        let mut vg = Array2::zeros((n, ys.len()));
        for (j, &y) in ys.iter().enumerate() {
            vg.column_mut(j).assign(&self.basis(y - self.center[1]));
        }
        ug.dot(&self.coeffs.dot(&vg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn series(seed: u64, half: f64) -> BfSeries {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        BfSeries::sample(&mut rng, Box2::centered(half), 1e-10, 4096).unwrap()
    }

    #[test]
    fn degree_grows_with_domain_and_tolerance() {
        let n_small = required_degree([2.0, 2.0], 1e-10).unwrap();
        let n_big = required_degree([10.0, 10.0], 1e-10).unwrap();
        let n_loose = required_degree([10.0, 10.0], 1e-4).unwrap();
        assert!(n_small < n_big);
        assert!(n_loose < n_big);
        // deficit at the solved degree is within tolerance, and one less is not
        let t = 10.5f64 * 10.5;
        let deficit =
            |n: usize| 1.0 - poisson_cdf(n as u64, t) * poisson_cdf(n as u64, t);
        assert!(deficit(n_big) <= 1e-10);
        assert!(deficit(n_big - 1) > 1e-10);
    }

    #[test]
    fn too_large_domain_names_required_degree() {
        let err = BfSeries::sample(
            &mut ChaCha12Rng::seed_from_u64(0),
            Box2::centered(12.0),
            1e-10,
            64,
        )
        .unwrap_err();
        match err {
            Error::DomainTooLarge { required, max_degree, .. } => {
                assert!(required > 64);
                assert_eq!(max_degree, 64);
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(matches!(
            BfSeries::sample(
                &mut ChaCha12Rng::seed_from_u64(0),
                Box2::centered(40.0),
                1e-10,
                50_000,
            ),
            Err(Error::DomainOutOfRange { .. })
        ));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = series(9, 3.0);
        let b = series(9, 3.0);
        let p = [1.234, -0.777];
        assert_eq!(a.value(p), b.value(p));
        assert_eq!(a.degree(), b.degree());
    }

    #[test]
    fn grid_matches_pointwise() {
        let s = series(5, 2.5);
        let xs = [-2.0, -0.3, 0.9, 2.2];
        let ys = [-1.1, 0.0, 1.7];
        let g = s.values_on_grid(&xs, &ys);
        for (i, &x) in xs.iter().enumerate() {
            for (j, &y) in ys.iter().enumerate() {
                assert_relative_eq!(g[(i, j)], s.value([x, y]), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn jets_match_finite_differences() {
        let s = series(3, 3.0);
        let h = 1e-5;
        for p in [[0.3, -0.4], [1.9, 2.1], [-2.4, 0.05]] {
            let jet = s.jet2(p);
            let fd_x = (s.value([p[0] + h, p[1]]) - s.value([p[0] - h, p[1]])) / (2.0 * h);
            let fd_y = (s.value([p[0], p[1] + h]) - s.value([p[0], p[1] - h])) / (2.0 * h);
            assert_relative_eq!(jet.g[0], fd_x, max_relative = 1e-6, epsilon = 1e-8);
            assert_relative_eq!(jet.g[1], fd_y, max_relative = 1e-6, epsilon = 1e-8);
            let fd_xx = (s.value([p[0] + h, p[1]]) - 2.0 * jet.f + s.value([p[0] - h, p[1]])) / (h * h);
            assert_relative_eq!(jet.h[0], fd_xx, max_relative = 1e-4, epsilon = 1e-6);
            let fd_xy = (s.value([p[0] + h, p[1] + h]) - s.value([p[0] + h, p[1] - h])
                - s.value([p[0] - h, p[1] + h])
                + s.value([p[0] - h, p[1] - h]))
                / (4.0 * h * h);
            assert_relative_eq!(jet.h[2], fd_xy, max_relative = 1e-4, epsilon = 1e-6);
            let j3 = s.jet3(p);
            assert_relative_eq!(j3.h[0], jet.h[0], epsilon = 1e-12);
            let fd_xxy = (s.jet2([p[0], p[1] + h]).h[0] - s.jet2([p[0], p[1] - h]).h[0]) / (2.0 * h);
            assert_relative_eq!(j3.t[1], fd_xxy, max_relative = 1e-5, epsilon = 1e-6);
        }
    }

    #[test]
    fn basis_is_bounded_and_offset_domains_work() {
        let s = series(1, 1.0);
        let u = s.basis(0.0);
        assert_eq!(u[0], 1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let domain = Box2::new([10.0, -3.0], [16.0, 5.0]);
        let far = BfSeries::sample(&mut rng, domain, 1e-10, 4096).unwrap();
        let v = far.value([13.0, 1.0]);
        assert!(v.is_finite());
        let u_far = far.basis(3.0);
        assert!(u_far.iter().all(|&x| x.abs() <= 1.0));
    }
}
