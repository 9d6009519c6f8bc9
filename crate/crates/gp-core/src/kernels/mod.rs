//! Stationary covariance kernels, their partial derivatives to order 4, and
//! the joint Gaussian moment structure of `(f, ∇f, Hess f)`.
//!
//! All built-in families are radial: `r(x) = g(s)` with `s = ‖x‖²`. Partial
//! derivatives of any multi-index `|α| ≤ 4` are assembled from the radial
//! derivatives `g', g'', g''', g''''` by the chain-rule expansion, so the
//! derivative table is exact (no numerical differentiation anywhere).
//!
//! Sign conventions used throughout the crate, with `r_i = ∂_i r` etc.:
//!
//! ```text
//! Cov(∂^α f(a), ∂^β f(b)) = (-1)^{|α|} ∂^{α+β} r(b - a)
//! ```
//!
//! so at a single point `Cov(f, ∂_i f) = 0`, `Cov(∂_i f, ∂_j f) = -r_ij(0)`,
//! `Cov(f, ∂_ij f) = r_ij(0)` and `Cov(∂_ij f, ∂_kl f) = r_ijkl(0)`.

pub mod bessel;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Highest tabulated derivative order.
pub const MAX_DERIV_ORDER: usize = 4;

/// Radial profile `g` with `r(x) = g(‖x‖²)`; `deriv(s, k)` returns `g^(k)(s)`
/// for `k <= 4`. Implementations must satisfy `g(0) = 1`.
pub trait RadialProfile: Send + Sync {
    fn deriv(&self, s: f64, k: usize) -> f64;
}

/// `r(x) = exp(-a s)`; the Bargmann-Fock kernel is `a = 1/2`.
struct GaussianProfile {
    a: f64,
}

impl RadialProfile for GaussianProfile {
    fn deriv(&self, s: f64, k: usize) -> f64 {
        (-self.a).powi(k as i32) * (-self.a * s).exp()
    }
}

/// Spectral measure uniform on the unit sphere in dimension `d`; `d = 2` is
/// the random plane wave with `r(x) = J_0(‖x‖)`.
struct SphereProfile {
    d: usize,
}

impl RadialProfile for SphereProfile {
    fn deriv(&self, s: f64, k: usize) -> f64 {
        // g^(k)(s) = (-1/4)^k phi_{nu0+k}(s) / prod_{j=1..k} (nu0 + j),
        // nu0 = (d-2)/2.
        let two_nu0 = self.d - 2;
        let mut coef = 1.0;
        for j in 1..=k {
            coef *= -0.25 / ((two_nu0 as f64) / 2.0 + j as f64);
        }
        coef * bessel::phi_scaled(two_nu0 + 2 * k, s)
    }
}

struct CustomProfile {
    f: Arc<dyn Fn(f64, usize) -> f64 + Send + Sync>,
}

impl RadialProfile for CustomProfile {
    fn deriv(&self, s: f64, k: usize) -> f64 {
        (self.f)(s, k)
    }
}

/// Kernel family tag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Family {
    BargmannFock,
    RandomPlaneWave,
    MonochromaticSphere(usize),
    CustomSpectral(String),
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::BargmannFock => write!(f, "bargmann-fock"),
            Family::RandomPlaneWave => write!(f, "random-plane-wave"),
            Family::MonochromaticSphere(d) => write!(f, "monochromatic-sphere({d})"),
            Family::CustomSpectral(id) => write!(f, "custom:{id}"),
        }
    }
}

/// A stationary covariance kernel with its precomputed moment matrices.
///
/// Immutable after construction and cheap to clone; safe to share across
/// replicate workers.
#[derive(Clone)]
pub struct KernelModel {
    family: Family,
    dimension: usize,
    radial: Arc<dyn RadialProfile>,
    lambda: DMatrix<f64>,
    sigma_joint: DMatrix<f64>,
}

impl fmt::Debug for KernelModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KernelModel({}, d={})", self.family, self.dimension)
    }
}

impl KernelModel {
    fn from_radial(family: Family, dimension: usize, radial: Arc<dyn RadialProfile>) -> Self {
        debug_assert!(dimension >= 2);
        let g0 = radial.deriv(0.0, 0);
        assert!(
            (g0 - 1.0).abs() < 1e-12,
            "kernel must be normalised to unit variance, got r(0) = {g0}"
        );
        let lambda = lambda_from(&*radial, dimension);
        let sigma_joint = sigma_from(&*radial, dimension);
        Self {
            family,
            dimension,
            radial,
            lambda,
            sigma_joint,
        }
    }

    /// Bargmann-Fock kernel `r(x) = exp(-‖x‖²/2)` in dimension `d`.
    pub fn bargmann_fock(d: usize) -> Self {
        Self::from_radial(Family::BargmannFock, d, Arc::new(GaussianProfile { a: 0.5 }))
    }

    /// Random plane wave kernel `r(x) = J_0(‖x‖)` (dimension 2).
    pub fn random_plane_wave() -> Self {
        Self::from_radial(Family::RandomPlaneWave, 2, Arc::new(SphereProfile { d: 2 }))
    }

    /// Monochromatic wave in dimension `d >= 2` (spectral measure uniform on
    /// the unit sphere). `d = 2` coincides with the random plane wave.
    pub fn monochromatic_sphere(d: usize) -> Self {
        Self::from_radial(
            Family::MonochromaticSphere(d),
            d,
            Arc::new(SphereProfile { d }),
        )
    }

    /// Gaussian kernel `exp(-‖x‖²/(2 w²))` of width `w`, as a registered
    /// custom-spectral kernel.
    pub fn gaussian_width(d: usize, w: f64) -> Self {
        assert!(w > 0.0);
        Self::from_radial(
            Family::CustomSpectral(format!("gaussian-width-{w}")),
            d,
            Arc::new(GaussianProfile { a: 0.5 / (w * w) }),
        )
    }

    /// Custom radial kernel; `g(s, k)` must return the k-th derivative of the
    /// radial profile for `k <= 4`. There is no automatic differentiation:
    /// the derivative closures are part of the registration.
    pub fn custom_radial(
        id: impl Into<String>,
        dimension: usize,
        g: Arc<dyn Fn(f64, usize) -> f64 + Send + Sync>,
    ) -> Self {
        Self::from_radial(
            Family::CustomSpectral(id.into()),
            dimension,
            Arc::new(CustomProfile { f: g }),
        )
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn is_monochromatic(&self) -> bool {
        matches!(
            self.family,
            Family::RandomPlaneWave | Family::MonochromaticSphere(_)
        )
    }

    /// `∂^α r(x)` for a multi-index `α` with `|α| ≤ 4`.
    pub fn eval(&self, x: &[f64], alpha: &[usize]) -> Result<f64> {
        if alpha.len() != self.dimension {
            return Err(Error::DerivativeIndexMismatch {
                len: alpha.len(),
                dim: self.dimension,
            });
        }
        let order: usize = alpha.iter().sum();
        if order > MAX_DERIV_ORDER {
            return Err(Error::UnsupportedDerivativeOrder { order });
        }
        debug_assert_eq!(x.len(), self.dimension);
        Ok(radial_partial(&*self.radial, x, alpha))
    }

    /// Covariance matrix `Λ = Cov(∇f(0))`.
    pub fn lambda_mat(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    /// Full covariance `Σ` of `(f(0), ∇f(0), vech Hess f(0))`, with the
    /// Hessian vectorised as `(∂11, .., ∂dd, ∂12, ∂13, .., ∂(d-1)d)`.
    pub fn sigma_joint(&self) -> &DMatrix<f64> {
        &self.sigma_joint
    }

    /// `S_1(x) = (-r_i(x))_i`, the covariance of `f(x)` with `∇f(0)`.
    pub fn s1_vec(&self, x: &[f64]) -> DVector<f64> {
        let d = self.dimension;
        DVector::from_fn(d, |i, _| {
            let mut alpha = vec![0usize; d];
            alpha[i] = 1;
            -radial_partial(&*self.radial, x, &alpha)
        })
    }

    /// `S_2(x) = (r_ii(x).., r_ij(x)..)`, the covariance of `f(x)` with the
    /// vectorised Hessian at 0.
    pub fn s2_vec(&self, x: &[f64]) -> DVector<f64> {
        let pairs = hess_pairs(self.dimension);
        DVector::from_fn(pairs.len(), |k, _| {
            let (i, j) = pairs[k];
            let mut alpha = vec![0usize; self.dimension];
            alpha[i] += 1;
            alpha[j] += 1;
            radial_partial(&*self.radial, x, &alpha)
        })
    }

    pub(crate) fn radial(&self) -> &dyn RadialProfile {
        &*self.radial
    }
}

/// Vectorisation order of the Hessian: diagonal entries first, then the
/// strict upper triangle row by row.
pub fn hess_pairs(d: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..d).map(|i| (i, i)).collect();
    for i in 0..d {
        for j in (i + 1)..d {
            pairs.push((i, j));
        }
    }
    pairs
}

pub fn hess_vech_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Chain-rule expansion of `∂^α g(‖x‖²)` for `|α| ≤ 4`.
fn radial_partial(g: &dyn RadialProfile, x: &[f64], alpha: &[usize]) -> f64 {
    let mut idx = Vec::with_capacity(4);
    for (i, &a) in alpha.iter().enumerate() {
        for _ in 0..a {
            idx.push(i);
        }
    }
    let s: f64 = x.iter().map(|v| v * v).sum();
    let del = |a: usize, b: usize| -> f64 {
        if idx[a] == idx[b] {
            1.0
        } else {
            0.0
        }
    };
    let xv = |a: usize| -> f64 { x[idx[a]] };
    match idx.len() {
        0 => g.deriv(s, 0),
        1 => 2.0 * xv(0) * g.deriv(s, 1),
        2 => 2.0 * del(0, 1) * g.deriv(s, 1) + 4.0 * xv(0) * xv(1) * g.deriv(s, 2),
        3 => {
            let pair_sum = del(0, 1) * xv(2) + del(0, 2) * xv(1) + del(1, 2) * xv(0);
            4.0 * pair_sum * g.deriv(s, 2) + 8.0 * xv(0) * xv(1) * xv(2) * g.deriv(s, 3)
        }
        4 => {
            let dd = del(0, 1) * del(2, 3) + del(0, 2) * del(1, 3) + del(0, 3) * del(1, 2);
            let dx = del(0, 1) * xv(2) * xv(3)
                + del(0, 2) * xv(1) * xv(3)
                + del(0, 3) * xv(1) * xv(2)
                + del(1, 2) * xv(0) * xv(3)
                + del(1, 3) * xv(0) * xv(2)
                + del(2, 3) * xv(0) * xv(1);
            4.0 * dd * g.deriv(s, 2)
                + 8.0 * dx * g.deriv(s, 3)
                + 16.0 * xv(0) * xv(1) * xv(2) * xv(3) * g.deriv(s, 4)
        }
        _ => unreachable!("order checked by caller"),
    }
}

fn lambda_from(g: &dyn RadialProfile, d: usize) -> DMatrix<f64> {
    // Λ_ij = -r_ij(0) = -2 δ_ij g'(0)
    DMatrix::from_diagonal_element(d, d, -2.0 * g.deriv(0.0, 1))
}

fn sigma_from(g: &dyn RadialProfile, d: usize) -> DMatrix<f64> {
    let m = hess_vech_len(d);
    let n = 1 + d + m;
    let pairs = hess_pairs(d);
    let zero = vec![0.0; d];
    let mut sigma = DMatrix::zeros(n, n);
    sigma[(0, 0)] = 1.0;
    // gradient block: Cov(∂_i f, ∂_j f) = -r_ij(0)
    for i in 0..d {
        for j in 0..d {
            let mut alpha = vec![0usize; d];
            alpha[i] += 1;
            alpha[j] += 1;
            sigma[(1 + i, 1 + j)] = -radial_partial(g, &zero, &alpha);
        }
    }
    // value-Hessian block: Cov(f, ∂_ij f) = r_ij(0)
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let mut alpha = vec![0usize; d];
        alpha[i] += 1;
        alpha[j] += 1;
        let v = radial_partial(g, &zero, &alpha);
        sigma[(0, 1 + d + k)] = v;
        sigma[(1 + d + k, 0)] = v;
    }
    // Hessian block: Cov(∂_ij f, ∂_kl f) = r_ijkl(0)
    for (a, &(i, j)) in pairs.iter().enumerate() {
        for (b, &(k, l)) in pairs.iter().enumerate() {
            let mut alpha = vec![0usize; d];
            alpha[i] += 1;
            alpha[j] += 1;
            alpha[k] += 1;
            alpha[l] += 1;
            sigma[(1 + d + a, 1 + d + b)] = radial_partial(g, &zero, &alpha);
        }
    }
    // value-gradient and gradient-Hessian blocks vanish (odd derivatives at 0);
    // they are left as the zeros they were initialised to.
    sigma
}
