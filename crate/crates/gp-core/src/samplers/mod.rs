//! Field realizations and their samplers.
//!
//! A [`FieldRealization`] bundles one sampled field with its kernel, seed,
//! domain and truncation metadata. Series-backed realizations expose exact
//! values, gradients and Hessians anywhere in the domain; grid-backed ones
//! expose only grid values. Everything is immutable after construction and
//! cheap to clone (the backend is shared).

pub mod bf_series;
pub mod block;
pub mod grid;
pub mod rng;
pub mod rpw;

use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geom::Box2;
use crate::kernels::KernelModel;

use bf_series::BfSeries;
use block::BlockField;
use grid::{CirculantEmbedding, GridData, GridSpec};
use rng::{stream, StreamDomain};
use rpw::RpwSeries;

/// Default covariance-truncation tolerance.
pub const DEFAULT_TOLERANCE: f64 = 1e-10;
/// Default cap on the series degree.
pub const DEFAULT_MAX_DEGREE: usize = 4096;

/// Value, gradient and Hessian at a point. The Hessian is stored as
/// `(∂11, ∂22, ∂12)`, matching the crate-wide vech order.
#[derive(Clone, Copy, Debug)]
pub struct Jet2 {
    pub f: f64,
    pub g: [f64; 2],
    pub h: [f64; 3],
}

impl Jet2 {
    pub fn grad_norm(&self) -> f64 {
        (self.g[0] * self.g[0] + self.g[1] * self.g[1]).sqrt()
    }

    pub fn hess_det(&self) -> f64 {
        self.h[0] * self.h[1] - self.h[2] * self.h[2]
    }

    pub fn hess_trace(&self) -> f64 {
        self.h[0] + self.h[1]
    }

    /// Eigenvalues of the Hessian, ascending.
    pub fn hess_eigs(&self) -> [f64; 2] {
        let m = 0.5 * (self.h[0] + self.h[1]);
        let d = 0.5 * (self.h[0] - self.h[1]);
        let r = (d * d + self.h[2] * self.h[2]).sqrt();
        [m - r, m + r]
    }
}

/// Third-order jet (Bargmann-Fock series only); `t = (fxxx, fxxy, fxyy, fyyy)`.
#[derive(Clone, Copy, Debug)]
pub struct Jet3 {
    pub f: f64,
    pub g: [f64; 2],
    pub h: [f64; 3],
    pub t: [f64; 4],
}

/// Analytic evaluator supplied by the caller (used for deterministic test
/// functions and for derived fields such as the Palm coupling).
pub trait AnalyticField: Send + Sync {
    fn value(&self, p: [f64; 2]) -> f64;
    fn jet2(&self, p: [f64; 2]) -> Jet2;
    /// Batched grid evaluation; the default loops over points.
    fn values_on_grid(&self, xs: &[f64], ys: &[f64]) -> Array2<f64> {
        let mut out = Array2::zeros((xs.len(), ys.len()));
        for (i, &x) in xs.iter().enumerate() {
            for (j, &y) in ys.iter().enumerate() {
                out[(i, j)] = self.value([x, y]);
            }
        }
        out
    }
}

#[derive(Clone)]
pub(crate) enum Backend {
    BfSeries(BfSeries),
    Rpw(RpwSeries),
    Grid(GridData),
    Block(BlockField),
    Analytic(Arc<dyn AnalyticField>),
}

/// One sampled field realization.
#[derive(Clone)]
pub struct FieldRealization {
    pub kernel: KernelModel,
    pub seed: u64,
    pub domain: Box2,
    /// Series degree / order (0 for grid-backed fields).
    pub truncation: usize,
    /// Sup over the domain of the omitted covariance mass.
    pub truncation_error_bound: f64,
    backend: Arc<Backend>,
}

impl std::fmt::Debug for FieldRealization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "FieldRealization({:?}, seed={}, N={}, bound={:e})",
            self.kernel, self.seed, self.truncation, self.truncation_error_bound
        )
    }
}

impl FieldRealization {
    /// Field value at a point (NaN in the gaps of a block field).
    pub fn value(&self, p: [f64; 2]) -> f64 {
        match &*self.backend {
            Backend::BfSeries(s) => s.value(p),
            Backend::Rpw(s) => s.value(p),
            Backend::Block(b) => b.value(p),
            Backend::Analytic(a) => a.value(p),
            Backend::Grid(g) => {
                // nearest grid point; grid fields have no off-grid evaluator
                let i = ((p[0] - g.spec.x0) / g.spec.spacing).round() as isize;
                let j = ((p[1] - g.spec.y0) / g.spec.spacing).round() as isize;
                if i < 0 || j < 0 || i as usize >= g.spec.nx || j as usize >= g.spec.ny {
                    f64::NAN
                } else {
                    g.values[(i as usize, j as usize)]
                }
            }
        }
    }

    /// Value, gradient and Hessian; errors for grid-only fields.
    pub fn jet2(&self, p: [f64; 2]) -> Result<Jet2> {
        match &*self.backend {
            Backend::BfSeries(s) => Ok(s.jet2(p)),
            Backend::Rpw(s) => Ok(s.jet2(p)),
            Backend::Block(b) => b.jet2(p).ok_or(Error::GridOnlyField),
            Backend::Analytic(a) => Ok(a.jet2(p)),
            Backend::Grid(_) => Err(Error::GridOnlyField),
        }
    }

    /// Third-order jet; only the Bargmann-Fock series supports it.
    pub fn jet3(&self, p: [f64; 2]) -> Result<Jet3> {
        match &*self.backend {
            Backend::BfSeries(s) => Ok(s.jet3(p)),
            _ => Err(Error::GridOnlyField),
        }
    }

    pub fn has_derivatives(&self) -> bool {
        !matches!(&*self.backend, Backend::Grid(_))
    }

    /// Tensor-grid values (series backends use one matrix product).
    pub fn values_on_grid(&self, xs: &[f64], ys: &[f64]) -> Array2<f64> {
        match &*self.backend {
            Backend::BfSeries(s) => s.values_on_grid(xs, ys),
            Backend::Analytic(a) => a.values_on_grid(xs, ys),
            _ => {
                let mut out = Array2::zeros((xs.len(), ys.len()));
                for (i, &x) in xs.iter().enumerate() {
                    for (j, &y) in ys.iter().enumerate() {
                        out[(i, j)] = self.value([x, y]);
                    }
                }
                out
            }
        }
    }

    /// Stored grid data, when the backend is grid-based.
    pub fn grid_data(&self) -> Option<&GridData> {
        match &*self.backend {
            Backend::Grid(g) => Some(g),
            _ => None,
        }
    }

    /// Sub-boxes on which the field is defined (block fields only).
    pub fn block_boxes(&self) -> Option<Vec<Box2>> {
        match &*self.backend {
            Backend::Block(b) => Some(b.block_boxes()),
            _ => None,
        }
    }

    pub(crate) fn from_backend(
        kernel: KernelModel,
        seed: u64,
        domain: Box2,
        truncation: usize,
        bound: f64,
        backend: Backend,
    ) -> Self {
        Self {
            kernel,
            seed,
            domain,
            truncation,
            truncation_error_bound: bound,
            backend: Arc::new(backend),
        }
    }

    /// Wrap a deterministic analytic function as a field realization.
    pub fn analytic(kernel: KernelModel, domain: Box2, f: Arc<dyn AnalyticField>) -> Self {
        Self::from_backend(kernel, 0, domain, 0, 0.0, Backend::Analytic(f))
    }
}

/// Bargmann-Fock field on `domain`, exact in law up to the covariance
/// truncation `tolerance`.
pub fn sample_bf_series(seed: u64, domain: Box2, tolerance: f64) -> Result<FieldRealization> {
    let mut r = stream(seed, StreamDomain::FieldCoefficients, 0);
    let series = BfSeries::sample(&mut r, domain, tolerance, DEFAULT_MAX_DEGREE)?;
    let truncation = series.degree();
    let bound = series.deficit_on(&domain);
    Ok(FieldRealization::from_backend(
        KernelModel::bargmann_fock(2),
        seed,
        domain,
        truncation,
        bound,
        Backend::BfSeries(series),
    ))
}

/// Random plane wave on the disk of the given radius; the recorded domain is
/// the inscribed square.
pub fn sample_rpw_bessel(seed: u64, disk_radius: f64, tolerance: f64) -> Result<FieldRealization> {
    let mut r = stream(seed, StreamDomain::FieldCoefficients, 0);
    let series = RpwSeries::sample(&mut r, disk_radius, tolerance)?;
    let order = series.order();
    let bound = series.tail_bound();
    let half = disk_radius / std::f64::consts::SQRT_2;
    Ok(FieldRealization::from_backend(
        KernelModel::random_plane_wave(),
        seed,
        Box2::centered(half),
        order,
        bound,
        Backend::Rpw(series),
    ))
}

/// Stationary field on a regular grid by circulant embedding. Exact
/// covariance at the grid points; no off-grid evaluator.
pub fn sample_stationary_grid(
    kernel: &KernelModel,
    spec: GridSpec,
    seed: u64,
) -> Result<FieldRealization> {
    let emb = CirculantEmbedding::new(kernel, spec)?;
    let mut r = stream(seed, StreamDomain::GridNoise, 0);
    let data = emb.sample(&mut r);
    let domain = Box2::new(
        [spec.x0, spec.y0],
        [
            spec.x0 + (spec.nx - 1) as f64 * spec.spacing,
            spec.y0 + (spec.ny - 1) as f64 * spec.spacing,
        ],
    );
    Ok(FieldRealization::from_backend(
        kernel.clone(),
        seed,
        domain,
        0,
        0.0,
        Backend::Grid(data),
    ))
}

/// Block-independent Bargmann-Fock comparison field: independent copies on
/// cubes of side `block_side` separated by `gap`.
pub fn sample_block_independent(
    block_side: f64,
    gap: f64,
    domain: Box2,
    seed: u64,
    tolerance: f64,
) -> Result<FieldRealization> {
    let field = BlockField::sample(seed, block_side, gap, domain, tolerance, DEFAULT_MAX_DEGREE)?;
    let boxes = field.block_boxes();
    let bound = (0..field.block_count())
        .map(|i| field.block_series(i).deficit_on(&boxes[i]))
        .fold(0.0, f64::max);
    let truncation = (0..field.block_count())
        .map(|i| field.block_series(i).degree())
        .max()
        .unwrap_or(0);
    Ok(FieldRealization::from_backend(
        KernelModel::bargmann_fock(2),
        seed,
        domain,
        truncation,
        bound,
        Backend::Block(field),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bf_field_reproducible_and_within_tolerance() {
        let domain = Box2::centered(3.0);
        let a = sample_bf_series(7, domain, 1e-10).unwrap();
        let b = sample_bf_series(7, domain, 1e-10).unwrap();
        let p = [0.3, -1.2];
        assert_eq!(a.value(p), b.value(p));
        assert!(a.truncation_error_bound <= 1e-10);
        assert!(a.truncation > 0);
    }

    #[test]
    fn bf_empirical_covariance_and_variance() {
        // Cov(f(x), f(y)) at |x-y| = 1 equals e^{-1/2}; Var = 1; 3 SE.
        let n = 10_000;
        let x = [0.2, 0.1];
        let y = [1.2, 0.1];
        let (mut cov, mut var) = (0.0, 0.0);
        for seed in 0..n {
            let f = sample_bf_series(seed, Box2::centered(2.0), 1e-10).unwrap();
            let fx = f.value(x);
            cov += fx * f.value(y);
            var += fx * fx;
        }
        let (cov, var) = (cov / n as f64, var / n as f64);
        let se = 1.2 / (n as f64).sqrt();
        assert!((cov - (-0.5f64).exp()).abs() < 3.0 * se, "cov {cov}");
        assert!((var - 1.0).abs() < 3.0 * se, "var {var}");
    }

    #[test]
    fn isotropy_of_bf_and_rpw() {
        // empirical covariance at fixed separation along several directions
        let n = 4000;
        let dirs = [0.0f64, 0.7, 1.9, 2.8];
        let mut bf_cov = [0.0f64; 4];
        let mut rpw_cov = [0.0f64; 4];
        for seed in 0..n {
            let f = sample_bf_series(seed, Box2::centered(2.0), 1e-10).unwrap();
            let g = sample_rpw_bessel(seed, 2.9, 1e-10).unwrap();
            for (k, th) in dirs.iter().enumerate() {
                let p = [0.65 * th.cos(), 0.65 * th.sin()];
                let q = [-p[0], -p[1]];
                bf_cov[k] += f.value(p) * f.value(q);
                rpw_cov[k] += g.value(p) * g.value(q);
            }
        }
        let se = 1.2 / (n as f64).sqrt();
        let bf_want = (-1.3f64 * 1.3 / 2.0).exp();
        let rpw_want = crate::kernels::bessel::j0(1.3);
        for k in 0..4 {
            assert!(
                (bf_cov[k] / n as f64 - bf_want).abs() < 3.0 * se,
                "bf dir {k}: {}",
                bf_cov[k] / n as f64
            );
            assert!(
                (rpw_cov[k] / n as f64 - rpw_want).abs() < 3.0 * se,
                "rpw dir {k}: {}",
                rpw_cov[k] / n as f64
            );
        }
    }

    #[test]
    fn series_jets_match_finite_differences_at_random_points() {
        use rand::Rng;
        let f = sample_bf_series(21, Box2::centered(4.0), 1e-10).unwrap();
        let g = sample_rpw_bessel(21, 5.0, 1e-10).unwrap();
        let mut rng = rng::stream(99, StreamDomain::MonteCarlo, 0);
        let h = 1e-4;
        for _ in 0..50 {
            for fld in [&f, &g] {
                let p = [rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5)];
                let jet = fld.jet2(p).unwrap();
                let fdx =
                    (fld.value([p[0] + h, p[1]]) - fld.value([p[0] - h, p[1]])) / (2.0 * h);
                let fdy =
                    (fld.value([p[0], p[1] + h]) - fld.value([p[0], p[1] - h])) / (2.0 * h);
                let scale = jet.grad_norm().max(1e-3);
                assert!(
                    ((jet.g[0] - fdx).powi(2) + (jet.g[1] - fdy).powi(2)).sqrt() / scale < 1e-6,
                    "gradient mismatch at {p:?}"
                );
            }
        }
    }

    #[test]
    fn rpw_variance_at_origin() {
        let n = 8000;
        let mut var = 0.0;
        for seed in 0..n {
            let f = sample_rpw_bessel(seed, 3.0, 1e-10).unwrap();
            var += f.value([0.0, 0.0]).powi(2);
        }
        let se = 1.5 / (n as f64).sqrt();
        assert!((var / n as f64 - 1.0).abs() < 3.0 * se);
    }

    #[test]
    fn grid_field_has_no_derivatives() {
        let spec = GridSpec {
            x0: 0.0,
            y0: 0.0,
            nx: 8,
            ny: 8,
            spacing: 0.5,
        };
        let f = sample_stationary_grid(&KernelModel::bargmann_fock(2), spec, 3).unwrap();
        assert!(!f.has_derivatives());
        assert!(matches!(f.jet2([1.0, 1.0]), Err(Error::GridOnlyField)));
        assert!(f.grid_data().is_some());
    }
}
