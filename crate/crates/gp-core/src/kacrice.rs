//! Closed-form and semi-analytic quantities around the Kac-Rice formula: the
//! `μ(u)` rescaling, the leading-order intensity of high maxima, the
//! two-point cluster integrand, the Gaussian comparison bound, and the
//! expected-maximum level of a window.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{hess_vech_len, KernelModel};
use crate::quad::integrate;
use crate::samplers::rng::{stream, StreamDomain};

/// Spatial rescaling factor
/// `μ(u) = (2π)^{(d+1)/2d} u^{(1-d)/d} exp(u²/2d)`,
/// chosen so the rescaled point process of high maxima has asymptotic
/// intensity `det(Λ)^{1/2}` (one for the Bargmann-Fock normalisation).
pub fn mu_scaling(u: f64, d: usize) -> f64 {
    log_mu_scaling(u, d).exp()
}

/// `log μ(u)`, for overflow-free use at large levels.
pub fn log_mu_scaling(u: f64, d: usize) -> f64 {
    assert!(u > 0.0 && d >= 2);
    let d = d as f64;
    u * u / (2.0 * d) + ((1.0 - d) / d) * u.ln()
        + ((d + 1.0) / (2.0 * d)) * (2.0 * std::f64::consts::PI).ln()
}

/// Cluster radius `τ(u) = u^{3/2} exp(-u²/4)` (rescaled coordinates).
pub fn cluster_radius(u: f64) -> f64 {
    assert!(u > 0.0);
    u.powf(1.5) * (-u * u / 4.0).exp()
}

/// Leading-order intensity of local maxima above `u`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntensityReport {
    pub u: f64,
    pub d: usize,
    /// Expected maxima above `u` per unit physical volume, leading order.
    pub density: f64,
    /// The first-order correction is only known up to an unknown constant;
    /// it is reported as a band, never as a number.
    pub relative_correction: String,
}

/// `density = det(Λ)^{1/2} u^{d-1} e^{-u²/2} / (2π)^{(d+1)/2}`.
pub fn expected_maxima_density(kernel: &KernelModel, u: f64) -> Result<IntensityReport> {
    assert!(u > 0.0);
    let d = kernel.dimension();
    let lambda = kernel.lambda_mat();
    let det = lambda.determinant();
    if !(det > 1e-300) {
        return Err(Error::SingularGradientCovariance);
    }
    let df = d as f64;
    let log_density = 0.5 * det.ln() + (df - 1.0) * u.ln() - 0.5 * u * u
        - 0.5 * (df + 1.0) * (2.0 * std::f64::consts::PI).ln();
    Ok(IntensityReport {
        u,
        d,
        density: log_density.exp(),
        relative_correction: "1 + O(u^-1), constant unknown".to_string(),
    })
}

/// Leading-order expected count in a region of the given volume.
pub fn expected_count(kernel: &KernelModel, u: f64, volume: f64) -> Result<f64> {
    Ok(volume * expected_maxima_density(kernel, u)?.density)
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
}

/// Covariance of `(∂^a f(p), ∂^b f(q))` from the kernel derivative table.
pub(crate) fn jet_cov_entry(
    kernel: &KernelModel,
    a: &[usize],
    p: [f64; 2],
    b: &[usize],
    q: [f64; 2],
) -> f64 {
    let order_a: usize = a.iter().sum();
    let combined: Vec<usize> = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
    let lag = [q[0] - p[0], q[1] - p[1]];
    let sign = if order_a % 2 == 0 { 1.0 } else { -1.0 };
    sign * kernel.eval(&lag, &combined).unwrap()
}

/// Derivative multi-indices for the two-point cluster vector, in the order
/// `(f, vech Hess)` at each point followed by the two pinned gradients.
fn cluster_indices() -> (Vec<(Vec<usize>, usize)>, usize) {
    // (multi-index, point id 0/1); conditioned block last
    let mut idx: Vec<(Vec<usize>, usize)> = Vec::new();
    for pt in 0..2usize {
        idx.push((vec![0, 0], pt));
        idx.push((vec![2, 0], pt));
        idx.push((vec![0, 2], pt));
        idx.push((vec![1, 1], pt));
    }
    let head = idx.len();
    for pt in 0..2usize {
        idx.push((vec![1, 0], pt));
        idx.push((vec![0, 1], pt));
    }
    (idx, head)
}

/// Monte Carlo estimate of the two-point Kac-Rice integrand
///
/// ```text
/// E[ |det Hess f(0)| |det Hess f(x)| 1{f(0) >= u, f(x) >= u} | ∇f(0) = ∇f(x) = 0 ] ψ_x(0,0)
/// ```
///
/// where `ψ_x` is the density of `(∇f(0), ∇f(x))` at the origin. Degenerate
/// separations (the divided-difference regime near `x = 0`) are refused.
pub fn cluster_integrand_mc(
    kernel: &KernelModel,
    u: f64,
    x: [f64; 2],
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if kernel.dimension() != 2 {
        return Err(Error::DimensionMismatch {
            required: 2,
            actual: kernel.dimension(),
        });
    }
    let (idx, head) = cluster_indices();
    let n = idx.len();
    let points = [[0.0, 0.0], x];
    let sigma = DMatrix::from_fn(n, n, |i, j| {
        let (ref a, pa) = idx[i];
        let (ref b, pb) = idx[j];
        jet_cov_entry(kernel, a, points[pa], b, points[pb])
    });

    let qq = sigma.view((head, head), (4, 4)).into_owned();
    let eig = qq.clone().symmetric_eigenvalues();
    let (emin, emax) = (
        eig.iter().cloned().fold(f64::MAX, f64::min),
        eig.iter().cloned().fold(f64::MIN, f64::max),
    );
    if emin <= 0.0 || emax / emin > 1e8 {
        return Err(Error::DegenerateSeparation {
            separation: (x[0] * x[0] + x[1] * x[1]).sqrt(),
            cond: if emin > 0.0 { emax / emin } else { f64::INFINITY },
        });
    }
    let qq_inv = qq.clone().try_inverse().expect("conditioned block invertible");
    let pp = sigma.view((0, 0), (head, head)).into_owned();
    let pq = sigma.view((0, head), (head, 4)).into_owned();
    let cond = &pp - &pq * &qq_inv * pq.transpose();
    let psi = 1.0 / ((2.0 * std::f64::consts::PI).powi(2) * qq.determinant().sqrt());

    let chol = cholesky_with_jitter(cond)?;
    let mut rng = stream(seed, StreamDomain::MonteCarlo, 0);
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let mut g = DVector::zeros(head);
    for _ in 0..n_samples {
        for v in g.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let z = &chol * &g;
        // layout per point: (f, h11, h22, h12)
        let v = if z[0] >= u && z[4] >= u {
            let det0 = z[1] * z[2] - z[3] * z[3];
            let det1 = z[5] * z[6] - z[7] * z[7];
            det0.abs() * det1.abs()
        } else {
            0.0
        };
        sum += v;
        sum2 += v * v;
    }
    let nf = n_samples as f64;
    let mean = sum / nf;
    let var = (sum2 / nf - mean * mean).max(0.0);
    Ok(McEstimate {
        mean: psi * mean,
        se: psi * (var / nf).sqrt(),
    })
}

/// Single-point analogue `E[|det Hess f(0)| 1{f(0) >= u} | ∇f(0) = 0] ψ(0)`;
/// the two-point integrand factorises into its square at large separation.
pub fn single_point_integrand_mc(
    kernel: &KernelModel,
    u: f64,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if kernel.dimension() != 2 {
        return Err(Error::DimensionMismatch {
            required: 2,
            actual: kernel.dimension(),
        });
    }
    // (f, vech H) is independent of ∇f at a single point
    let sigma = kernel.sigma_joint();
    let m = hess_vech_len(2);
    let mut block = DMatrix::zeros(1 + m, 1 + m);
    block[(0, 0)] = sigma[(0, 0)];
    for i in 0..m {
        block[(0, 1 + i)] = sigma[(0, 3 + i)];
        block[(1 + i, 0)] = sigma[(3 + i, 0)];
        for j in 0..m {
            block[(1 + i, 1 + j)] = sigma[(3 + i, 3 + j)];
        }
    }
    let lambda = kernel.lambda_mat();
    let psi = 1.0 / (2.0 * std::f64::consts::PI * lambda.determinant().sqrt());
    let chol = cholesky_with_jitter(block)?;
    let mut rng = stream(seed, StreamDomain::MonteCarlo, 1);
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let mut g = DVector::zeros(1 + m);
    for _ in 0..n_samples {
        for v in g.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let z = &chol * &g;
        let v = if z[0] >= u {
            (z[1] * z[2] - z[3] * z[3]).abs()
        } else {
            0.0
        };
        sum += v;
        sum2 += v * v;
    }
    let nf = n_samples as f64;
    let mean = sum / nf;
    let var = (sum2 / nf - mean * mean).max(0.0);
    Ok(McEstimate {
        mean: psi * mean,
        se: psi * (var / nf).sqrt(),
    })
}

pub(crate) fn cholesky_with_jitter(mut m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    for jitter in [0.0, 1e-12, 1e-10, 1e-8] {
        let mut t = m.clone();
        for i in 0..t.nrows() {
            t[(i, i)] += jitter;
        }
        if let Some(c) = t.cholesky() {
            return Ok(c.l());
        }
    }
    // symmetrise once and retry before giving up
    m = (&m + m.transpose()) * 0.5;
    m.cholesky()
        .map(|c| c.l())
        .ok_or(Error::SingularGradientCovariance)
}

/// Density of the bivariate Gaussian with variances `v1, v2` and cross
/// covariance `c`, at `(x, y)`.
fn bivariate_pdf(x: f64, y: f64, v1: f64, v2: f64, c: f64) -> f64 {
    let det = v1 * v2 - c * c;
    ((-(v2 * x * x - 2.0 * c * x * y + v1 * y * y) / (2.0 * det)).exp())
        / (2.0 * std::f64::consts::PI * det.sqrt())
}

/// Gaussian comparison bound between two centered vectors with equal
/// variances, over events built from per-coordinate threshold grids:
///
/// ```text
/// 2 Σ_{k>l} |r0(k,l) - r1(k,l)| Σ_{i,j} ∫₀¹ φ(u_i(k), u_j(l); r_h(k,l)) dh
/// ```
///
/// with `r_h = (1-h) r0 + h r1` the interpolated covariance. The `h`-integral
/// uses adaptive quadrature at 1e-10 absolute tolerance.
pub fn berman_bound(
    cov0: &DMatrix<f64>,
    cov1: &DMatrix<f64>,
    levels: &[Vec<f64>],
) -> Result<f64> {
    let n = cov0.nrows();
    assert_eq!(cov0.shape(), cov1.shape(), "covariance shapes differ");
    assert_eq!(levels.len(), n, "one level grid per coordinate");
    for k in 0..n {
        if (cov0[(k, k)] - cov1[(k, k)]).abs() > 1e-12 {
            return Err(Error::DiagonalMismatch {
                index: k,
                left: cov0[(k, k)],
                right: cov1[(k, k)],
            });
        }
    }
    for k in 0..n {
        for l in 0..k {
            let norm = (cov0[(k, k)] * cov0[(l, l)]).sqrt();
            if cov0[(k, l)].abs() >= norm || cov1[(k, l)].abs() >= norm {
                return Err(Error::CorrelationOutOfRange { i: k, j: l });
            }
        }
    }
    let mut bound = 0.0;
    for k in 0..n {
        for l in 0..k {
            let delta = (cov0[(k, l)] - cov1[(k, l)]).abs();
            if delta == 0.0 {
                continue;
            }
            let (v1, v2) = (cov0[(k, k)], cov0[(l, l)]);
            let (c0, c1) = (cov0[(k, l)], cov1[(k, l)]);
            let mut level_sum = 0.0;
            for &uk in &levels[k] {
                for &ul in &levels[l] {
                    level_sum += integrate(
                        |h| bivariate_pdf(uk, ul, v1, v2, (1.0 - h) * c0 + h * c1),
                        0.0,
                        1.0,
                        1e-10,
                    );
                }
            }
            bound += 2.0 * delta * level_sum;
        }
    }
    Ok(bound)
}

/// Largest solution `l_R` of
/// `R^d det(Λ)^{1/2} / (2π)^{d-1} · l^{d-1} exp(-l²/2) = 1`,
/// the centering level of the window maximum.
pub fn expected_max_level(kernel: &KernelModel, window_side: f64) -> Result<f64> {
    assert!(window_side > 1.0);
    let d = kernel.dimension() as f64;
    let det = kernel.lambda_mat().determinant();
    let log_c = d * window_side.ln() + 0.5 * det.ln()
        - (d - 1.0) * (2.0 * std::f64::consts::PI).ln();
    // log form: G(l) = log_c + (d-1) log l - l²/2, strictly decreasing right
    // of its maximum at l* = sqrt(d-1)
    let g = |l: f64| log_c + (d - 1.0) * l.ln() - 0.5 * l * l;
    let l_star = (d - 1.0).sqrt().max(1e-6);
    if g(l_star) <= 0.0 {
        return Err(Error::NoRoot { side: window_side });
    }
    let mut hi = l_star.max((2.0 * d * window_side.ln()).sqrt()).max(2.0);
    while g(hi) > 0.0 {
        hi *= 1.5;
    }
    let mut lo = l_star;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
