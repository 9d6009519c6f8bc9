//! Palm conditioning: the law of the field given a local maximum of height at
//! least `u` at the origin, coupled to the unconditioned field through a
//! shared residual.
//!
//! For a non-degenerate kernel the conditioned field is
//!
//! ```text
//! f̃(x) = ξ A(x) + Z · b(x) + f̄(x)
//! ```
//!
//! with `(A(x), b(x)) = (r(x), S2(x)) M⁻¹`, `M` the joint covariance of
//! `(f(0), vech Hess f(0))`, `(ξ, Z)` drawn from the height-curvature density
//! `q_u(t, Z) ∝ det Z · p(Z, t | ∇f(0)=0) 1{Z ≺ 0, t ≥ u}`, and `f̄` the
//! zero-mean residual left after regressing the field on its 2-jet at the
//! origin. Coupling `f` and `f̃` means using the *same* residual: the two
//! fields then differ only by jet-sized combinations of `r` and its
//! derivatives, which decay at the kernel's own rate.
//!
//! Monochromatic kernels (plane waves) have a singular `(f, Hess)` block and
//! use the reduced construction `f̃(x) = Z S22⁻¹ S2(x)' + f̄(x)` with the
//! trace constraint `Tr Z ≤ -u`, under which `f̃(0) = -Tr Z`.
//!
//! `q_u` is sampled by self-normalised importance resampling: `det Z` is
//! unbounded above, so no rejection envelope exists; the effective sample
//! size of each proposal batch is reported on every draw and guarded from
//! below.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::critpoints::CriticalPoint;
use crate::error::{Error, Result};
use crate::kacrice::cholesky_with_jitter;
use crate::kernels::{hess_pairs, KernelModel};
use crate::samplers::rng::{stream, StreamDomain};
use crate::samplers::{AnalyticField, FieldRealization, Jet2};
use crate::stats::sample_normal_tail;

/// Regression weight functions of the non-degenerate construction.
pub struct RegressionWeights {
    kernel: KernelModel,
    minv: DMatrix<f64>,
}

impl RegressionWeights {
    /// Basis dimension `1 + d + d(d+1)/2`.
    pub fn basis_dim(&self) -> usize {
        let d = self.kernel.dimension();
        1 + d + d * (d + 1) / 2
    }

    /// `A(x)`: weight of the height coordinate.
    pub fn a(&self, x: [f64; 2]) -> f64 {
        self.ab(x).0
    }

    /// `b(x)`: weights of the vectorised Hessian coordinates.
    pub fn b(&self, x: [f64; 2]) -> DVector<f64> {
        self.ab(x).1
    }

    pub fn ab(&self, x: [f64; 2]) -> (f64, DVector<f64>) {
        let v = value_s2_vec(&self.kernel, x);
        let w = self.minv.transpose() * v;
        (w[0], w.rows(1, w.len() - 1).into_owned())
    }
}

/// `(A, b)` from the inverse `(f, Hess)` moment block; errors for kernels
/// whose block is singular (monochromatic waves), which must use the
/// monochromatic branch.
pub fn regression_weights(kernel: &KernelModel) -> Result<RegressionWeights> {
    let m = value_hessian_block(kernel);
    let eig = m.clone().symmetric_eigenvalues();
    let (emin, emax) = (
        eig.iter().cloned().fold(f64::MAX, f64::min),
        eig.iter().cloned().fold(f64::MIN, f64::max),
    );
    if emin <= 1e-10 * emax.max(1.0) {
        return Err(Error::SingularValueHessianBlock);
    }
    let minv = m.try_inverse().expect("block checked nonsingular");
    Ok(RegressionWeights {
        kernel: kernel.clone(),
        minv,
    })
}

/// Joint covariance of `(f(0), vech Hess f(0))`.
fn value_hessian_block(kernel: &KernelModel) -> DMatrix<f64> {
    let d = kernel.dimension();
    let m = d * (d + 1) / 2;
    let sigma = kernel.sigma_joint();
    let mut block = DMatrix::zeros(1 + m, 1 + m);
    block[(0, 0)] = sigma[(0, 0)];
    for i in 0..m {
        block[(0, 1 + i)] = sigma[(0, 1 + d + i)];
        block[(1 + i, 0)] = sigma[(1 + d + i, 0)];
        for j in 0..m {
            block[(1 + i, 1 + j)] = sigma[(1 + d + i, 1 + d + j)];
        }
    }
    block
}

fn gradient_block(kernel: &KernelModel) -> DMatrix<f64> {
    let d = kernel.dimension();
    kernel.sigma_joint().view((1, 1), (d, d)).into_owned()
}

fn hessian_block(kernel: &KernelModel) -> DMatrix<f64> {
    let d = kernel.dimension();
    let m = d * (d + 1) / 2;
    kernel
        .sigma_joint()
        .view((1 + d, 1 + d), (m, m))
        .into_owned()
}

fn value_s2_vec(kernel: &KernelModel, x: [f64; 2]) -> DVector<f64> {
    let s2 = kernel.s2_vec(&x);
    let mut v = DVector::zeros(1 + s2.len());
    v[0] = kernel.eval(&x, &[0, 0]).unwrap();
    v.rows_mut(1, s2.len()).copy_from(&s2);
    v
}

/// Covariance `C(x, y)` of the residual field of the non-degenerate
/// construction:
///
/// ```text
/// C(x,y) = r(x-y) - (r, S2)(x) M⁻¹ (r(y), S2(y))' - S1(x) S11⁻¹ S1(y)'
/// ```
pub fn conditional_cov(kernel: &KernelModel, x: [f64; 2], y: [f64; 2]) -> Result<f64> {
    let w = regression_weights(kernel)?;
    let s11_inv = gradient_block(kernel)
        .try_inverse()
        .ok_or(Error::SingularGradientCovariance)?;
    let lag = [x[0] - y[0], x[1] - y[1]];
    let r = kernel.eval(&lag, &[0, 0]).unwrap();
    let vx = value_s2_vec(kernel, x);
    let vy = value_s2_vec(kernel, y);
    let s1x = kernel.s1_vec(&x);
    let s1y = kernel.s1_vec(&y);
    Ok(r - (vx.transpose() * &w.minv * vy)[(0, 0)]
        - (s1x.transpose() * &s11_inv * s1y)[(0, 0)])
}

/// Residual covariance of the monochromatic construction, which regresses on
/// `(∇f, Hess f)` only:
///
/// ```text
/// C(x,y) = r(x-y) - S2(x) S22⁻¹ S2(y)' - S1(x) S11⁻¹ S1(y)'
/// ```
pub fn conditional_cov_monochromatic(
    kernel: &KernelModel,
    x: [f64; 2],
    y: [f64; 2],
) -> Result<f64> {
    let s22_inv = hessian_block(kernel)
        .try_inverse()
        .ok_or(Error::SingularValueHessianBlock)?;
    let s11_inv = gradient_block(kernel)
        .try_inverse()
        .ok_or(Error::SingularGradientCovariance)?;
    let lag = [x[0] - y[0], x[1] - y[1]];
    let r = kernel.eval(&lag, &[0, 0]).unwrap();
    let s2x = kernel.s2_vec(&x);
    let s2y = kernel.s2_vec(&y);
    let s1x = kernel.s1_vec(&x);
    let s1y = kernel.s1_vec(&y);
    Ok(r - (s2x.transpose() * &s22_inv * s2y)[(0, 0)]
        - (s1x.transpose() * &s11_inv * s1y)[(0, 0)])
}

/// One draw from the height-curvature law `q_u`.
#[derive(Clone, Copy, Debug)]
pub struct QuDraw {
    /// Peak height (`-Tr Z` in the monochromatic branch).
    pub xi: f64,
    /// Negative-definite Hessian, vectorised `(z11, z22, z12)`.
    pub z: [f64; 3],
    /// Effective sample size of the proposal batch behind this draw.
    pub importance_weight_ess: f64,
}

impl QuDraw {
    pub fn z_is_negative_definite(&self) -> bool {
        self.z[0] < 0.0 && self.z[0] * self.z[1] - self.z[2] * self.z[2] > 0.0
    }

    pub fn z_trace(&self) -> f64 {
        self.z[0] + self.z[1]
    }
}

/// Batch statistics of one importance-resampling pass.
#[derive(Clone, Copy, Debug)]
pub struct QuBatchStats {
    pub ess: f64,
    /// Fraction of proposals with a negative-definite curvature.
    pub negdef_fraction: f64,
}

const MIN_ESS_FRACTION: f64 = 0.05;

/// Draws from `q_u(t, Z) ∝ det Z p(Z, t | ∇ = 0) 1{Z ≺ 0, t ≥ u}` by
/// self-normalised importance resampling over `batch_size` proposals. The
/// proposal is the conditional Gaussian `(t | t ≥ u, Z | t)`; the weight is
/// `det Z 1{Z ≺ 0}`.
pub fn sample_qu(
    kernel: &KernelModel,
    u: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<QuDraw>> {
    sample_qu_with_stats(kernel, u, batch_size, seed).map(|(d, _)| d)
}

pub fn sample_qu_with_stats(
    kernel: &KernelModel,
    u: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(Vec<QuDraw>, QuBatchStats)> {
    assert!(u > 0.0 && batch_size > 0);
    if kernel.dimension() != 2 {
        return Err(Error::DimensionMismatch {
            required: 2,
            actual: kernel.dimension(),
        });
    }
    let sigma = kernel.sigma_joint();
    // Z | f = t is Gaussian with mean S20 t and covariance S22 - S20 S02
    let s20 = DVector::from_fn(3, |i, _| sigma[(3 + i, 0)]);
    let s22 = hessian_block(kernel);
    let cond = &s22 - &s20 * s20.transpose();
    let chol = cholesky_with_jitter(cond)?;
    let mut rng = stream(seed, StreamDomain::QuProposals, 0);
    let mut proposals = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let t = sample_normal_tail(&mut rng, u);
        let eps = DVector::from_fn(3, |_, _| rng.sample(StandardNormal));
        let z = &s20 * t + &chol * eps;
        proposals.push((t, [z[0], z[1], z[2]]));
    }
    resample(proposals, seed, batch_size)
}

/// Monochromatic variant: `q_u(Z) ∝ det Z p(Z | ∇ = 0) 1{Z ≺ 0, Tr Z ≤ -u}`;
/// the recorded height is `-Tr Z`.
pub fn sample_qu_monochromatic(
    kernel: &KernelModel,
    u: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(Vec<QuDraw>, QuBatchStats)> {
    assert!(u > 0.0 && batch_size > 0);
    let s22 = hessian_block(kernel);
    let c = DVector::from_vec(vec![1.0, 1.0, 0.0]);
    let var_tr = (c.transpose() * &s22 * &c)[(0, 0)];
    let s22c = &s22 * &c;
    let cond = &s22 - &s22c * s22c.transpose() / var_tr;
    let chol = cholesky_with_jitter(cond)?;
    let mut rng = stream(seed, StreamDomain::QuProposals, 0);
    let mut proposals = Vec::with_capacity(batch_size);
    let sd_tr = var_tr.sqrt();
    for _ in 0..batch_size {
        // Tr Z | Tr Z <= -u via the upper tail of -Tr Z
        let tr = -sd_tr * sample_normal_tail(&mut rng, u / sd_tr);
        let eps = DVector::from_fn(3, |_, _| rng.sample(StandardNormal));
        let z = &s22c * (tr / var_tr) + &chol * eps;
        proposals.push((-(z[0] + z[1]), [z[0], z[1], z[2]]));
    }
    resample(proposals, seed, batch_size)
}

fn resample(
    proposals: Vec<(f64, [f64; 3])>,
    seed: u64,
    batch_size: usize,
) -> Result<(Vec<QuDraw>, QuBatchStats)> {
    let mut weights = Vec::with_capacity(proposals.len());
    let mut negdef = 0usize;
    for &(_, z) in &proposals {
        let det = z[0] * z[1] - z[2] * z[2];
        let is_neg = z[0] < 0.0 && det > 0.0;
        if is_neg {
            negdef += 1;
        }
        weights.push(if is_neg { det } else { 0.0 });
    }
    let wsum: f64 = weights.iter().sum();
    let w2sum: f64 = weights.iter().map(|w| w * w).sum();
    let ess = if w2sum > 0.0 { wsum * wsum / w2sum } else { 0.0 };
    let min_ess = MIN_ESS_FRACTION * batch_size as f64;
    if ess < min_ess {
        return Err(Error::EssTooLow {
            ess,
            min_ess,
            batch: batch_size,
        });
    }
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in &weights {
        acc += w / wsum;
        cdf.push(acc);
    }
    let mut rng = stream(seed, StreamDomain::QuResample, 0);
    let mut draws = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let v: f64 = rng.random();
        let idx = cdf.partition_point(|&c| c < v).min(proposals.len() - 1);
        let (xi, z) = proposals[idx];
        draws.push(QuDraw {
            xi,
            z,
            importance_weight_ess: ess,
        });
    }
    Ok((
        draws,
        QuBatchStats {
            ess,
            negdef_fraction: negdef as f64 / proposals.len() as f64,
        },
    ))
}

/// A field plus a closed-form correction spanned by `r`, `S1` and `S2`:
/// `g(x) = f(x) + w_r r(x) + w_s2 · S2(x) + w_s1 · S1(x)`.
///
/// Both the Palm field and the shared residual take this form, so grid
/// evaluation reuses the base field's fast path plus a cheap per-point term.
pub struct CorrectedField {
    base: FieldRealization,
    w_r: f64,
    w_s2: DVector<f64>,
    w_s1: DVector<f64>,
}

impl CorrectedField {
    fn correction_jet(&self, p: [f64; 2]) -> Jet2 {
        let kernel = &self.base.kernel;
        let mut jet = Jet2 {
            f: 0.0,
            g: [0.0, 0.0],
            h: [0.0, 0.0, 0.0],
        };
        let mut add = |base_alpha: [usize; 2], weight: f64| {
            if weight == 0.0 {
                return;
            }
            let d = |extra: [usize; 2]| -> f64 {
                let alpha = [base_alpha[0] + extra[0], base_alpha[1] + extra[1]];
                kernel.eval(&p, &alpha).unwrap()
            };
            jet.f += weight * d([0, 0]);
            jet.g[0] += weight * d([1, 0]);
            jet.g[1] += weight * d([0, 1]);
            jet.h[0] += weight * d([2, 0]);
            jet.h[1] += weight * d([0, 2]);
            jet.h[2] += weight * d([1, 1]);
        };
        add([0, 0], self.w_r);
        for (k, &(i, j)) in hess_pairs(2).iter().enumerate() {
            let mut ba = [0usize; 2];
            ba[i] += 1;
            ba[j] += 1;
            add(ba, self.w_s2[k]);
        }
        // S1 components are -r_i
        for i in 0..2 {
            let mut ba = [0usize; 2];
            ba[i] = 1;
            add(ba, -self.w_s1[i]);
        }
        jet
    }
}

impl AnalyticField for CorrectedField {
    fn value(&self, p: [f64; 2]) -> f64 {
        self.base.value(p) + self.correction_jet(p).f
    }

    fn jet2(&self, p: [f64; 2]) -> Jet2 {
        let b = self.base.jet2(p).expect("corrected fields need derivatives");
        let c = self.correction_jet(p);
        Jet2 {
            f: b.f + c.f,
            g: [b.g[0] + c.g[0], b.g[1] + c.g[1]],
            h: [b.h[0] + c.h[0], b.h[1] + c.h[1], b.h[2] + c.h[2]],
        }
    }

    fn values_on_grid(&self, xs: &[f64], ys: &[f64]) -> ndarray::Array2<f64> {
        let mut v = self.base.values_on_grid(xs, ys);
        for (i, &x) in xs.iter().enumerate() {
            for (j, &y) in ys.iter().enumerate() {
                v[(i, j)] += self.correction_jet([x, y]).f;
            }
        }
        v
    }
}

/// A coupled pair `(f, f̃)` sharing the residual field.
pub struct PalmPair {
    /// The unconditioned field.
    pub field: FieldRealization,
    /// The Palm-conditioned field, with the full evaluator surface.
    pub f_tilde: FieldRealization,
    pub draw: QuDraw,
    /// The shared residual `f̄` (zero 2-jet at the origin).
    pub shared_residual: FieldRealization,
}

/// Residual field `f̄ = f - (regression of f on its 2-jet at 0)`.
///
/// The regression projects onto `span{r, r_i, r_ij}` through the jet, so
/// `f̄(0) = 0`, `∇f̄(0) = 0`, `Hess f̄(0) = 0` up to arithmetic, and the law
/// of `f̄` has covariance [`conditional_cov`].
pub fn residualize(field: &FieldRealization) -> Result<FieldRealization> {
    if !field.has_derivatives() {
        return Err(Error::GridOnlyField);
    }
    let kernel = field.kernel.clone();
    let w = regression_weights(&kernel)?;
    let s11_inv = gradient_block(&kernel)
        .try_inverse()
        .ok_or(Error::SingularGradientCovariance)?;
    let jet = field.jet2([0.0, 0.0])?;
    let mut jv = DVector::zeros(4);
    jv[0] = jet.f;
    for k in 0..3 {
        jv[1 + k] = jet.h[k];
    }
    let ch = -(&w.minv * jv);
    let grad = DVector::from_column_slice(&jet.g);
    let cg = &s11_inv * grad;
    let corrected = CorrectedField {
        base: field.clone(),
        w_r: ch[0],
        w_s2: ch.rows(1, 3).into_owned(),
        w_s1: -cg,
    };
    Ok(FieldRealization::analytic(
        kernel,
        field.domain,
        Arc::new(corrected),
    ))
}

/// Default proposal batch behind one Palm draw.
pub const DEFAULT_QU_BATCH: usize = 1024;

/// Couple `field` with its Palm version at level `u`: shared residual, fresh
/// `(ξ, Z)` from `q_u`.
pub fn palm_couple(field: &FieldRealization, u: f64, seed: u64) -> Result<PalmPair> {
    palm_couple_with_batch(field, u, seed, DEFAULT_QU_BATCH)
}

pub fn palm_couple_with_batch(
    field: &FieldRealization,
    u: f64,
    seed: u64,
    batch: usize,
) -> Result<PalmPair> {
    let kernel = field.kernel.clone();
    let w = regression_weights(&kernel)?; // errors for monochromatic kernels
    let s11_inv = gradient_block(&kernel)
        .try_inverse()
        .ok_or(Error::SingularGradientCovariance)?;
    let draw = sample_qu(&kernel, u, batch, seed)?[0];
    let jet = field.jet2([0.0, 0.0])?;
    // f̃ - f replaces the observed 2-jet by (ξ, 0, Z)
    let mut delta = DVector::zeros(4);
    delta[0] = draw.xi - jet.f;
    for k in 0..3 {
        delta[1 + k] = draw.z[k] - jet.h[k];
    }
    let ch = &w.minv * delta;
    let grad = DVector::from_column_slice(&jet.g);
    let cg = &s11_inv * grad;
    let corrected = CorrectedField {
        base: field.clone(),
        w_r: ch[0],
        w_s2: ch.rows(1, 3).into_owned(),
        w_s1: -cg,
    };
    let f_tilde = FieldRealization::analytic(kernel, field.domain, Arc::new(corrected));
    Ok(PalmPair {
        field: field.clone(),
        f_tilde,
        draw,
        shared_residual: residualize(field)?,
    })
}

/// Monochromatic branch: residualize on `(∇f, Hess f)` only and force the
/// maximum through the trace identity `f̃(0) = -Tr Z ≥ u`.
pub fn palm_couple_monochromatic(
    field: &FieldRealization,
    u: f64,
    seed: u64,
) -> Result<PalmPair> {
    let kernel = field.kernel.clone();
    let s22_inv = hessian_block(&kernel)
        .try_inverse()
        .ok_or(Error::SingularValueHessianBlock)?;
    let s11_inv = gradient_block(&kernel)
        .try_inverse()
        .ok_or(Error::SingularGradientCovariance)?;
    let (draws, _) = sample_qu_monochromatic(&kernel, u, DEFAULT_QU_BATCH, seed)?;
    let draw = draws[0];
    let jet = field.jet2([0.0, 0.0])?;
    let mut dz = DVector::zeros(3);
    for k in 0..3 {
        dz[k] = draw.z[k] - jet.h[k];
    }
    let grad = DVector::from_column_slice(&jet.g);
    let cg = &s11_inv * grad;
    let corrected = CorrectedField {
        base: field.clone(),
        w_r: 0.0,
        w_s2: &s22_inv * dz,
        w_s1: -cg.clone(),
    };
    let f_tilde =
        FieldRealization::analytic(kernel.clone(), field.domain, Arc::new(corrected));
    let mut hz = DVector::zeros(3);
    for k in 0..3 {
        hz[k] = jet.h[k];
    }
    let resid = CorrectedField {
        base: field.clone(),
        w_r: 0.0,
        w_s2: -(&s22_inv * hz),
        w_s1: -cg,
    };
    let shared_residual =
        FieldRealization::analytic(kernel, field.domain, Arc::new(resid));
    Ok(PalmPair {
        field: field.clone(),
        f_tilde,
        draw,
        shared_residual,
    })
}

/// A node of the critical-point interpolation flow.
#[derive(Clone, Copy, Debug)]
pub struct FlowNode {
    pub t: f64,
    pub x: [f64; 2],
    pub grad_norm: f64,
    pub morse_index: u8,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FlowOutcome {
    Completed,
    /// `|det Hess F_t|` fell below the degeneracy threshold: a creation or
    /// destruction event.
    Degenerate { t: f64 },
    ExitedDomain { t: f64 },
}

#[derive(Clone, Debug)]
pub struct FlowResult {
    pub nodes: Vec<FlowNode>,
    pub outcome: FlowOutcome,
}

#[derive(Clone, Copy, Debug)]
pub struct FlowOptions {
    pub initial_dt: f64,
    pub position_tol: f64,
    pub gradient_tol: f64,
    /// Threshold on `|det Hess F_t|` below which the flow reports a
    /// creation/destruction event (tunable; there is no canonical value).
    pub degeneracy_tol: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            initial_dt: 0.05,
            position_tol: 1e-8,
            gradient_tol: 1e-7,
            degeneracy_tol: 1e-8,
        }
    }
}

/// Track a critical point of `f` along the interpolation `F_t = f + t h`,
/// `h = f̃ - f`, by integrating `dx/dt = -Hess F_t(x)⁻¹ ∇h(x)`, which keeps
/// `∇F_t(x_t)` constant in `t`. Each accepted step is re-projected by Newton
/// so `‖∇F_t(x_t)‖` stays below the gradient tolerance. The flow terminates
/// early with a labelled report when the Hessian degenerates (creation or
/// destruction of a critical point) or the trajectory leaves the domain.
pub fn flow_critical_points(
    f: &FieldRealization,
    f_tilde: &FieldRealization,
    start: &CriticalPoint,
    opts: &FlowOptions,
) -> Result<FlowResult> {
    let jet_ft = |x: [f64; 2], t: f64| -> Result<(Jet2, [f64; 2])> {
        let jf = f.jet2(x)?;
        let jg = f_tilde.jet2(x)?;
        let h_grad = [jg.g[0] - jf.g[0], jg.g[1] - jf.g[1]];
        let mix = |a: f64, b: f64| (1.0 - t) * a + t * b;
        Ok((
            Jet2 {
                f: mix(jf.f, jg.f),
                g: [mix(jf.g[0], jg.g[0]), mix(jf.g[1], jg.g[1])],
                h: [
                    mix(jf.h[0], jg.h[0]),
                    mix(jf.h[1], jg.h[1]),
                    mix(jf.h[2], jg.h[2]),
                ],
            },
            h_grad,
        ))
    };
    let velocity = |x: [f64; 2], t: f64| -> Result<Option<[f64; 2]>> {
        let (jet, hg) = jet_ft(x, t)?;
        let det = jet.hess_det();
        if det.abs() < opts.degeneracy_tol {
            return Ok(None);
        }
        let (a, c, b) = (jet.h[0], jet.h[1], jet.h[2]);
        Ok(Some([
            -(c * hg[0] - b * hg[1]) / det,
            -(a * hg[1] - b * hg[0]) / det,
        ]))
    };

    let mut nodes = Vec::new();
    let mut x = start.location;
    let mut t = 0.0;
    let mut dt = opts.initial_dt;
    let push = |nodes: &mut Vec<FlowNode>, jet: &Jet2, t: f64, x: [f64; 2]| {
        let eigs = jet.hess_eigs();
        nodes.push(FlowNode {
            t,
            x,
            grad_norm: jet.grad_norm(),
            morse_index: eigs.iter().filter(|&&e| e < 0.0).count() as u8,
        });
    };
    let (jet0, _) = jet_ft(x, 0.0)?;
    push(&mut nodes, &jet0, 0.0, x);

    while t < 1.0 {
        let dt_eff = dt.min(1.0 - t);
        // step-doubling error control
        let full = rk4_step(&velocity, x, t, dt_eff)?;
        let halves = match full {
            Some(_) => match rk4_step(&velocity, x, t, dt_eff / 2.0)? {
                Some(xm) => rk4_step(&velocity, xm, t + dt_eff / 2.0, dt_eff / 2.0)?,
                None => None,
            },
            None => None,
        };
        let (Some(x_full), Some(x_half)) = (full, halves) else {
            return Ok(FlowResult {
                nodes,
                outcome: FlowOutcome::Degenerate { t },
            });
        };
        let err = ((x_full[0] - x_half[0]).powi(2) + (x_full[1] - x_half[1]).powi(2)).sqrt();
        if err > opts.position_tol {
            dt = dt_eff / 2.0;
            if dt < 1e-12 {
                return Ok(FlowResult {
                    nodes,
                    outcome: FlowOutcome::Degenerate { t },
                });
            }
            continue;
        }
        let t_new = t + dt_eff;
        let mut x_new = x_half;
        // Newton re-projection onto {∇F_t = 0} at fixed t
        for _ in 0..3 {
            let (jet, _) = jet_ft(x_new, t_new)?;
            if jet.grad_norm() <= opts.gradient_tol {
                break;
            }
            let det = jet.hess_det();
            if det.abs() < opts.degeneracy_tol {
                return Ok(FlowResult {
                    nodes,
                    outcome: FlowOutcome::Degenerate { t: t_new },
                });
            }
            let (a, c, b) = (jet.h[0], jet.h[1], jet.h[2]);
            x_new = [
                x_new[0] - (c * jet.g[0] - b * jet.g[1]) / det,
                x_new[1] - (a * jet.g[1] - b * jet.g[0]) / det,
            ];
        }
        if !f.domain.contains(x_new) {
            return Ok(FlowResult {
                nodes,
                outcome: FlowOutcome::ExitedDomain { t: t_new },
            });
        }
        let (jet, _) = jet_ft(x_new, t_new)?;
        if jet.hess_det().abs() < opts.degeneracy_tol {
            return Ok(FlowResult {
                nodes,
                outcome: FlowOutcome::Degenerate { t: t_new },
            });
        }
        push(&mut nodes, &jet, t_new, x_new);
        x = x_new;
        t = t_new;
        if err < opts.position_tol / 32.0 {
            dt *= 1.5;
        }
    }
    Ok(FlowResult {
        nodes,
        outcome: FlowOutcome::Completed,
    })
}

fn rk4_step(
    velocity: &impl Fn([f64; 2], f64) -> Result<Option<[f64; 2]>>,
    x: [f64; 2],
    t: f64,
    dt: f64,
) -> Result<Option<[f64; 2]>> {
    let Some(k1) = velocity(x, t)? else {
        return Ok(None);
    };
    let Some(k2) = velocity(
        [x[0] + 0.5 * dt * k1[0], x[1] + 0.5 * dt * k1[1]],
        t + 0.5 * dt,
    )?
    else {
        return Ok(None);
    };
    let Some(k3) = velocity(
        [x[0] + 0.5 * dt * k2[0], x[1] + 0.5 * dt * k2[1]],
        t + 0.5 * dt,
    )?
    else {
        return Ok(None);
    };
    let Some(k4) = velocity([x[0] + dt * k3[0], x[1] + dt * k3[1]], t + dt)? else {
        return Ok(None);
    };
    Ok(Some([
        x[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        x[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Box2;
    use crate::samplers::{sample_bf_series, sample_rpw_bessel};
    use crate::stats::{ks_pvalue, ks_one_sample, norm_cdf};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn bf() -> KernelModel {
        KernelModel::bargmann_fock(2)
    }

    /// Closed-form residual covariance of the Bargmann-Fock field, derived
    /// from the regression construction and cross-checked below against an
    /// independent series-tail oracle.
    fn bf_conditional_cov_closed(p1: [f64; 2], p2: [f64; 2]) -> f64 {
        let (x1, y1, x2, y2) = (p1[0], p1[1], p2[0], p2[1]);
        let s1 = x1 * x1 + y1 * y1;
        let s2 = x2 * x2 + y2 * y2;
        let r = (-((x1 - x2).powi(2) + (y1 - y2).powi(2)) / 2.0).exp();
        let bracket = 1.0
            + x1 * x2
            + y1 * y2
            + 0.5 * (x1 * x2).powi(2)
            + 0.5 * (y1 * y2).powi(2)
            + x1 * x2 * y1 * y2;
        r - (-(s1 + s2) / 2.0).exp() * bracket
    }

    /// Independent oracle: the residual keeps exactly the series terms of
    /// total degree >= 3, so its covariance is the tail sum
    /// `e^{-(s1+s2)/2} Σ_{j+k>=3} (x1 x2)^j (y1 y2)^k / (j! k!)`.
    fn bf_conditional_cov_tail(p1: [f64; 2], p2: [f64; 2]) -> f64 {
        let t1 = p1[0] * p2[0];
        let t2 = p1[1] * p2[1];
        let mut total = 0.0;
        let mut fj = 1.0;
        for j in 0..40usize {
            if j > 0 {
                fj *= j as f64;
            }
            let mut fk = 1.0;
            for k in 0..40usize {
                if k > 0 {
                    fk *= k as f64;
                }
                if j + k >= 3 {
                    total += t1.powi(j as i32) * t2.powi(k as i32) / (fj * fk);
                }
            }
        }
        let s1 = p1[0] * p1[0] + p1[1] * p1[1];
        let s2 = p2[0] * p2[0] + p2[1] * p2[1];
        (-(s1 + s2) / 2.0).exp() * total
    }

    fn lcg_points(seed: u64, n: usize, half: f64) -> Vec<[f64; 2]> {
        // tiny deterministic point generator for test geometry
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        (0..n)
            .map(|_| [half * (2.0 * next() - 1.0), half * (2.0 * next() - 1.0)])
            .collect()
    }

    #[test]
    fn weights_reproduce_at_the_origin() {
        let w = regression_weights(&bf()).unwrap();
        assert_eq!(w.basis_dim(), 6);
        let (a0, b0) = w.ab([0.0, 0.0]);
        assert_relative_eq!(a0, 1.0, epsilon = 1e-14);
        assert!(b0.iter().all(|&v| v.abs() < 1e-14));
        // closed form for the Bargmann-Fock kernel: A(x) = (1 + s/2) e^{-s/2}
        let p = [0.8, -0.6];
        let s = 1.0f64;
        assert_relative_eq!(w.a(p), (1.0 + s / 2.0) * (-s / 2.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn weights_reproduce_arbitrary_jets() {
        // xi A + Z·b has value xi, gradient 0, Hessian Z at the origin;
        // checked through the CorrectedField jet and by finite differences.
        let kernel = bf();
        let w = regression_weights(&kernel).unwrap();
        let zero = sample_bf_series(1, Box2::centered(2.0), 1e-10).unwrap();
        for (idx, (xi, z)) in [
            (3.0, [-3.0, -2.0, 0.3]),
            (-1.0, [1.0, 2.0, -0.7]),
            (5.0, [-6.0, -5.5, 1.1]),
        ]
        .iter()
        .enumerate()
        {
            let mut v = DVector::zeros(4);
            v[0] = *xi;
            for k in 0..3 {
                v[1 + k] = z[k];
            }
            let ch = &w.minv * v;
            let g = CorrectedField {
                base: zero.clone(),
                w_r: ch[0],
                w_s2: ch.rows(1, 3).into_owned(),
                w_s1: DVector::zeros(2),
            };
            // isolate the correction by subtracting the base
            let jet = g.correction_jet([0.0, 0.0]);
            assert_relative_eq!(jet.f, *xi, epsilon = 1e-12);
            assert!(jet.g[0].abs() < 1e-12 && jet.g[1].abs() < 1e-12, "case {idx}");
            for k in 0..3 {
                assert_relative_eq!(jet.h[k], z[k], epsilon = 1e-11);
            }
            // finite-difference cross-check of the Hessian at 1e-6 tolerance
            let h = 1e-4;
            let c = |p: [f64; 2]| g.correction_jet(p).f;
            let fd_xx = (c([h, 0.0]) - 2.0 * c([0.0, 0.0]) + c([-h, 0.0])) / (h * h);
            assert_abs_diff_eq!(fd_xx, z[0], epsilon = 1e-6);
        }
    }

    #[test]
    fn weights_decay_like_the_kernel() {
        let w = regression_weights(&bf()).unwrap();
        let a = w.a([10.0, 0.0]).abs();
        assert!(a < 1e-20, "A(10) = {a:e}");
        assert!(w.b([10.0, 0.0]).iter().all(|&v| v.abs() < 1e-18));
    }

    #[test]
    fn conditional_cov_matches_closed_form_and_tail_oracle() {
        let kernel = bf();
        // C(0, y) = 0 for all y
        for y in lcg_points(5, 20, 2.5) {
            assert_abs_diff_eq!(conditional_cov(&kernel, [0.0, 0.0], y).unwrap(), 0.0, epsilon = 1e-13);
        }
        // the closed form and the independent tail oracle agree with the
        // regression construction to 1e-10 at 20 random pairs
        let pts = lcg_points(17, 40, 2.5);
        for pair in pts.chunks(2) {
            let (p1, p2) = (pair[0], pair[1]);
            let c = conditional_cov(&kernel, p1, p2).unwrap();
            assert_abs_diff_eq!(c, bf_conditional_cov_closed(p1, p2), epsilon = 1e-10);
            assert_abs_diff_eq!(c, bf_conditional_cov_tail(p1, p2), epsilon = 1e-10);
        }
        // variance is in [0, 1] and approaches 1 far away
        for p in lcg_points(23, 30, 2.0) {
            let v = conditional_cov(&kernel, p, p).unwrap();
            assert!(v >= -1e-12 && v <= 1.0 + 1e-12);
        }
        let far = conditional_cov(&kernel, [10.0, 0.0], [10.0, 0.0]).unwrap();
        assert!(1.0 - far < 1e-10, "1 - C(10,10) = {:e}", 1.0 - far);
    }

    #[test]
    fn monochromatic_cov_is_psd_on_the_diagonal() {
        let kernel = KernelModel::random_plane_wave();
        assert!(matches!(
            regression_weights(&kernel),
            Err(Error::SingularValueHessianBlock)
        ));
        for p in lcg_points(31, 50, 3.0) {
            let v = conditional_cov_monochromatic(&kernel, p, p).unwrap();
            assert!(v >= -1e-10, "C(x,x) = {v:e} at {p:?}");
        }
        // the reduced residual also vanishes nowhere it shouldn't: C(0,0) = 0
        assert_abs_diff_eq!(
            conditional_cov_monochromatic(&kernel, [0.0, 0.0], [0.0, 0.0]).unwrap(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn qu_draws_live_on_the_support() {
        let (draws, stats) = sample_qu_with_stats(&bf(), 3.0, 2048, 7).unwrap();
        assert_eq!(draws.len(), 2048);
        for d in &draws {
            assert!(d.xi >= 3.0);
            assert!(d.z_is_negative_definite());
            assert_eq!(d.importance_weight_ess, stats.ess);
        }
        assert!(stats.ess > 100.0);
    }

    #[test]
    fn qu_curvature_grows_with_height() {
        // E[-Tr Z | ξ = t] = 2t for the Bargmann-Fock kernel, so the mean of
        // -Tr Z over draws at u = 4 comfortably exceeds u.
        let draws = sample_qu(&bf(), 4.0, 20_000, 13).unwrap();
        let mean_neg_tr: f64 =
            draws.iter().map(|d| -d.z_trace()).sum::<f64>() / draws.len() as f64;
        assert!(mean_neg_tr > 4.0, "mean -Tr Z = {mean_neg_tr}");
        assert!(mean_neg_tr > 7.5, "expected ≈ 2 E[ξ] > 8, got {mean_neg_tr}");
    }

    #[test]
    fn qu_negative_definite_fraction_tends_to_one() {
        let (_, s5) = sample_qu_with_stats(&bf(), 5.0, 20_000, 3).unwrap();
        assert!(s5.negdef_fraction > 0.99, "fraction {}", s5.negdef_fraction);
        let (_, s2) = sample_qu_with_stats(&bf(), 2.0, 20_000, 3).unwrap();
        assert!(s2.negdef_fraction < s5.negdef_fraction);
    }

    #[test]
    fn residual_pins_the_jet_at_zero() {
        for seed in 0..50 {
            let field = sample_bf_series(seed, Box2::centered(3.0), 1e-10).unwrap();
            let resid = residualize(&field).unwrap();
            let jet = resid.jet2([0.0, 0.0]).unwrap();
            assert!(jet.f.abs() <= 1e-8);
            assert!(jet.grad_norm() <= 1e-8);
            assert!(jet.h.iter().all(|&h| h.abs() <= 1e-8));
        }
    }

    #[test]
    fn residual_covariance_matches_conditional_cov() {
        // empirical Cov(f̄(x), f̄(y)) over seeds vs the closed form, and
        // independence from the conditioned jet, at 10 point pairs
        let kernel = bf();
        let n = 10_000u64;
        let pairs = lcg_points(41, 20, 2.0);
        let mut cov = vec![0.0f64; 10];
        let mut cross = vec![0.0f64; 10];
        for seed in 0..n {
            let field = sample_bf_series(seed, Box2::centered(3.0), 1e-10).unwrap();
            let resid = residualize(&field).unwrap();
            let jet0 = field.jet2([0.0, 0.0]).unwrap();
            for (k, pq) in pairs.chunks(2).enumerate() {
                let a = resid.value(pq[0]);
                let b = resid.value(pq[1]);
                cov[k] += a * b;
                cross[k] += a * jet0.f;
            }
        }
        let se = 1.3 / (n as f64).sqrt();
        for (k, pq) in pairs.chunks(2).enumerate() {
            let want = conditional_cov(&kernel, pq[0], pq[1]).unwrap();
            let got = cov[k] / n as f64;
            assert!(
                (got - want).abs() < 3.0 * se,
                "pair {k}: {got} vs {want}"
            );
            assert!(
                (cross[k] / n as f64).abs() < 3.0 * se,
                "pair {k}: residual correlates with f(0)"
            );
        }
    }

    #[test]
    fn palm_pair_invariants() {
        let u = 3.0;
        for seed in 0..100 {
            let field = sample_bf_series(seed, Box2::centered(3.0), 1e-10).unwrap();
            let pair = palm_couple(&field, u, seed).unwrap();
            let jet = pair.f_tilde.jet2([0.0, 0.0]).unwrap();
            assert!(jet.grad_norm() <= 1e-8, "∇f̃(0) = {}", jet.grad_norm());
            assert_relative_eq!(jet.f, pair.draw.xi, epsilon = 1e-9);
            assert!(pair.draw.xi >= u);
            for k in 0..3 {
                assert_abs_diff_eq!(jet.h[k], pair.draw.z[k], epsilon = 1e-8);
            }
            assert!(pair.draw.z_is_negative_definite());
            // f̃ = ξA + Z·b + f̄ evaluates consistently with the parts
            let p = [1.2, -0.4];
            let w = regression_weights(&field.kernel).unwrap();
            let (a, b) = w.ab(p);
            let zvec = DVector::from_column_slice(&pair.draw.z);
            let direct = pair.draw.xi * a + b.dot(&zvec) + pair.shared_residual.value(p);
            assert_relative_eq!(pair.f_tilde.value(p), direct, epsilon = 1e-9);
        }
    }

    #[test]
    fn coupling_is_tight_far_from_the_origin() {
        // |f̃ - f| at ‖x‖ = 10 is bounded by jet-scale times the basis decay
        let field = sample_bf_series(3, Box2::centered(10.5), 1e-10).unwrap();
        let pair = palm_couple(&field, 4.0, 3).unwrap();
        for th in [0.0f64, 1.0, 2.2, 4.5] {
            let p = [10.0 * th.cos(), 10.0 * th.sin()];
            let diff = (pair.f_tilde.value(p) - pair.field.value(p)).abs();
            assert!(diff < 1e-15, "|f̃-f|({p:?}) = {diff:e}");
        }
    }

    #[test]
    fn far_field_marginal_reverts_to_standard_normal() {
        // histogram of f̃(x*) at x* = (6, 0) over couples matches N(0,1)
        let n = 10_000u64;
        let mut vals = Vec::with_capacity(n as usize);
        for seed in 0..n {
            let field = sample_bf_series(seed, Box2::centered(6.5), 1e-10).unwrap();
            let pair = palm_couple_with_batch(&field, 3.0, seed, 256).unwrap();
            vals.push(pair.f_tilde.value([6.0, 0.0]));
        }
        let d = ks_one_sample(&vals, norm_cdf);
        let p = ks_pvalue(d, vals.len());
        assert!(p > 0.01, "KS distance {d}, p = {p}");
    }

    #[test]
    fn monochromatic_palm_forces_the_trace_maximum() {
        let u = 2.5;
        for seed in 0..40 {
            let field = sample_rpw_bessel(seed, 6.0, 1e-10).unwrap();
            let pair = palm_couple_monochromatic(&field, u, seed).unwrap();
            let jet = pair.f_tilde.jet2([0.0, 0.0]).unwrap();
            assert!(jet.grad_norm() <= 1e-8);
            assert_relative_eq!(jet.f, -pair.draw.z_trace(), epsilon = 1e-8);
            assert!(jet.f >= u);
            assert!(pair.draw.z_is_negative_definite());
            // residual pins gradient and Hessian (value is pinned through
            // the trace identity of monochromatic fields)
            let rj = pair.shared_residual.jet2([0.0, 0.0]).unwrap();
            assert!(rj.grad_norm() <= 1e-8);
            assert!(rj.h.iter().all(|&h| h.abs() <= 1e-8));
        }
    }

    #[test]
    fn flow_with_zero_perturbation_is_constant() {
        let field = sample_bf_series(11, Box2::centered(4.0), 1e-10).unwrap();
        let found =
            crate::critpoints::find_local_maxima(&field, 1.0, &Default::default()).unwrap();
        let Some(start) = found.points.first() else {
            panic!("no maxima above 1.0; pick another seed");
        };
        let res = flow_critical_points(&field, &field, start, &FlowOptions::default()).unwrap();
        assert_eq!(res.outcome, FlowOutcome::Completed);
        for n in &res.nodes {
            assert!(crate::geom::dist2(n.x, start.location).sqrt() < 1e-9);
        }
    }

    #[test]
    fn flow_tracks_palm_perturbation_with_constant_gradient_and_index() {
        let mut completed = 0;
        let mut checked_nodes = 0;
        for seed in 0..20 {
            let field = sample_bf_series(seed, Box2::centered(5.0), 1e-10).unwrap();
            let pair = palm_couple(&field, 2.5, seed).unwrap();
            let found =
                crate::critpoints::find_local_maxima(&field, 1.2, &Default::default()).unwrap();
            for start in found.points.iter().take(2) {
                let res =
                    flow_critical_points(&field, &pair.f_tilde, start, &FlowOptions::default())
                        .unwrap();
                for n in &res.nodes {
                    assert!(n.grad_norm <= 1e-7, "‖∇F_t‖ = {:e}", n.grad_norm);
                }
                if res.outcome == FlowOutcome::Completed {
                    completed += 1;
                    let idx0 = res.nodes.first().unwrap().morse_index;
                    assert!(
                        res.nodes.iter().all(|n| n.morse_index == idx0),
                        "index changed without a degeneracy event"
                    );
                    checked_nodes += res.nodes.len();
                }
            }
        }
        assert!(completed > 0 && checked_nodes > 0);
    }
}
