//! Extraction of local maxima and general critical points of a field above a
//! level `u`, and rescaling into the normalized point process.
//!
//! The search scans a lattice of spacing `b/u` for cells whose center value
//! exceeds `u - margin`, then refines candidates by Newton iteration on
//! `∇f = 0`. Iterates that leave their scan cell by more than one cell width
//! are rejected (they belong to another cell's basin), which prevents double
//! counting; survivors are deduplicated within half a cell. For local maxima
//! the candidate set is restricted to cells that dominate their eight
//! neighbours — Newton started anywhere else either escapes the cell or
//! reconverges to the same peak, and agreement with a dense-grid oracle is
//! checked in the tests. For general critical points (saddles have no grid
//! signature) every cell above threshold is tried.
//!
//! Grid-backed fields use discrete neighbourhood maxima with a one-step
//! quadratic refinement instead; their grid must be at least as fine as the
//! scan lattice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{dist2, Box2};
use crate::kacrice::mu_scaling;
use crate::samplers::{FieldRealization, Jet2};

/// A refined critical point.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CriticalPoint {
    /// Physical coordinates.
    pub location: [f64; 2],
    pub height: f64,
    /// `‖∇f‖` at convergence.
    pub grad_norm: f64,
    /// Hessian eigenvalues, ascending.
    pub hess_eigs: [f64; 2],
    /// Number of negative Hessian eigenvalues (2 = local maximum).
    pub morse_index: u8,
}

impl CriticalPoint {
    pub fn is_maximum(&self) -> bool {
        self.morse_index == 2
    }
}

/// A finite set of rescaled maxima in a window.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointPattern {
    /// Rescaled coordinates `x / μ(u)`.
    pub points: Vec<[f64; 2]>,
    /// Window in rescaled coordinates.
    pub window: Box2,
    pub level: f64,
    /// `μ(u)`.
    pub scale: f64,
    pub physical_window_side: f64,
}

impl PointPattern {
    pub fn count(&self) -> usize {
        self.points.len()
    }
}

/// Scan and refinement parameters.
#[derive(Clone, Copy, Debug)]
pub struct ScanParams {
    /// Lattice factor `b`; spacing is `b / max(u, 1)`.
    pub grid_factor: f64,
    /// Newton convergence threshold on `‖∇f‖`.
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    /// Candidate margin in units of `spacing * E‖∇f‖`.
    pub margin_factor: f64,
}

impl Default for ScanParams {
    fn default() -> Self {
        Self {
            grid_factor: 0.25,
            newton_tol: 1e-9,
            max_newton_iters: 30,
            margin_factor: 3.0,
        }
    }
}

/// Search result with the non-convergence tallies.
#[derive(Clone, Debug, Default)]
pub struct SearchReport {
    pub points: Vec<CriticalPoint>,
    pub candidates: usize,
    pub dropped_nonconverged: usize,
    pub dropped_escaped: usize,
}

impl SearchReport {
    pub fn count(&self) -> usize {
        self.points.len()
    }
}

/// Local maxima of the field above `level`.
pub fn find_local_maxima(
    field: &FieldRealization,
    level: f64,
    params: &ScanParams,
) -> Result<SearchReport> {
    search(field, level, params, true)
}

/// All critical points of the field above `level` (no Morse-index filter).
pub fn find_critical_points(
    field: &FieldRealization,
    level: f64,
    params: &ScanParams,
) -> Result<SearchReport> {
    search(field, level, params, false)
}

/// Rescale physical maxima locations by `μ(u)`.
///
/// Every point must lie in the physical window `[-R/2, R/2]²`; the caller is
/// expected to pre-filter.
pub fn rescale_points(
    points: &[CriticalPoint],
    u: f64,
    window_side: f64,
) -> Result<PointPattern> {
    let half = window_side / 2.0;
    let mu = mu_scaling(u, 2);
    let mut rescaled = Vec::with_capacity(points.len());
    for p in points {
        let [x, y] = p.location;
        if x.abs() > half || y.abs() > half {
            return Err(Error::PointOutsideWindow { x, y, half });
        }
        rescaled.push([x / mu, y / mu]);
    }
    Ok(PointPattern {
        points: rescaled,
        window: Box2::centered(half / mu),
        level: u,
        scale: mu,
        physical_window_side: window_side,
    })
}

fn scan_spacing(level: f64, params: &ScanParams) -> f64 {
    params.grid_factor / level.max(1.0)
}

/// Rough scale of `E‖∇f(0)‖` for the candidate margin; exact for isotropic
/// two-dimensional kernels.
fn grad_norm_scale(field: &FieldRealization) -> f64 {
    let tr = field.kernel.lambda_mat().trace();
    (std::f64::consts::PI * tr).sqrt() / 2.0
}

fn search(
    field: &FieldRealization,
    level: f64,
    params: &ScanParams,
    maxima_only: bool,
) -> Result<SearchReport> {
    let mut report = SearchReport::default();
    if let Some(blocks) = field.block_boxes() {
        for b in blocks {
            search_box(field, &b, level, params, maxima_only, &mut report)?;
        }
    } else {
        let domain = field.domain;
        search_box(field, &domain, level, params, maxima_only, &mut report)?;
    }
    // canonical output order, then deduplicate within half a cell
    let spacing = scan_spacing(level, params);
    report.points = dedup_sorted(report.points, 0.5 * spacing);
    Ok(report)
}

fn dedup_sorted(mut pts: Vec<CriticalPoint>, radius: f64) -> Vec<CriticalPoint> {
    pts.sort_by(|a, b| {
        a.location[0]
            .total_cmp(&b.location[0])
            .then(a.location[1].total_cmp(&b.location[1]))
    });
    let r2 = radius * radius;
    let mut kept: Vec<CriticalPoint> = Vec::with_capacity(pts.len());
    for p in pts {
        let dup = kept
            .iter()
            .rev()
            .take_while(|q| p.location[0] - q.location[0] <= radius)
            .any(|q| dist2(p.location, q.location) <= r2);
        if !dup {
            kept.push(p);
        }
    }
    kept
}

fn search_box(
    field: &FieldRealization,
    region: &Box2,
    level: f64,
    params: &ScanParams,
    maxima_only: bool,
    report: &mut SearchReport,
) -> Result<()> {
    if !field.has_derivatives() {
        return search_grid_backed(field, level, params, maxima_only, report);
    }
    let spacing = scan_spacing(level, params);
    let margin = params.margin_factor * spacing * grad_norm_scale(field);
    let threshold = level - margin;

    let nx = ((region.hi[0] - region.lo[0]) / spacing).floor() as usize;
    let ny = ((region.hi[1] - region.lo[1]) / spacing).floor() as usize;
    if nx == 0 || ny == 0 {
        return Ok(());
    }
    let xs: Vec<f64> = (0..nx)
        .map(|i| region.lo[0] + (i as f64 + 0.5) * spacing)
        .collect();
    let ys: Vec<f64> = (0..ny)
        .map(|j| region.lo[1] + (j as f64 + 0.5) * spacing)
        .collect();
    let values = field.values_on_grid(&xs, &ys);

    let mut candidates: Vec<[f64; 2]> = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            let v = values[(i, j)];
            if v <= threshold {
                continue;
            }
            if maxima_only {
                // keep only cells dominating their 8-neighbourhood
                let mut dominated = false;
                'nb: for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let (pi, pj) = (i as i64 + di, j as i64 + dj);
                        if pi < 0 || pj < 0 || pi >= nx as i64 || pj >= ny as i64 {
                            continue;
                        }
                        if values[(pi as usize, pj as usize)] > v {
                            dominated = true;
                            break 'nb;
                        }
                    }
                }
                if dominated {
                    continue;
                }
            }
            candidates.push([xs[i], ys[j]]);
        }
    }
    report.candidates += candidates.len();

    for center in candidates {
        // a maximum with a small attraction basin (near a saddle-node pair)
        // can defeat the cell-center start; quarter-cell restarts cover it
        let q = 0.25 * spacing;
        let starts: &[[f64; 2]] = if maxima_only {
            &[
                center,
                [center[0] + q, center[1] + q],
                [center[0] - q, center[1] + q],
                [center[0] + q, center[1] - q],
                [center[0] - q, center[1] - q],
            ]
        } else {
            std::slice::from_ref(&center)
        };
        let mut outcome = NewtonOutcome::Escaped;
        for &s in starts {
            outcome = newton_refine(field, s, center, spacing, params);
            if matches!(outcome, NewtonOutcome::Converged(..)) {
                break;
            }
        }
        match outcome {
            NewtonOutcome::Converged(jet, loc) => {
                let eigs = jet.hess_eigs();
                let morse = eigs.iter().filter(|&&e| e < 0.0).count() as u8;
                let keep =
                    jet.f > level && region.contains(loc) && (!maxima_only || morse == 2);
                if keep {
                    report.points.push(CriticalPoint {
                        location: loc,
                        height: jet.f,
                        grad_norm: jet.grad_norm(),
                        hess_eigs: eigs,
                        morse_index: morse,
                    });
                }
            }
            NewtonOutcome::Escaped => report.dropped_escaped += 1,
            NewtonOutcome::NoConvergence => report.dropped_nonconverged += 1,
        }
    }
    Ok(())
}

enum NewtonOutcome {
    Converged(Jet2, [f64; 2]),
    Escaped,
    NoConvergence,
}

fn newton_refine(
    field: &FieldRealization,
    start: [f64; 2],
    cell_center: [f64; 2],
    spacing: f64,
    params: &ScanParams,
) -> NewtonOutcome {
    let confine = 1.5 * spacing;
    let mut z = start;
    for _ in 0..params.max_newton_iters {
        let jet = match field.jet2(z) {
            Ok(j) => j,
            Err(_) => return NewtonOutcome::Escaped,
        };
        if jet.grad_norm() <= params.newton_tol {
            return NewtonOutcome::Converged(jet, z);
        }
        let det = jet.hess_det();
        if det.abs() < 1e-14 {
            return NewtonOutcome::NoConvergence;
        }
        // solve H δ = -g for the 2x2 symmetric Hessian
        let (a, c, b) = (jet.h[0], jet.h[1], jet.h[2]);
        let mut dx = -(c * jet.g[0] - b * jet.g[1]) / det;
        let mut dy = -(a * jet.g[1] - b * jet.g[0]) / det;
        // clamp a wild step (shallow curvature) to one cell; steps near a
        // nondegenerate critical point are small, so convergence stays
        // quadratic
        let step = (dx * dx + dy * dy).sqrt();
        if step > spacing {
            dx *= spacing / step;
            dy *= spacing / step;
        }
        z = [z[0] + dx, z[1] + dy];
        if (z[0] - cell_center[0]).abs() > confine || (z[1] - cell_center[1]).abs() > confine {
            return NewtonOutcome::Escaped;
        }
    }
    NewtonOutcome::NoConvergence
}

/// Discrete local maxima of a stored grid, with one constrained quadratic
/// refinement step. Gradients and Hessians are central finite differences.
fn search_grid_backed(
    field: &FieldRealization,
    level: f64,
    params: &ScanParams,
    maxima_only: bool,
    report: &mut SearchReport,
) -> Result<()> {
    let g = field.grid_data().ok_or(Error::GridOnlyField)?;
    let spacing = scan_spacing(level, params);
    if g.spec.spacing > spacing * (1.0 + 1e-9) {
        return Err(Error::GridTooCoarse {
            spacing: g.spec.spacing,
            required: spacing,
        });
    }
    if !maxima_only {
        // saddle classification needs true derivatives
        return Err(Error::GridOnlyField);
    }
    let h = g.spec.spacing;
    let (nx, ny) = (g.spec.nx, g.spec.ny);
    for i in 1..nx.saturating_sub(1) {
        for j in 1..ny.saturating_sub(1) {
            let v = g.values[(i, j)];
            if v <= level {
                continue;
            }
            let mut dominated = false;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if (di, dj) != (0, 0)
                        && g.values[((i as i64 + di) as usize, (j as i64 + dj) as usize)] > v
                    {
                        dominated = true;
                    }
                }
            }
            if dominated {
                continue;
            }
            report.candidates += 1;
            let fx = (g.values[(i + 1, j)] - g.values[(i - 1, j)]) / (2.0 * h);
            let fy = (g.values[(i, j + 1)] - g.values[(i, j - 1)]) / (2.0 * h);
            let fxx = (g.values[(i + 1, j)] - 2.0 * v + g.values[(i - 1, j)]) / (h * h);
            let fyy = (g.values[(i, j + 1)] - 2.0 * v + g.values[(i, j - 1)]) / (h * h);
            let fxy = (g.values[(i + 1, j + 1)] - g.values[(i + 1, j - 1)]
                - g.values[(i - 1, j + 1)]
                + g.values[(i - 1, j - 1)])
                / (4.0 * h * h);
            let jet = Jet2 {
                f: v,
                g: [fx, fy],
                h: [fxx, fyy, fxy],
            };
            let det = jet.hess_det();
            let (mut loc, mut height) =
                ([g.spec.x0 + i as f64 * h, g.spec.y0 + j as f64 * h], v);
            if det.abs() > 1e-12 {
                let dx = -(fyy * fx - fxy * fy) / det;
                let dy = -(fxx * fy - fxy * fx) / det;
                if dx.abs() <= h && dy.abs() <= h {
                    loc = [loc[0] + dx, loc[1] + dy];
                    height = v - 0.5 * (fxx * dx * dx + 2.0 * fxy * dx * dy + fyy * dy * dy);
                }
            }
            let eigs = jet.hess_eigs();
            if eigs[1] < 0.0 && height > level {
                report.points.push(CriticalPoint {
                    location: loc,
                    height,
                    grad_norm: jet.grad_norm(),
                    hess_eigs: eigs,
                    morse_index: 2,
                });
            }
        }
    }
    Ok(())
}
