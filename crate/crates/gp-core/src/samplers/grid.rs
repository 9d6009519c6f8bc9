//! Circulant-embedding sampler for stationary kernels on regular grids.
//!
//! The kernel is periodised onto a padded torus; the eigenvalues of the
//! resulting circulant operator are its 2-D DFT. When they are nonnegative
//! the field restricted to the original grid has exactly the target
//! covariance at the grid points. Sampling is one complex FFT of
//! `sqrt(λ) ⊙ (g₁ + i g₂)`; the real part is the field.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::KernelModel;

/// Regular grid description: `x_i = x0 + i h`, `y_j = y0 + j h`.
#[derive(Clone, Copy, Debug)]
pub struct GridSpec {
    pub x0: f64,
    pub y0: f64,
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
}

impl GridSpec {
    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x0 + i as f64 * self.spacing).collect()
    }
    pub fn ys(&self) -> Vec<f64> {
        (0..self.ny).map(|j| self.y0 + j as f64 * self.spacing).collect()
    }
}

/// Sampled grid values.
#[derive(Clone, Debug)]
pub struct GridData {
    pub spec: GridSpec,
    /// `values[(i, j)] = f(x_i, y_j)`
    pub values: Array2<f64>,
}

/// Reusable embedding: eigenvalue factors plus FFT plans. Building it is
/// `O(M log M)`; each replicate afterwards costs one FFT.
pub struct CirculantEmbedding {
    spec: GridSpec,
    mx: usize,
    my: usize,
    /// `sqrt(λ / (mx my))`, flattened row-major `(mx, my)`.
    factor: Vec<f64>,
    fft_row: Arc<dyn Fft<f64>>,
    fft_col: Arc<dyn Fft<f64>>,
}

fn next_fast_size(mut n: usize) -> usize {
    fn smooth(mut m: usize) -> bool {
        for p in [2usize, 3, 5] {
            while m % p == 0 {
                m /= p;
            }
        }
        m == 1
    }
    while !smooth(n) {
        n += 1;
    }
    n
}

/// Number of cells after which the kernel is numerically zero. The cap keeps
/// slowly decaying kernels affordable; the nonnegativity check below catches
/// any embedding that the cap made invalid.
fn decay_cells(kernel: &KernelModel, h: f64, cap: usize) -> usize {
    let mut m = 1usize;
    while m < cap {
        let t = m as f64 * h;
        if kernel.eval(&[t, 0.0], &[0, 0]).unwrap().abs() < 1e-15 {
            return m + 2;
        }
        m += 1;
    }
    cap
}

impl CirculantEmbedding {
    pub fn new(kernel: &KernelModel, spec: GridSpec) -> Result<Self> {
        assert_eq!(kernel.dimension(), 2, "grid sampler is two-dimensional");
        let h = spec.spacing;
        let cap = 4 * spec.nx.max(spec.ny) + 64;
        let pad = decay_cells(kernel, h, cap);
        let mx = next_fast_size(spec.nx + pad);
        let my = next_fast_size(spec.ny + pad);

        // periodised kernel on the torus
        let mut c = vec![Complex::new(0.0, 0.0); mx * my];
        for p in 0..mx {
            let dp = if p <= mx / 2 { p as f64 } else { p as f64 - mx as f64 };
            for q in 0..my {
                let dq = if q <= my / 2 { q as f64 } else { q as f64 - my as f64 };
                let v = kernel.eval(&[dp * h, dq * h], &[0, 0]).unwrap();
                c[p * my + q] = Complex::new(v, 0.0);
            }
        }
        let mut planner = FftPlanner::new();
        let fft_row = planner.plan_fft_forward(my);
        let fft_col = planner.plan_fft_forward(mx);
        fft2_in_place(&mut c, mx, my, &fft_row, &fft_col);

        let max_eig = c.iter().map(|z| z.re).fold(f64::MIN, f64::max);
        let min_eig = c.iter().map(|z| z.re).fold(f64::MAX, f64::min);
        if min_eig < -1e-8 * max_eig.max(1.0) {
            return Err(Error::EmbeddingNotNonnegative {
                min_eig,
                rel: min_eig / max_eig,
            });
        }
        let norm = (mx * my) as f64;
        let factor = c
            .iter()
            .map(|z| (z.re.max(0.0) / norm).sqrt())
            .collect();
        Ok(Self {
            spec,
            mx,
            my,
            factor,
            fft_row,
            fft_col,
        })
    }

    pub fn torus_size(&self) -> (usize, usize) {
        (self.mx, self.my)
    }

    /// One replicate; deterministic in the generator state.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> GridData {
        let (mx, my) = (self.mx, self.my);
        let mut w: Vec<Complex<f64>> = Vec::with_capacity(mx * my);
        for f in &self.factor {
            let g1: f64 = rng.sample(StandardNormal);
            let g2: f64 = rng.sample(StandardNormal);
            w.push(Complex::new(g1 * f, g2 * f));
        }
        fft2_in_place(&mut w, mx, my, &self.fft_row, &self.fft_col);
        let mut values = Array2::zeros((self.spec.nx, self.spec.ny));
        for i in 0..self.spec.nx {
            for j in 0..self.spec.ny {
                values[(i, j)] = w[i * my + j].re;
            }
        }
        GridData {
            spec: self.spec,
            values,
        }
    }
}

/// Unnormalised 2-D FFT, row-major `(mx, my)` data.
fn fft2_in_place(
    data: &mut [Complex<f64>],
    mx: usize,
    my: usize,
    fft_row: &Arc<dyn Fft<f64>>,
    fft_col: &Arc<dyn Fft<f64>>,
) {
    debug_assert_eq!(fft_row.len(), my);
    debug_assert_eq!(fft_col.len(), mx);
    for row in data.chunks_exact_mut(my) {
        fft_row.process(row);
    }
    // columns via transpose
    let mut t = vec![Complex::new(0.0, 0.0); mx * my];
    for i in 0..mx {
        for j in 0..my {
            t[j * mx + i] = data[i * my + j];
        }
    }
    for col in t.chunks_exact_mut(mx) {
        fft_col.process(col);
    }
    for i in 0..mx {
        for j in 0..my {
            data[i * my + j] = t[j * mx + i];
        }
    }
}
