//! Simulation and verification toolkit for the point process of high local
//! maxima of smooth stationary Gaussian fields.
//!
//! The crate is organised around the pipeline
//!
//! ```text
//! kernels -> samplers -> critpoints -> { kacrice, palm, diagnostics }
//! ```
//!
//! * [`kernels`] — stationary covariance kernels with analytic partial
//!   derivatives up to order 4 and the joint moment structure of
//!   `(f, ∇f, Hess f)`.
//! * [`samplers`] — exact-in-law field samplers: truncated entire series for
//!   the Bargmann-Fock field, Fourier-Bessel series for the random plane
//!   wave, circulant embedding on grids, and block-independent comparison
//!   fields.
//! * [`critpoints`] — extraction of local maxima / critical points above a
//!   level `u` (lattice scan plus Newton refinement) and rescaling into the
//!   normalized point process.
//! * [`kacrice`] — closed-form and semi-analytic quantities: the `μ(u)`
//!   rescaling, the leading-order maxima intensity, the two-point cluster
//!   integrand, the Gaussian comparison (Berman) bound and the expected
//!   maximum level.
//! * [`palm`] — the Palm-conditioned field coupled to the unconditioned one
//!   through a shared residual field, plus the critical-point interpolation
//!   flow.
//! * [`diagnostics`] — count histograms, total-variation distance to Poisson,
//!   avoidance probabilities, cluster pairs, Palm count discrepancies,
//!   supercritical emptiness and excursion-probability fits.
//! * [`experiment`] — config parsing, validation and the reproducible
//!   experiment runner behind the CLI.
//!
//! All randomness flows from explicit 64-bit seeds through counter-based
//! streams ([`samplers::rng`]); no operation reads system entropy.

pub mod critpoints;
pub mod diagnostics;
mod error;
pub mod experiment;
pub mod geom;
pub mod kacrice;
pub mod kernels;
pub mod palm;
pub mod quad;
pub mod samplers;
pub mod stats;

pub use error::{Error, Result};
pub use geom::Box2;
pub use kernels::KernelModel;
pub use samplers::FieldRealization;
