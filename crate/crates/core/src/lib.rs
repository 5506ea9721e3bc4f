//! Bayesian inversion of a one-dimensional linear parabolic equation
//!
//! ```text
//! ∂y/∂t + λ y − D ∂²y/∂x² = f*,   y(·, 0) = 0,   y(0, ·) = y(L, ·) = 0
//! ```
//!
//! jointly for the decay rate `λ`, the diffusion rate `D` and a positive
//! source `f* = exp(f)`, where `f` carries a truncated Karhunen-Loève Gaussian
//! prior. The crate provides
//!
//! * [`pde`]: P1 finite elements in space, θ-scheme in time, with the exact
//!   discrete adjoint and tangent solvers and a bilinear observation operator;
//! * [`prior`]: the KL basis, the exponential source map, prior sampling and
//!   the density of the prior against its Gaussian reference measure;
//! * [`posterior`]: the data misfit potential, adjoint gradients, Gauss-Newton
//!   Hessians, the Onsager-Machlup functional and noise-level estimation;
//! * [`map`]: bound-constrained limited-memory quasi-Newton minimisation of the
//!   Onsager-Machlup functional with multi-start;
//! * [`sampler`]: Metropolis-Hastings with pCN and ∞-mMALA proposals in
//!   whitened coordinates, with checkpoint/resume;
//! * [`diagnostics`]: autocorrelation, thinning, posterior summaries and CSV
//!   emission.
//!
//! Heavy inner loops (Jacobian columns, restarts, per-sample re-solves) run on
//! rayon when the `parallel` feature is enabled and sequentially otherwise;
//! results are bit-identical in both modes.

pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod map;
pub mod pde;
pub mod posterior;
pub mod prior;
pub mod sampler;

pub use error::{Error, Result};
pub use exec::Execution;
pub use pde::{ObservationOperator, PdeCoefficients, SpaceTimeGrid};
pub use posterior::{Dataset, ForwardModel, Observation, Posterior};
pub use prior::{KlBasis, ParameterVector, PriorConfig};
