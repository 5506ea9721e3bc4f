//! Metropolis-Hastings in whitened coordinates, where the Gaussian reference
//! measure is `N(0, I)`.
//!
//! Two proposal families share one acceptance rule:
//!
//! * pCN: `v = ρs + √(1−ρ²)·w`, `w ~ N(0, I)`;
//! * ∞-mMALA: `v = ρs + √(1−ρ²)·w`, `w ~ N((√h/2)·g(s), K(s))` with
//!   `K(s) = (I + H(s))⁻¹`, `g(s) = K(s)(H(s)s − ∇Φ(s))` and `H` the
//!   Gauss-Newton Hessian of `Φ`. The `h_mala` variant freezes `H` and `K` at
//!   an anchor point (normally the MAP).
//!
//! with `ρ = (1−h)/(1+h)` for pCN. For the geometric kernels the drift only
//! matches the autoregression when `1−ρ = √(1−ρ²)·√h/2`, which holds for
//! `ρ = (1−h/4)/(1+h/4)`; [`StepConvention`] selects between the two. Both kernels are reversible with respect to the
//! reference measure when `g = 0, H = 0`; the density of the proposal against
//! that reference kernel is
//!
//! ```text
//! log q(s→v) = −(h/8)|K^{-1/2}g|² + (√h/2)⟨K^{-1/2}g, K^{-1/2}w⟩ − ½⟨w, Hw⟩ + ½ log det K⁻¹
//! ```
//!
//! and a move from `u` to `v` is accepted with probability
//! `min(1, exp(T(v→u) − T(u→v)))` where `T(x→y) = −Φ(x) + log dμ₀/dμ_ref(x) + log q(x→y)`.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posterior::Posterior;
use crate::prior::{log_prior_over_ref, ParameterVector, PriorConfig, ReferenceMeasure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Pcn,
    /// Position-dependent preconditioner.
    #[default]
    InfMmala,
    /// Preconditioner frozen at an anchor point.
    HMala,
}

impl KernelKind {
    pub fn is_geometric(self) -> bool {
        !matches!(self, KernelKind::Pcn)
    }
}

/// How `h` sets `ρ` in the geometric kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepConvention {
    /// `ρ = (1−h)/(1+h)` for every kernel. With a drift the proposal is then
    /// not reversible for Gaussian targets and acceptance collapses as `h`
    /// grows.
    Printed,
    /// `ρ = (1−h/4)/(1+h/4)` for the geometric kernels, so that the proposal
    /// preserves the local Gaussian approximation exactly.
    #[default]
    Langevin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    pub kind: KernelKind,
    /// Initial step size `h`.
    pub step_size: f64,
    /// Dual-averaging adaptation of `h` during burn-in.
    pub adapt: bool,
    pub target_acceptance: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub convention: StepConvention,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            kind: KernelKind::InfMmala,
            step_size: 0.1,
            adapt: true,
            target_acceptance: 0.5,
            min_step: 1e-8,
            max_step: 1.0,
            convention: StepConvention::Langevin,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.min_step > 0.0 && self.min_step <= self.max_step && self.max_step.is_finite()) {
            return Err(Error::InvalidConfig("need 0 < min_step <= max_step".into()));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::InvalidConfig(
                "target acceptance must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// `ρ = (1−h)/(1+h)`.
pub fn rho(h: f64) -> f64 {
    (1.0 - h) / (1.0 + h)
}

/// `√(1−ρ²) = 2√h/(1+h)`, computed without cancellation.
pub fn innovation_scale(h: f64) -> f64 {
    2.0 * h.sqrt() / (1.0 + h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            iterations: 11_000,
            burn_in: 1_000,
            thin: 100,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(Error::InvalidConfig(
                "iterations must exceed burn-in".into(),
            ));
        }
        if self.thin == 0 {
            return Err(Error::InvalidConfig(
                "thinning stride must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Whether the state after iteration `i` (1-based) is kept.
    pub fn retains(&self, i: usize) -> bool {
        i > self.burn_in && (i - self.burn_in - 1) % self.thin == 0
    }

    pub fn retained_count(&self) -> usize {
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }
}

/// Potential, gradient and Gauss-Newton Hessian in whitened coordinates.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub phi: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// A density `exp(−Φ)·dμ₀/dμ_ref` on whitened coordinates.
pub trait Target: Sync {
    fn dim(&self) -> usize;
    fn potential(&self, s: &[f64]) -> Result<f64>;
    fn gradient(&self, s: &[f64]) -> Result<(f64, DVector<f64>)>;
    fn geometry(&self, s: &[f64]) -> Result<Geometry>;
    /// `log dμ₀/dμ_ref(s)`; `−∞` outside the prior support.
    fn log_prior_ratio(&self, s: &[f64]) -> f64;
    fn parameters(&self, s: &[f64]) -> ParameterVector;
    fn whiten(&self, u: &ParameterVector) -> Vec<f64>;
}

/// How the rate coordinates enter the chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMode {
    /// `(λ, D)` are sampled with the KL coefficients.
    Free,
    /// `(λ, D)` are held at the given values; only `ξ` is sampled.
    Frozen { lambda: f64, diffusion: f64 },
}

/// The posterior of a [`Posterior`] in whitened coordinates.
#[derive(Debug, Clone)]
pub struct PosteriorTarget<'a> {
    posterior: &'a Posterior,
    reference: ReferenceMeasure,
    rates: RateMode,
}

impl<'a> PosteriorTarget<'a> {
    pub fn new(posterior: &'a Posterior) -> Self {
        Self {
            posterior,
            reference: posterior.prior().reference(),
            rates: RateMode::Free,
        }
    }

    pub fn with_rates(mut self, rates: RateMode) -> Self {
        self.rates = rates;
        self
    }

    pub fn posterior(&self) -> &Posterior {
        self.posterior
    }

    fn offset(&self) -> usize {
        match self.rates {
            RateMode::Free => 0,
            RateMode::Frozen { .. } => 2,
        }
    }

    fn whiten_gradient(&self, g: &[f64]) -> DVector<f64> {
        match self.rates {
            RateMode::Free => {
                let mut w = DVector::from_column_slice(g);
                w[0] *= self.reference.lambda_std;
                w[1] *= self.reference.diffusion_std;
                w
            }
            RateMode::Frozen { .. } => DVector::from_column_slice(&g[2..]),
        }
    }
}

impl Target for PosteriorTarget<'_> {
    fn dim(&self) -> usize {
        self.posterior.dim() - self.offset()
    }

    fn potential(&self, s: &[f64]) -> Result<f64> {
        Ok(self.posterior.potential(&self.parameters(s))?.phi)
    }

    fn gradient(&self, s: &[f64]) -> Result<(f64, DVector<f64>)> {
        let (phi, g) = self.posterior.potential_and_gradient(&self.parameters(s))?;
        Ok((phi, self.whiten_gradient(&g)))
    }

    fn geometry(&self, s: &[f64]) -> Result<Geometry> {
        let lin = self.posterior.linearize(&self.parameters(s))?;
        let phi = self.posterior.phi_from_residual(&lin.residual);
        let mut jacobian = lin.jacobian.columns(self.offset(), self.dim()).into_owned();
        if let RateMode::Free = self.rates {
            jacobian.column_mut(0).scale_mut(self.reference.lambda_std);
            jacobian
                .column_mut(1)
                .scale_mut(self.reference.diffusion_std);
        }
        let sigma2 = self.posterior.noise_variance();
        let gradient = -jacobian.tr_mul(&DVector::from_column_slice(&lin.residual)) / sigma2;
        let hessian = self.posterior.gauss_newton_from(&jacobian);
        Ok(Geometry {
            phi,
            gradient,
            hessian,
        })
    }

    fn log_prior_ratio(&self, s: &[f64]) -> f64 {
        match self.rates {
            RateMode::Free => log_prior_over_ref(self.posterior.prior(), &self.parameters(s)),
            RateMode::Frozen { .. } => 0.0,
        }
    }

    fn parameters(&self, s: &[f64]) -> ParameterVector {
        match self.rates {
            RateMode::Free => self.reference.unwhiten(s),
            RateMode::Frozen { lambda, diffusion } => {
                ParameterVector::new(lambda, diffusion, s.to_vec())
            }
        }
    }

    fn whiten(&self, u: &ParameterVector) -> Vec<f64> {
        match self.rates {
            RateMode::Free => self.reference.whiten(u),
            RateMode::Frozen { .. } => u.xi.clone(),
        }
    }
}

/// The prior itself (`Φ ≡ 0`) over `(λ, D, ξ)`.
#[derive(Debug, Clone, Copy)]
pub struct PriorTarget {
    prior: PriorConfig,
    reference: ReferenceMeasure,
}

impl PriorTarget {
    pub fn new(prior: PriorConfig) -> Self {
        Self {
            prior,
            reference: prior.reference(),
        }
    }
}

impl Target for PriorTarget {
    fn dim(&self) -> usize {
        self.prior.n_coefficients() + 2
    }

    fn potential(&self, _: &[f64]) -> Result<f64> {
        Ok(0.0)
    }

    fn gradient(&self, _: &[f64]) -> Result<(f64, DVector<f64>)> {
        Ok((0.0, DVector::zeros(self.dim())))
    }

    fn geometry(&self, _: &[f64]) -> Result<Geometry> {
        let d = self.dim();
        Ok(Geometry {
            phi: 0.0,
            gradient: DVector::zeros(d),
            hessian: DMatrix::zeros(d, d),
        })
    }

    fn log_prior_ratio(&self, s: &[f64]) -> f64 {
        log_prior_over_ref(&self.prior, &self.parameters(s))
    }

    fn parameters(&self, s: &[f64]) -> ParameterVector {
        self.reference.unwhiten(s)
    }

    fn whiten(&self, u: &ParameterVector) -> Vec<f64> {
        self.reference.whiten(u)
    }
}

const JITTER_RETRIES: usize = 3;

/// Factorisation of `K⁻¹ = I + H`.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    hessian: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    half_logdet: f64,
}

impl Preconditioner {
    /// Factorise `I + H`, adding jitter `δI` with `δ = 1e-10·tr/dim`, growing
    /// tenfold, if the plain factorisation fails.
    pub fn new(hessian: DMatrix<f64>) -> Result<Self> {
        if hessian.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gauss-Newton Hessian".into()));
        }
        let d = hessian.nrows();
        let mut kinv = &hessian + DMatrix::identity(d, d);
        let mut jitter = 1e-10 * kinv.trace() / d as f64;
        let mut factor = Cholesky::new(kinv.clone());
        let mut retries = 0;
        while factor.is_none() {
            if retries == JITTER_RETRIES {
                return Err(Error::Factorization { retries });
            }
            kinv += DMatrix::identity(d, d) * jitter;
            jitter *= 10.0;
            retries += 1;
            factor = Cholesky::new(kinv.clone());
        }
        let factor = factor.expect("loop exits on success");
        let half_logdet = factor.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        Ok(Self {
            hessian,
            factor,
            half_logdet,
        })
    }

    pub fn dim(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    /// `K = (I + H)⁻¹` as a dense matrix.
    pub fn covariance(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }

    /// `K⁻¹ x`.
    pub fn apply_precision(&self, x: &DVector<f64>) -> DVector<f64> {
        x + &self.hessian * x
    }

    /// `K x`.
    pub fn apply_covariance(&self, x: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(x)
    }

    /// `L⁻ᵀ ζ`, which has covariance `K` for `ζ ~ N(0, I)`.
    pub fn color(&self, zeta: &DVector<f64>) -> DVector<f64> {
        self.factor
            .l_dirty()
            .tr_solve_lower_triangular(zeta)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `½ log det K⁻¹`.
    pub fn half_logdet_precision(&self) -> f64 {
        self.half_logdet
    }

    /// `g(s) = K(Hs − ∇Φ(s))`.
    pub fn drift(&self, s: &[f64], gradient: &DVector<f64>) -> DVector<f64> {
        let s = DVector::from_column_slice(s);
        self.apply_covariance(&(&self.hessian * s - gradient))
    }
}

/// A chain position with the quantities its kernel needs.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub s: Vec<f64>,
    pub phi: f64,
    pub log_prior: f64,
    pub preconditioner: Option<Arc<Preconditioner>>,
    pub drift: Option<DVector<f64>>,
}

impl ChainState {
    /// `−Φ + log dμ₀/dμ_ref`.
    pub fn log_target(&self) -> f64 {
        -self.phi + self.log_prior
    }
}

/// A proposal mechanism bound to a target.
#[derive(Debug, Clone)]
pub struct Kernel {
    kind: KernelKind,
    convention: StepConvention,
    frozen: Option<Arc<Preconditioner>>,
    anchor: Option<Vec<f64>>,
}

impl Kernel {
    /// `anchor` is where the `h_mala` preconditioner is frozen; it is ignored
    /// by the other kinds.
    pub fn new<T: Target + ?Sized>(
        target: &T,
        kind: KernelKind,
        anchor: Option<&[f64]>,
    ) -> Result<Self> {
        let (frozen, anchor) = match kind {
            KernelKind::HMala => {
                let a = anchor.ok_or_else(|| {
                    Error::InvalidConfig(
                        "the frozen-preconditioner kernel needs an anchor point".into(),
                    )
                })?;
                if a.len() != target.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: target.dim(),
                        got: a.len(),
                    });
                }
                let geometry = target.geometry(a)?;
                (
                    Some(Arc::new(Preconditioner::new(geometry.hessian)?)),
                    Some(a.to_vec()),
                )
            }
            _ => (None, None),
        };
        Ok(Self {
            kind,
            convention: StepConvention::Langevin,
            frozen,
            anchor,
        })
    }

    pub fn with_convention(mut self, convention: StepConvention) -> Self {
        self.convention = convention;
        self
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    /// The step that sets `ρ` for a user step `h`.
    fn autoregressive_step(&self, h: f64) -> f64 {
        match (self.kind.is_geometric(), self.convention) {
            (true, StepConvention::Langevin) => h / 4.0,
            _ => h,
        }
    }

    pub fn anchor(&self) -> Option<&[f64]> {
        self.anchor.as_deref()
    }

    /// Evaluate the target and kernel caches at `s`.
    pub fn state<T: Target + ?Sized>(&self, target: &T, s: &[f64]) -> Result<ChainState> {
        if s.len() != target.dim() {
            return Err(Error::DimensionMismatch {
                expected: target.dim(),
                got: s.len(),
            });
        }
        let log_prior = target.log_prior_ratio(s);
        let (phi, preconditioner, drift) = match self.kind {
            KernelKind::Pcn => (target.potential(s)?, None, None),
            KernelKind::InfMmala => {
                let geo = target.geometry(s)?;
                let pre = Preconditioner::new(geo.hessian)?;
                let drift = pre.drift(s, &geo.gradient);
                (geo.phi, Some(Arc::new(pre)), Some(drift))
            }
            KernelKind::HMala => {
                let (phi, gradient) = target.gradient(s)?;
                let pre = self
                    .frozen
                    .clone()
                    .expect("constructed with a preconditioner");
                let drift = pre.drift(s, &gradient);
                (phi, Some(pre), Some(drift))
            }
        };
        if !phi.is_finite() {
            return Err(Error::NonFinite(format!("potential {phi}")));
        }
        if let Some(d) = &drift {
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("proposal drift".into()));
            }
        }
        Ok(ChainState {
            s: s.to_vec(),
            phi,
            log_prior,
            preconditioner,
            drift,
        })
    }

    /// Draw `w` and return `v = ρs + √(1−ρ²)·w`.
    pub fn propose<R: Rng + ?Sized>(&self, state: &ChainState, h: f64, rng: &mut R) -> Vec<f64> {
        let d = state.s.len();
        let zeta = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = match (&state.preconditioner, &state.drift) {
            (Some(pre), Some(g)) => g * (0.5 * h.sqrt()) + pre.color(&zeta),
            _ => zeta,
        };
        let a = self.autoregressive_step(h);
        let (r, c) = (rho(a), innovation_scale(a));
        state
            .s
            .iter()
            .zip(w.iter())
            .map(|(si, wi)| r * si + c * wi)
            .collect()
    }

    /// `log q(from → to)` against the reference-preserving kernel.
    pub fn log_proposal_density(&self, from: &ChainState, to: &[f64], h: f64) -> f64 {
        let (Some(pre), Some(g)) = (&from.preconditioner, &from.drift) else {
            return 0.0;
        };
        let a = self.autoregressive_step(h);
        let (r, c) = (rho(a), innovation_scale(a));
        let w = DVector::from_iterator(
            to.len(),
            to.iter().zip(&from.s).map(|(v, s)| (v - r * s) / c),
        );
        let kinv_g = pre.apply_precision(g);
        -(h / 8.0) * g.dot(&kinv_g) + 0.5 * h.sqrt() * kinv_g.dot(&w)
            - 0.5 * w.dot(&(pre.hessian() * &w))
            + pre.half_logdet_precision()
    }

    /// `log α(u, v) = T(v→u) − T(u→v)` before truncation at 0; `−∞` when `v`
    /// lies outside the prior support.
    pub fn acceptance_log_ratio(&self, u: &ChainState, v: &ChainState, h: f64) -> f64 {
        if v.log_prior == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let forward = u.log_target() + self.log_proposal_density(u, &v.s, h);
        let backward = v.log_target() + self.log_proposal_density(v, &u.s, h);
        backward - forward
    }
}

/// Dual averaging of `log h` towards a target acceptance probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualAveraging {
    mu: f64,
    error_mean: f64,
    log_h_bar: f64,
    count: usize,
    target: f64,
    log_min: f64,
    log_max: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    pub fn new(initial: f64, target: f64, min: f64, max: f64) -> Self {
        let log_h = initial.ln().clamp(min.ln(), max.ln());
        Self {
            mu: (10.0 * initial).ln(),
            error_mean: 0.0,
            log_h_bar: log_h,
            count: 0,
            target,
            log_min: min.ln(),
            log_max: max.ln(),
        }
    }

    /// Record an acceptance probability and return the next step size.
    pub fn update(&mut self, accept_prob: f64) -> f64 {
        self.count += 1;
        let t = self.count as f64;
        let eta = 1.0 / (t + Self::T0);
        self.error_mean = (1.0 - eta) * self.error_mean + eta * (self.target - accept_prob);
        let log_h =
            (self.mu - t.sqrt() / Self::GAMMA * self.error_mean).clamp(self.log_min, self.log_max);
        let w = t.powf(-Self::KAPPA);
        self.log_h_bar = w * log_h + (1.0 - w) * self.log_h_bar;
        log_h.exp()
    }

    /// Averaged step size used once adaptation stops.
    pub fn final_step(&self) -> f64 {
        self.log_h_bar.clamp(self.log_min, self.log_max).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub phi: f64,
    pub lambda: f64,
    pub diffusion: f64,
    /// The first three KL coefficients (fewer if the basis is smaller).
    pub xi_head: Vec<f64>,
    pub accepted: bool,
    pub step_size: f64,
}

/// Everything needed to continue a chain bit-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub kind: KernelKind,
    pub iteration: usize,
    pub state: Vec<f64>,
    pub anchor: Option<Vec<f64>>,
    pub step_size: f64,
    pub adaptation: DualAveraging,
    pub accepted: usize,
    pub rng: ChaCha8Rng,
    pub trace: Vec<TraceRow>,
    pub retained: Vec<ParameterVector>,
    pub retained_iterations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub kind: KernelKind,
    pub protocol: Protocol,
    /// Step size after adaptation.
    pub step_size: f64,
    pub accepted: usize,
    pub total: usize,
    pub retained: Vec<ParameterVector>,
    pub retained_iterations: Vec<usize>,
    pub trace: Vec<TraceRow>,
    pub final_state: ParameterVector,
}

impl Chain {
    pub fn acceptance_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.accepted as f64 / self.total as f64
        }
    }

    /// Acceptance rate over the iterations after burn-in.
    pub fn acceptance_rate_after_burn_in(&self) -> f64 {
        let rows = &self.trace[self.protocol.burn_in.min(self.trace.len())..];
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().filter(|r| r.accepted).count() as f64 / rows.len() as f64
    }
}

/// A Metropolis-Hastings chain that can be stepped, checkpointed and resumed.
pub struct Sampler<'a, T: Target + ?Sized> {
    target: &'a T,
    kernel: Kernel,
    config: KernelConfig,
    protocol: Protocol,
    fingerprint: String,
    current: ChainState,
    rng: ChaCha8Rng,
    step_size: f64,
    adaptation: DualAveraging,
    iteration: usize,
    accepted: usize,
    trace: Vec<TraceRow>,
    retained: Vec<ParameterVector>,
    retained_iterations: Vec<usize>,
}

impl<'a, T: Target + ?Sized> Sampler<'a, T> {
    /// Start at `init` (whitened). For `h_mala` the preconditioner is frozen
    /// at `init`.
    pub fn new(
        target: &'a T,
        init: &[f64],
        config: KernelConfig,
        protocol: Protocol,
        rng: ChaCha8Rng,
        fingerprint: impl Into<String>,
    ) -> Result<Self> {
        config.validate()?;
        protocol.validate()?;
        if target.log_prior_ratio(init) == f64::NEG_INFINITY {
            return Err(Error::InvalidConfig(
                "initial state lies outside the prior support".into(),
            ));
        }
        let kernel =
            Kernel::new(target, config.kind, Some(init))?.with_convention(config.convention);
        let current = kernel.state(target, init)?;
        let step_size = config.step_size.clamp(config.min_step, config.max_step);
        Ok(Self {
            target,
            kernel,
            config,
            protocol,
            fingerprint: fingerprint.into(),
            current,
            rng,
            step_size,
            adaptation: DualAveraging::new(
                step_size,
                config.target_acceptance,
                config.min_step,
                config.max_step,
            ),
            iteration: 0,
            accepted: 0,
            trace: Vec::with_capacity(protocol.iterations),
            retained: Vec::with_capacity(protocol.retained_count()),
            retained_iterations: Vec::with_capacity(protocol.retained_count()),
        })
    }

    pub fn resume(
        target: &'a T,
        checkpoint: Checkpoint,
        config: KernelConfig,
        protocol: Protocol,
        fingerprint: impl Into<String>,
    ) -> Result<Self> {
        config.validate()?;
        protocol.validate()?;
        let fingerprint = fingerprint.into();
        if checkpoint.fingerprint != fingerprint {
            return Err(Error::CheckpointMismatch {
                expected: fingerprint,
                found: checkpoint.fingerprint,
            });
        }
        if checkpoint.kind != config.kind {
            return Err(Error::CheckpointMismatch {
                expected: format!("{:?}", config.kind),
                found: format!("{:?}", checkpoint.kind),
            });
        }
        let kernel = Kernel::new(target, config.kind, checkpoint.anchor.as_deref())?
            .with_convention(config.convention);
        let current = kernel.state(target, &checkpoint.state)?;
        Ok(Self {
            target,
            kernel,
            config,
            protocol,
            fingerprint,
            current,
            rng: checkpoint.rng,
            step_size: checkpoint.step_size,
            adaptation: checkpoint.adaptation,
            iteration: checkpoint.iteration,
            accepted: checkpoint.accepted,
            trace: checkpoint.trace,
            retained: checkpoint.retained,
            retained_iterations: checkpoint.retained_iterations,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.protocol.iterations
    }

    pub fn current(&self) -> &ChainState {
        &self.current
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            fingerprint: self.fingerprint.clone(),
            kind: self.config.kind,
            iteration: self.iteration,
            state: self.current.s.clone(),
            anchor: self.kernel.anchor().map(<[f64]>::to_vec),
            step_size: self.step_size,
            adaptation: self.adaptation.clone(),
            accepted: self.accepted,
            rng: self.rng.clone(),
            trace: self.trace.clone(),
            retained: self.retained.clone(),
            retained_iterations: self.retained_iterations.clone(),
        }
    }

    /// One Metropolis-Hastings transition. Inadmissible proposals are
    /// rejected; any other failure is returned and leaves the chain unchanged.
    pub fn step(&mut self) -> Result<()> {
        if self.is_finished() {
            return Ok(());
        }
        let mut rng = self.rng.clone();
        let h = self.step_size;
        let proposal = self.kernel.propose(&self.current, h, &mut rng);
        let log_u = rng.random::<f64>().ln();
        let mut next = None;
        let mut log_alpha = f64::NEG_INFINITY;
        if self.target.log_prior_ratio(&proposal) > f64::NEG_INFINITY {
            match self.kernel.state(self.target, &proposal) {
                Ok(v) => {
                    log_alpha = self.kernel.acceptance_log_ratio(&self.current, &v, h);
                    if log_alpha.is_nan() {
                        log_alpha = f64::NEG_INFINITY;
                    }
                    next = Some(v);
                }
                Err(e) if e.is_inadmissible() => {}
                Err(e) => return Err(e),
            }
        }
        self.rng = rng;
        self.iteration += 1;
        let accepted = log_u < log_alpha;
        if accepted {
            self.current = next.expect("accepted proposals are evaluated");
            self.accepted += 1;
        }
        let step_used = h;
        if self.config.adapt && self.iteration <= self.protocol.burn_in {
            let prob = log_alpha.min(0.0).exp();
            self.step_size = self.adaptation.update(prob);
            if self.iteration == self.protocol.burn_in {
                self.step_size = self.adaptation.final_step();
            }
        }
        let u = self.target.parameters(&self.current.s);
        self.trace.push(TraceRow {
            iteration: self.iteration,
            phi: self.current.phi,
            lambda: u.lambda,
            diffusion: u.diffusion,
            xi_head: u.xi.iter().take(3).copied().collect(),
            accepted,
            step_size: step_used,
        });
        if self.protocol.retains(self.iteration) {
            self.retained.push(u);
            self.retained_iterations.push(self.iteration);
        }
        Ok(())
    }

    /// Step until `iteration` (capped at the protocol length). A numerical
    /// failure aborts with a checkpoint of the last consistent state.
    pub fn run_until(&mut self, iteration: usize) -> Result<()> {
        let stop = iteration.min(self.protocol.iterations);
        while self.iteration < stop {
            if let Err(e) = self.step() {
                return Err(Error::ChainAborted {
                    iteration: self.iteration + 1,
                    reason: e.to_string(),
                    checkpoint: Box::new(self.checkpoint()),
                });
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Chain {
        Chain {
            kind: self.config.kind,
            protocol: self.protocol,
            step_size: self.step_size,
            accepted: self.accepted,
            total: self.iteration,
            retained: self.retained,
            retained_iterations: self.retained_iterations,
            trace: self.trace,
            final_state: self.target.parameters(&self.current.s),
        }
    }
}

/// Run a full chain from `init` (whitened).
pub fn run_chain<T: Target + ?Sized>(
    target: &T,
    init: &[f64],
    config: KernelConfig,
    protocol: Protocol,
    seed: u64,
) -> Result<Chain> {
    let mut sampler = Sampler::new(
        target,
        init,
        config,
        protocol,
        ChaCha8Rng::seed_from_u64(seed),
        "",
    )?;
    sampler.run_until(protocol.iterations)?;
    Ok(sampler.finish())
}
