//! Data misfit potential, Onsager-Machlup functional and their derivatives.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::map::{self, OptimResult, OptimizerConfig};
use crate::pde::{
    ForwardSolver, MassKind, ObservationOperator, PdeCoefficients, SpaceTimeGrid, TangentDirection,
    TimeScheme,
};
use crate::prior::{positive_source, KlBasis, KlField, ParameterVector, PriorConfig};

/// Map from the latent field to the PDE source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceLink {
    /// `f* = exp(f)`.
    #[default]
    Exp,
    /// `f* = f`. Makes the forward map linear in `ξ`; used for conjugate
    /// Gaussian checks.
    Identity,
}

/// Lattices produced by one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub latent: Array2<f64>,
    pub source: Array2<f64>,
    pub solution: Array2<f64>,
}

/// Parameter-to-solution map `u = (λ, D, ξ) ↦ y`.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    solver: ForwardSolver,
    field: KlField,
    link: SourceLink,
    execution: Execution,
}

impl ForwardModel {
    pub fn new(grid: SpaceTimeGrid, basis: KlBasis, mass: MassKind, scheme: TimeScheme) -> Self {
        Self {
            solver: ForwardSolver::new(grid, mass, scheme),
            field: KlField::new(basis, grid),
            link: SourceLink::Exp,
            execution: Execution::default(),
        }
    }

    /// Lumped mass, implicit Euler, `exp` link.
    pub fn standard(grid: SpaceTimeGrid, prior: &PriorConfig) -> Result<Self> {
        let basis = prior.basis(grid.length(), grid.final_time())?;
        Ok(Self::new(
            grid,
            basis,
            MassKind::Lumped,
            TimeScheme::ImplicitEuler,
        ))
    }

    pub fn with_link(mut self, link: SourceLink) -> Self {
        self.link = link;
        self
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn solver(&self) -> &ForwardSolver {
        &self.solver
    }

    pub fn field(&self) -> &KlField {
        &self.field
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        self.solver.grid()
    }

    pub fn link(&self) -> SourceLink {
        self.link
    }

    pub fn execution(&self) -> Execution {
        self.execution
    }

    /// Number of KL coefficients.
    pub fn n_coefficients(&self) -> usize {
        self.field.basis().len()
    }

    pub fn source(&self, u: &ParameterVector) -> Result<(Array2<f64>, Array2<f64>)> {
        let latent = self.field.field(&u.xi)?;
        let source = match self.link {
            SourceLink::Exp => positive_source(&latent)?,
            SourceLink::Identity => latent.clone(),
        };
        Ok((latent, source))
    }

    pub fn solve(&self, u: &ParameterVector) -> Result<ForwardState> {
        let (latent, source) = self.source(u)?;
        let solution = self.solver.solve_forward(&coefficients(u), &source)?;
        Ok(ForwardState {
            latent,
            source,
            solution,
        })
    }

    /// Source perturbation produced by a unit change of `ξ_k`.
    fn source_direction(&self, state: &ForwardState, k: usize) -> Array2<f64> {
        let mode = self.field.mode(k);
        match self.link {
            SourceLink::Exp => mode * &state.source,
            SourceLink::Identity => mode,
        }
    }

    /// Tangent solution for a direction `h` in `(λ, D, ξ)` coordinates.
    pub fn tangent(
        &self,
        u: &ParameterVector,
        state: &ForwardState,
        h: &ParameterVector,
    ) -> Result<Array2<f64>> {
        if h.xi.len() != u.xi.len() {
            return Err(Error::DimensionMismatch {
                expected: u.xi.len(),
                got: h.xi.len(),
            });
        }
        let latent = self.field.field(&h.xi)?;
        let source = match self.link {
            SourceLink::Exp => latent * &state.source,
            SourceLink::Identity => latent,
        };
        self.solver.solve_tangent(
            &coefficients(u),
            &state.solution,
            TangentDirection {
                lambda: h.lambda,
                diffusion: h.diffusion,
                source: Some(source.view()),
            },
        )
    }

    /// Derivative of `⟨load, y⟩` with respect to `(λ, D, ξ)`, where `load`
    /// is a lattice of weights on the nodal solution.
    pub fn pullback(
        &self,
        u: &ParameterVector,
        state: &ForwardState,
        load: &Array2<f64>,
    ) -> Result<Vec<f64>> {
        let coeffs = coefficients(u);
        let p = self.solver.solve_adjoint(&coeffs, load)?;
        let sens = self.solver.sensitivities(&state.solution, &p);
        let d_latent = match self.link {
            SourceLink::Exp => sens.source * &state.source,
            SourceLink::Identity => sens.source,
        };
        let mut out = Vec::with_capacity(u.dim());
        out.push(sens.lambda);
        out.push(sens.diffusion);
        out.extend(self.field.project(&d_latent)?);
        Ok(out)
    }
}

pub fn coefficients(u: &ParameterVector) -> PdeCoefficients {
    PdeCoefficients::new(u.lambda, u.diffusion)
}

/// One measurement `z` of the solution at `(t, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: f64,
    pub x: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub observations: Vec<Observation>,
    pub noise_variance: f64,
}

impl Dataset {
    pub fn new(observations: Vec<Observation>, noise_variance: f64) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::InvalidConfig("dataset has no observations".into()));
        }
        if !(noise_variance.is_finite() && noise_variance > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise variance must be positive, got {noise_variance}"
            )));
        }
        if let Some(o) = observations.iter().find(|o| !o.z.is_finite()) {
            return Err(Error::NonFinite(format!(
                "observation value at (t={}, x={})",
                o.t, o.x
            )));
        }
        Ok(Self {
            observations,
            noise_variance,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn points(&self) -> Vec<(f64, f64)> {
        self.observations.iter().map(|o| (o.t, o.x)).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.z).collect()
    }

    /// Empirical variance of the observed values.
    pub fn value_variance(&self) -> f64 {
        let n = self.len() as f64;
        let mean = self.observations.iter().map(|o| o.z).sum::<f64>() / n;
        self.observations
            .iter()
            .map(|o| (o.z - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0).max(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialReport {
    pub phi: f64,
    /// Onsager-Machlup value; `+∞` outside the prior box.
    pub om: f64,
    /// `z − G(u)`.
    pub residual: Vec<f64>,
    pub misfit_norm: f64,
}

/// Observation Jacobian together with the predictions it linearises.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub prediction: Vec<f64>,
    pub residual: Vec<f64>,
    /// `n × (N²+2)`, columns ordered `(λ, D, ξ₀, ξ₁, …)`.
    pub jacobian: DMatrix<f64>,
}

/// Posterior `μ_z` for a forward model, prior and dataset.
#[derive(Debug, Clone)]
pub struct Posterior {
    model: ForwardModel,
    prior: PriorConfig,
    data: Dataset,
    obs: ObservationOperator,
    values: Vec<f64>,
}

impl Posterior {
    pub fn new(model: ForwardModel, prior: PriorConfig, data: Dataset) -> Result<Self> {
        prior.validate()?;
        if prior.n_coefficients() != model.n_coefficients() {
            return Err(Error::DimensionMismatch {
                expected: model.n_coefficients(),
                got: prior.n_coefficients(),
            });
        }
        let obs = ObservationOperator::new(model.grid(), &data.points())?;
        let values = data.values();
        Ok(Self {
            model,
            prior,
            data,
            obs,
            values,
        })
    }

    pub fn with_noise_variance(&self, noise_variance: f64) -> Result<Self> {
        let data = Dataset::new(self.data.observations.clone(), noise_variance)?;
        Ok(Self {
            data,
            ..self.clone()
        })
    }

    pub fn model(&self) -> &ForwardModel {
        &self.model
    }

    pub fn prior(&self) -> &PriorConfig {
        &self.prior
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn observation_operator(&self) -> &ObservationOperator {
        &self.obs
    }

    pub fn noise_variance(&self) -> f64 {
        self.data.noise_variance
    }

    /// Parameter dimension `N² + 2`.
    pub fn dim(&self) -> usize {
        self.model.n_coefficients() + 2
    }

    fn check_dim(&self, u: &ParameterVector) -> Result<()> {
        if u.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: u.dim(),
            });
        }
        Ok(())
    }

    /// `(λ, D) ∈ [0, λ_m] × (0, D_m]`.
    pub fn in_box(&self, u: &ParameterVector) -> bool {
        (0.0..=self.prior.lambda_max).contains(&u.lambda)
            && u.diffusion > 0.0
            && u.diffusion <= self.prior.diffusion_max
    }

    /// Observations predicted by `u`, `G(u)`.
    pub fn predict(&self, u: &ParameterVector) -> Result<Vec<f64>> {
        self.check_dim(u)?;
        Ok(self.obs.apply(&self.model.solve(u)?.solution))
    }

    fn residual_of(&self, prediction: &[f64]) -> Vec<f64> {
        self.values
            .iter()
            .zip(prediction)
            .map(|(z, g)| z - g)
            .collect()
    }

    pub fn phi_from_residual(&self, residual: &[f64]) -> f64 {
        residual.iter().map(|r| r * r).sum::<f64>() / (2.0 * self.data.noise_variance)
    }

    /// `Φ + ½‖ξ‖²` inside the box, `+∞` outside.
    pub fn om_from_phi(&self, u: &ParameterVector, phi: f64) -> f64 {
        if self.in_box(u) {
            phi + 0.5 * u.xi_norm_sq()
        } else {
            f64::INFINITY
        }
    }

    pub fn potential(&self, u: &ParameterVector) -> Result<PotentialReport> {
        let residual = self.residual_of(&self.predict(u)?);
        let misfit_norm = residual.iter().map(|r| r * r).sum::<f64>().sqrt();
        let phi = self.phi_from_residual(&residual);
        if !phi.is_finite() {
            return Err(Error::NonFinite(format!("potential {phi}")));
        }
        Ok(PotentialReport {
            phi,
            om: self.om_from_phi(u, phi),
            residual,
            misfit_norm,
        })
    }

    /// Onsager-Machlup functional; `+∞` outside the box without solving.
    pub fn onsager_machlup(&self, u: &ParameterVector) -> Result<f64> {
        if !self.in_box(u) {
            return Ok(f64::INFINITY);
        }
        Ok(self.potential(u)?.om)
    }

    /// `Φ` and `∇Φ` from one forward and one adjoint solve.
    pub fn potential_and_gradient(&self, u: &ParameterVector) -> Result<(f64, Vec<f64>)> {
        self.check_dim(u)?;
        let state = self.model.solve(u)?;
        let residual = self.residual_of(&self.obs.apply(&state.solution));
        let phi = self.phi_from_residual(&residual);
        if !phi.is_finite() {
            return Err(Error::NonFinite(format!("potential {phi}")));
        }
        let weights: Vec<f64> = residual
            .iter()
            .map(|r| -r / self.data.noise_variance)
            .collect();
        let mut load = self.model.grid().zeros();
        self.obs.scatter_add(&weights, &mut load)?;
        Ok((phi, self.model.pullback(u, &state, &load)?))
    }

    pub fn grad_potential(&self, u: &ParameterVector) -> Result<Vec<f64>> {
        Ok(self.potential_and_gradient(u)?.1)
    }

    /// Jacobian-vector product `J h`.
    pub fn jvp(&self, u: &ParameterVector, h: &ParameterVector) -> Result<Vec<f64>> {
        self.check_dim(u)?;
        let state = self.model.solve(u)?;
        Ok(self.obs.apply(&self.model.tangent(u, &state, h)?))
    }

    /// Vector-Jacobian product `Jᵀ r`.
    pub fn vjp(&self, u: &ParameterVector, r: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(u)?;
        let state = self.model.solve(u)?;
        let mut load = self.model.grid().zeros();
        self.obs.scatter_add(r, &mut load)?;
        self.model.pullback(u, &state, &load)
    }

    /// Observation Jacobian from `N²+2` tangent solves, one per column.
    pub fn linearize(&self, u: &ParameterVector) -> Result<Linearization> {
        self.check_dim(u)?;
        let state = self.model.solve(u)?;
        let prediction = self.obs.apply(&state.solution);
        let residual = self.residual_of(&prediction);
        let solver = self.model.solver();
        let coeffs = coefficients(u);
        let columns = self.model.execution().map_indexed(self.dim(), |c| {
            let tangent = match c {
                0 => solver.solve_tangent(
                    &coeffs,
                    &state.solution,
                    TangentDirection {
                        lambda: 1.0,
                        diffusion: 0.0,
                        source: None,
                    },
                ),
                1 => solver.solve_tangent(
                    &coeffs,
                    &state.solution,
                    TangentDirection {
                        lambda: 0.0,
                        diffusion: 1.0,
                        source: None,
                    },
                ),
                _ => {
                    let ds = self.model.source_direction(&state, c - 2);
                    solver.solve_tangent(
                        &coeffs,
                        &state.solution,
                        TangentDirection {
                            lambda: 0.0,
                            diffusion: 0.0,
                            source: Some(ds.view()),
                        },
                    )
                }
            };
            tangent.map(|t| self.obs.apply(&t))
        });
        let n = self.obs.len();
        let mut jacobian = DMatrix::zeros(n, self.dim());
        for (c, column) in columns.into_iter().enumerate() {
            let column = column?;
            jacobian.column_mut(c).copy_from_slice(&column);
        }
        Ok(Linearization {
            prediction,
            residual,
            jacobian,
        })
    }

    pub fn jacobian(&self, u: &ParameterVector) -> Result<DMatrix<f64>> {
        Ok(self.linearize(u)?.jacobian)
    }

    /// `JᵀJ/σ²` from a precomputed Jacobian.
    pub fn gauss_newton_from(&self, jacobian: &DMatrix<f64>) -> DMatrix<f64> {
        let h = jacobian.tr_mul(jacobian) / self.data.noise_variance;
        // symmetrise away round-off in the product
        (&h + h.transpose()) * 0.5
    }

    pub fn gauss_newton_hessian(&self, u: &ParameterVector) -> Result<DMatrix<f64>> {
        Ok(self.gauss_newton_from(&self.jacobian(u)?))
    }

    /// `∇Φ = −Jᵀ r / σ²` from a linearisation.
    pub fn gradient_from(&self, lin: &Linearization) -> DVector<f64> {
        -lin.jacobian
            .tr_mul(&DVector::from_column_slice(&lin.residual))
            / self.data.noise_variance
    }
}

/// `n` points drawn uniformly from the closed space-time rectangle.
pub fn random_points<R: Rng + ?Sized>(
    grid: &SpaceTimeGrid,
    n: usize,
    rng: &mut R,
) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| {
            let t = rng.random::<f64>() * grid.final_time();
            let x = rng.random::<f64>() * grid.length();
            (t, x)
        })
        .collect()
}

/// Observations `G(truth) + η` with `η ~ N(0, noise_sd²)` at `points`.
pub fn synthesize<R: Rng + ?Sized>(
    model: &ForwardModel,
    truth: &ParameterVector,
    points: &[(f64, f64)],
    noise_sd: f64,
    rng: &mut R,
) -> Result<Vec<Observation>> {
    let obs = ObservationOperator::new(model.grid(), points)?;
    let clean = obs.apply(&model.solve(truth)?.solution);
    Ok(points
        .iter()
        .zip(clean)
        .map(|(&(t, x), g)| {
            let eta: f64 = rng.sample(rand_distr::StandardNormal);
            Observation {
                t,
                x,
                z: g + noise_sd * eta,
            }
        })
        .collect())
}

/// Residual scaling used by the noise-variance update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseUpdate {
    /// `σ² = 2‖z − G(u_MAP)‖²/(n−1)`. Settles near twice the noise level
    /// on synthetic data.
    Doubled,
    /// `σ² = ‖z − G(u_MAP)‖²/(n−1)`.
    #[default]
    SampleVariance,
}

impl NoiseUpdate {
    pub fn apply(self, residual_sq: f64, n: usize) -> f64 {
        let scale = match self {
            NoiseUpdate::Doubled => 2.0,
            NoiseUpdate::SampleVariance => 1.0,
        };
        scale * residual_sq / (n as f64 - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub iterations: usize,
    pub starts: usize,
    pub update: NoiseUpdate,
    /// Lower bound applied when the fit interpolates the data.
    pub floor: f64,
    /// Starting variance; the empirical variance of the data when absent.
    pub initial: Option<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            starts: 3,
            update: NoiseUpdate::SampleVariance,
            floor: 1e-12,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseIterate {
    pub noise_variance: f64,
    pub objective: f64,
    pub residual_sq: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseEstimate {
    pub noise_variance: f64,
    pub map: OptimResult,
    /// Variance used for each MAP solve, the resulting objective and squared
    /// residual norm.
    pub history: Vec<NoiseIterate>,
    /// Set when some fit reproduced the data exactly and the floor was used.
    pub degenerate: bool,
}

/// Alternate multi-start MAP estimation and the residual variance update.
/// The noise variance stored in `posterior` is ignored.
pub fn estimate_noise<R: Rng + ?Sized>(
    posterior: &Posterior,
    noise: &NoiseConfig,
    optimizer: &OptimizerConfig,
    rng: &mut R,
) -> Result<NoiseEstimate> {
    let n = posterior.data().len();
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "noise estimation needs at least 2 observations, got {n}"
        )));
    }
    if noise.iterations == 0 || noise.starts == 0 {
        return Err(Error::InvalidConfig(
            "noise estimation needs at least one iteration and start".into(),
        ));
    }
    let mut variance = noise
        .initial
        .unwrap_or_else(|| posterior.data().value_variance())
        .max(noise.floor);
    let mut history = Vec::with_capacity(noise.iterations);
    let mut degenerate = false;
    let mut last = None;
    for _ in 0..noise.iterations {
        let current = posterior.with_noise_variance(variance)?;
        let best = map::multi_start(&current, optimizer, noise.starts, rng)?.best;
        let residual_sq = 2.0 * variance * best.phi;
        history.push(NoiseIterate {
            noise_variance: variance,
            objective: best.objective,
            residual_sq,
        });
        let mut next = noise.update.apply(residual_sq, n);
        if !(next > noise.floor) {
            next = noise.floor;
            degenerate = true;
        }
        variance = next;
        last = Some(best);
    }
    Ok(NoiseEstimate {
        noise_variance: variance,
        map: last.expect("at least one iteration"),
        history,
        degenerate,
    })
}
