//! Minimisation of the Onsager-Machlup functional `I(u) = Φ(u) + ½‖ξ‖²` over
//! the box `[0, λ_m] × [ε_D, D_m] × ℝ^{N²}`.
//!
//! The optimiser is a projected limited-memory BFGS method working in
//! whitened coordinates (rates scaled by their reference standard deviations),
//! with Armijo backtracking along the projected path. Variables sitting on an
//! active bound are held fixed when forming the quasi-Newton direction.
//! Leading KL modes make the problem badly conditioned, so the two-loop
//! recursion is seeded with the Gauss-Newton curvature `(I + JᵀJ/σ²)⁻¹`,
//! refreshed every few iterations.

use std::collections::VecDeque;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posterior::Posterior;
use crate::prior::{ParameterVector, ReferenceMeasure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartDistribution {
    /// Rates drawn from their uniform priors, `ξ = 0`.
    #[default]
    PriorRates,
    /// Full prior draw. With slowly decaying spectra the sampled sources can
    /// overflow, in which case the start is rejected.
    Prior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Stop once the projected gradient norm falls below this fraction of its
    /// value at the start.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Number of stored correction pairs.
    pub memory: usize,
    /// Lower bound `ε_D` on the diffusion rate.
    pub diffusion_floor: f64,
    pub start: StartDistribution,
    /// Iterations between Gauss-Newton refreshes of the initial inverse
    /// Hessian `(I + JᵀJ/σ²)⁻¹`; `0` uses the scalar Barzilai-Borwein guess.
    pub curvature_refresh: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 500,
            memory: 10,
            diffusion_floor: 1e-8,
            start: StartDistribution::PriorRates,
            curvature_refresh: 20,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || self.max_iterations == 0 || self.memory == 0 {
            return Err(Error::InvalidConfig(
                "optimizer needs positive tolerance, iterations and memory".into(),
            ));
        }
        if !(self.diffusion_floor > 0.0) {
            return Err(Error::InvalidConfig(
                "diffusion floor must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub u_map: ParameterVector,
    /// `I(u_map)`.
    pub objective: f64,
    /// `Φ(u_map)`.
    pub phi: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Projected gradient norm at exit, in whitened coordinates.
    pub gradient_norm: f64,
    /// Objective after every accepted iteration, starting with the initial value.
    pub history: Vec<f64>,
    pub message: String,
}

/// Box constraints in whitened coordinates.
#[derive(Debug, Clone)]
struct WhitenedBox {
    reference: ReferenceMeasure,
    lambda_max: f64,
    diffusion_min: f64,
    diffusion_max: f64,
    lo: [f64; 2],
    hi: [f64; 2],
}

impl WhitenedBox {
    fn new(posterior: &Posterior, floor: f64) -> Self {
        let prior = posterior.prior();
        let r = prior.reference();
        let diffusion_min = floor.min(prior.diffusion_max);
        Self {
            reference: r,
            lambda_max: prior.lambda_max,
            diffusion_min,
            diffusion_max: prior.diffusion_max,
            lo: [
                -r.lambda_ref / r.lambda_std,
                (diffusion_min - r.diffusion_ref) / r.diffusion_std,
            ],
            hi: [
                (prior.lambda_max - r.lambda_ref) / r.lambda_std,
                (prior.diffusion_max - r.diffusion_ref) / r.diffusion_std,
            ],
        }
    }

    fn lo(&self, i: usize) -> f64 {
        if i < 2 {
            self.lo[i]
        } else {
            f64::NEG_INFINITY
        }
    }

    fn hi(&self, i: usize) -> f64 {
        if i < 2 {
            self.hi[i]
        } else {
            f64::INFINITY
        }
    }

    fn project(&self, x: &mut [f64]) {
        for i in 0..2 {
            x[i] = x[i].clamp(self.lo[i], self.hi[i]);
        }
    }

    fn clamp_parameters(&self, u: &mut ParameterVector) {
        u.lambda = u.lambda.clamp(0.0, self.lambda_max);
        u.diffusion = u.diffusion.clamp(self.diffusion_min, self.diffusion_max);
    }

    fn to_parameters(&self, x: &[f64]) -> ParameterVector {
        let mut u = self.reference.unwhiten(x);
        self.clamp_parameters(&mut u);
        u
    }

    /// `‖P(x − g) − x‖`.
    fn projected_gradient_norm(&self, x: &[f64], g: &[f64]) -> f64 {
        x.iter()
            .zip(g)
            .enumerate()
            .map(|(i, (&xi, &gi))| ((xi - gi).clamp(self.lo(i), self.hi(i)) - xi).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn is_active(&self, i: usize, x: f64, g: f64) -> bool {
        (x <= self.lo(i) && g > 0.0) || (x >= self.hi(i) && g < 0.0)
    }
}

/// Objective and whitened gradient; inadmissible points evaluate to `+∞`.
fn evaluate(
    posterior: &Posterior,
    bounds: &WhitenedBox,
    x: &[f64],
) -> Result<(f64, f64, Vec<f64>)> {
    let u = bounds.to_parameters(x);
    match posterior.potential_and_gradient(&u) {
        Ok((phi, g)) => {
            let r = &bounds.reference;
            let mut grad = Vec::with_capacity(g.len());
            grad.push(g[0] * r.lambda_std);
            grad.push(g[1] * r.diffusion_std);
            grad.extend(g[2..].iter().zip(&u.xi).map(|(gi, xi)| gi + xi));
            let f = phi + 0.5 * u.xi_norm_sq();
            if f.is_finite() && grad.iter().all(|v| v.is_finite()) {
                Ok((f, phi, grad))
            } else {
                Ok((f64::INFINITY, f64::INFINITY, Vec::new()))
            }
        }
        Err(e) if e.is_inadmissible() => Ok((f64::INFINITY, f64::INFINITY, Vec::new())),
        Err(e) => Err(e),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// `(I + JᵀJ/σ²)` in whitened coordinates at `x`, or `None` where the
/// forward map is inadmissible.
fn curvature(
    posterior: &Posterior,
    bounds: &WhitenedBox,
    x: &[f64],
) -> Result<Option<Cholesky<f64, Dyn>>> {
    let u = bounds.to_parameters(x);
    let mut jacobian = match posterior.jacobian(&u) {
        Ok(j) => j,
        Err(e) if e.is_inadmissible() => return Ok(None),
        Err(e) => return Err(e),
    };
    jacobian
        .column_mut(0)
        .scale_mut(bounds.reference.lambda_std);
    jacobian
        .column_mut(1)
        .scale_mut(bounds.reference.diffusion_std);
    let h = posterior.gauss_newton_from(&jacobian) + DMatrix::identity(x.len(), x.len());
    Ok(Cholesky::new(h))
}

/// Two-loop recursion: `−H g` for the inverse Hessian approximation `H`,
/// seeded with `initial⁻¹` when given and a scaled identity otherwise.
fn lbfgs_direction(
    memory: &VecDeque<Pair>,
    g: &[f64],
    initial: Option<&Cholesky<f64, Dyn>>,
) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for p in memory.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        q.iter_mut().zip(&p.y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some(factor) = initial {
        q = factor.solve(&DVector::from_vec(q)).data.into();
    } else if let Some(last) = memory.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (p, a) in memory.iter().zip(alphas.iter().rev()) {
        let b = p.rho * dot(&p.y, &q);
        q.iter_mut()
            .zip(&p.s)
            .for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// Local minimiser of `I` from `start`.
pub fn minimize_om(
    posterior: &Posterior,
    start: &ParameterVector,
    config: &OptimizerConfig,
) -> Result<OptimResult> {
    config.validate()?;
    if start.dim() != posterior.dim() {
        return Err(Error::DimensionMismatch {
            expected: posterior.dim(),
            got: start.dim(),
        });
    }
    let bounds = WhitenedBox::new(posterior, config.diffusion_floor);
    let mut x = bounds.reference.whiten(start);
    bounds.project(&mut x);
    let (mut f, mut phi, mut g) = evaluate(posterior, &bounds, &x)?;
    if !f.is_finite() {
        return Err(Error::Optimization(format!(
            "objective is not finite at the start point {start:?}"
        )));
    }
    let pg0 = bounds.projected_gradient_norm(&x, &g);
    let threshold = config.tolerance * pg0;
    let mut history = vec![f];
    let mut memory: VecDeque<Pair> = VecDeque::with_capacity(config.memory);
    let mut pgn = pg0;
    let mut converged = pgn <= threshold || pgn == 0.0;
    let mut message = String::new();
    let mut iterations = 0;
    let mut initial = None;

    while !converged && iterations < config.max_iterations {
        if config.curvature_refresh > 0 && iterations % config.curvature_refresh == 0 {
            initial = curvature(posterior, &bounds, &x)?;
            memory.clear();
        }
        let active: Vec<bool> = (0..x.len())
            .map(|i| bounds.is_active(i, x[i], g[i]))
            .collect();
        let free_g: Vec<f64> = g
            .iter()
            .zip(&active)
            .map(|(&gi, &a)| if a { 0.0 } else { gi })
            .collect();
        let mut d = lbfgs_direction(&memory, &free_g, initial.as_ref());
        d.iter_mut().zip(&active).for_each(|(di, &a)| {
            if a {
                *di = 0.0
            }
        });
        let slope = dot(&d, &g);
        if !(slope < 0.0) {
            memory.clear();
            d = free_g.iter().map(|v| -v).collect();
        }
        let dn = norm(&d);
        if dn == 0.0 {
            converged = true;
            break;
        }
        let mut step = if memory.is_empty() && initial.is_none() {
            (1.0 / dn).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            bounds.project(&mut xt);
            let moved: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
            if moved.iter().all(|&v| v == 0.0) {
                break;
            }
            let (ft, phit, gt) = evaluate(posterior, &bounds, &xt)?;
            if ft.is_finite() && ft <= f + ARMIJO * dot(&g, &moved) {
                accepted = Some((xt, ft, phit, gt, moved));
                break;
            }
            step *= 0.5;
        }

        let Some((xt, ft, phit, gt, s)) = accepted else {
            if !memory.is_empty() {
                memory.clear();
                continue;
            }
            message = "line search failed to decrease the objective".into();
            break;
        };
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if memory.len() == config.memory {
                memory.pop_front();
            }
            memory.push_back(Pair {
                s,
                y,
                rho: 1.0 / sy,
            });
        }
        x = xt;
        f = ft;
        phi = phit;
        g = gt;
        iterations += 1;
        history.push(f);
        pgn = bounds.projected_gradient_norm(&x, &g);
        converged = pgn <= threshold;
    }
    if message.is_empty() {
        message = if converged {
            "converged".into()
        } else {
            "iteration limit reached".into()
        };
    }
    Ok(OptimResult {
        u_map: bounds.to_parameters(&x),
        objective: f,
        phi,
        iterations,
        converged,
        gradient_norm: pgn,
        history,
        message,
    })
}

/// Draw a starting point inside the optimisation box.
pub fn draw_start<R: Rng + ?Sized>(
    posterior: &Posterior,
    config: &OptimizerConfig,
    rng: &mut R,
) -> ParameterVector {
    let prior = posterior.prior();
    let lambda = rng.random::<f64>() * prior.lambda_max;
    let diffusion = (rng.random::<f64>() * prior.diffusion_max).max(config.diffusion_floor);
    let xi = match config.start {
        StartDistribution::PriorRates => vec![0.0; prior.n_coefficients()],
        StartDistribution::Prior => (0..prior.n_coefficients())
            .map(|_| rng.sample(StandardNormal))
            .collect(),
    };
    ParameterVector {
        lambda,
        diffusion,
        xi,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiStart {
    pub best: OptimResult,
    pub best_index: usize,
    /// Final objective of every start; `+∞` for failed starts.
    pub objectives: Vec<f64>,
}

/// Best of `k` local minimisations from random starts. Starts are drawn
/// sequentially from `rng` and then optimised concurrently; ties are broken
/// by start index.
pub fn multi_start<R: Rng + ?Sized>(
    posterior: &Posterior,
    config: &OptimizerConfig,
    k: usize,
    rng: &mut R,
) -> Result<MultiStart> {
    if k == 0 {
        return Err(Error::InvalidConfig(
            "multi-start needs at least one start".into(),
        ));
    }
    let starts: Vec<ParameterVector> = (0..k).map(|_| draw_start(posterior, config, rng)).collect();
    minimize_from(posterior, config, &starts)
}

/// Best of local minimisations from the given starts.
pub fn minimize_from(
    posterior: &Posterior,
    config: &OptimizerConfig,
    starts: &[ParameterVector],
) -> Result<MultiStart> {
    let results = posterior
        .model()
        .execution()
        .map_slice(starts, |s| minimize_om(posterior, s, config));
    let objectives: Vec<f64> = results
        .iter()
        .map(|r| r.as_ref().map_or(f64::INFINITY, |o| o.objective))
        .collect();
    let mut best: Option<(usize, OptimResult)> = None;
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => {
                if best
                    .as_ref()
                    .map_or(true, |(_, b)| o.objective < b.objective)
                {
                    best = Some((i, o));
                }
            }
            Err(e) => failures.push(format!("start {i}: {e}")),
        }
    }
    match best {
        Some((best_index, best)) => Ok(MultiStart {
            best,
            best_index,
            objectives,
        }),
        None => Err(Error::Optimization(format!(
            "all starts failed: {}",
            failures.join("; ")
        ))),
    }
}
