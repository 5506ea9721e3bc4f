#![allow(dead_code)]

use parinv::pde::{MassKind, TimeScheme};
use parinv::posterior::{random_points, synthesize, SourceLink};
use parinv::prior::{Normalization, Spectrum};
use parinv::{Dataset, ForwardModel, ParameterVector, Posterior, PriorConfig, SpaceTimeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `L = T = 100`, 100 interior nodes, 30 steps.
pub fn paper_grid() -> SpaceTimeGrid {
    SpaceTimeGrid::new(100.0, 100.0, 100, 30).unwrap()
}

/// `λ_m = D_m = 0.5`, `N = 10`, `α = 2`, orthonormal basis, printed spectrum.
pub fn paper_prior() -> PriorConfig {
    PriorConfig::default()
}

/// A small problem where every solve takes microseconds.
pub fn small_grid() -> SpaceTimeGrid {
    SpaceTimeGrid::new(1.0, 1.0, 16, 12).unwrap()
}

pub fn small_prior() -> PriorConfig {
    PriorConfig {
        lambda_max: 1.0,
        diffusion_max: 0.5,
        truncation: 3,
        alpha: 1.2,
        normalization: Normalization::Orthonormal,
        spectrum: Spectrum::Dirichlet,
    }
}

/// KL coefficients whose latent field is `Σ a_k · (unit-peak mode k)`.
pub fn coefficients_for_peaks(model: &ForwardModel, peaks: &[((usize, usize), f64)]) -> Vec<f64> {
    let basis = model.field().basis();
    let mut xi = vec![0.0; basis.len()];
    for &((i1, i2), a) in peaks {
        let k = basis.index(i1, i2);
        xi[k] = a / (basis.eigenvalue(k).sqrt() * basis.normalization_constant());
    }
    xi
}

/// Smooth truth for the paper-scale twin: `λ = 0.3`, `D = 0.03` and a
/// latent field mixing three low modes with peak values of order one.
pub fn twin_truth(model: &ForwardModel) -> ParameterVector {
    let xi = coefficients_for_peaks(model, &[((1, 1), 1.5), ((2, 1), 0.6), ((1, 2), -0.4)]);
    ParameterVector::new(0.3, 0.03, xi)
}

/// Random parameter whose latent field has order-one amplitude, with rates
/// drawn inside the prior box.
pub fn moderate_parameter<R: Rng>(
    model: &ForwardModel,
    prior: &PriorConfig,
    rng: &mut R,
) -> ParameterVector {
    let basis = model.field().basis();
    let c = basis.normalization_constant();
    let lambda = prior.lambda_max * (0.1 + 0.8 * rng.random::<f64>());
    let diffusion = prior.diffusion_max * (0.1 + 0.8 * rng.random::<f64>());
    let xi = (0..basis.len())
        .map(|k| {
            let z: f64 = rng.sample(StandardNormal);
            0.5 * z / (basis.eigenvalue(k).sqrt() * c * (1.0 + k as f64).sqrt())
        })
        .collect();
    ParameterVector::new(lambda, diffusion, xi)
}

pub fn model(grid: SpaceTimeGrid, prior: &PriorConfig) -> ForwardModel {
    ForwardModel::standard(grid, prior).unwrap()
}

pub fn model_with(
    grid: SpaceTimeGrid,
    prior: &PriorConfig,
    mass: MassKind,
    scheme: TimeScheme,
    link: SourceLink,
) -> ForwardModel {
    let basis = prior.basis(grid.length(), grid.final_time()).unwrap();
    ForwardModel::new(grid, basis, mass, scheme).with_link(link)
}

/// Posterior with `n` uniform observations of `truth` and noise standard
/// deviation `fraction · max|G(truth)|`. Returns the true noise variance.
pub fn twin_posterior<R: Rng>(
    model: ForwardModel,
    prior: PriorConfig,
    truth: &ParameterVector,
    n: usize,
    fraction: f64,
    rng: &mut R,
) -> (Posterior, f64) {
    let points = random_points(model.grid(), n, rng);
    let clean = synthesize(&model, truth, &points, 0.0, rng).unwrap();
    let amplitude = clean.iter().map(|o| o.z.abs()).fold(0.0, f64::max);
    let sd = fraction * amplitude;
    let observations = if sd > 0.0 {
        synthesize(&model, truth, &points, sd, rng).unwrap()
    } else {
        clean
    };
    let variance = if sd > 0.0 { sd * sd } else { 1.0 };
    let data = Dataset::new(observations, variance).unwrap();
    (Posterior::new(model, prior, data).unwrap(), sd * sd)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Central differences of `Φ` with a per-coordinate step `eps·max(1, |u_i|)`.
pub fn fd_gradient(posterior: &Posterior, u: &ParameterVector, eps: f64) -> Vec<f64> {
    let base = u.to_vec();
    (0..base.len())
        .map(|i| {
            let h = eps * base[i].abs().max(1.0);
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += h;
            minus[i] -= h;
            let phi = |v: &[f64]| {
                posterior
                    .potential(&ParameterVector::from_slice(v).unwrap())
                    .unwrap()
                    .phi
            };
            (phi(&plus) - phi(&minus)) / (2.0 * h)
        })
        .collect()
}

/// Largest componentwise relative error, with components below `floor·‖reference‖∞`
/// measured against that floor.
pub fn max_component_error(value: &[f64], reference: &[f64], floor: f64) -> f64 {
    let scale = reference.iter().map(|v| v.abs()).fold(0.0, f64::max);
    value
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / b.abs().max(floor * scale).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// Linear-Gaussian test problem: identity source link, frozen rates and a
/// closed-form posterior `N(mean, covariance)` over the KL coefficients.
pub struct Conjugate {
    pub posterior: Posterior,
    pub lambda: f64,
    pub diffusion: f64,
    pub mean: nalgebra::DVector<f64>,
    pub covariance: nalgebra::DMatrix<f64>,
}

pub fn conjugate(seed: u64, n: usize, fraction: f64) -> Conjugate {
    let prior = small_prior();
    let model = model_with(
        small_grid(),
        &prior,
        MassKind::Lumped,
        TimeScheme::ImplicitEuler,
        SourceLink::Identity,
    );
    let mut rng = rng(seed);
    let (lambda, diffusion) = (0.3, 0.2);
    let mut truth = moderate_parameter(&model, &prior, &mut rng);
    truth.lambda = lambda;
    truth.diffusion = diffusion;
    let (posterior, _) = twin_posterior(model, prior, &truth, n, fraction, &mut rng);
    let at = ParameterVector::new(
        lambda,
        diffusion,
        vec![0.0; posterior.prior().n_coefficients()],
    );
    let jacobian = posterior.jacobian(&at).unwrap();
    let a = jacobian.columns(2, jacobian.ncols() - 2).into_owned();
    let sigma2 = posterior.noise_variance();
    let d = a.ncols();
    let precision = nalgebra::DMatrix::identity(d, d) + a.tr_mul(&a) / sigma2;
    let covariance = precision.try_inverse().unwrap();
    let z = nalgebra::DVector::from_vec(posterior.data().values());
    let mean = &covariance * (a.tr_mul(&z) / sigma2);
    Conjugate {
        posterior,
        lambda,
        diffusion,
        mean,
        covariance,
    }
}

/// Worst standardized mean error and worst relative variance error of a
/// chain on the conjugate problem.
pub struct ConjugateScore {
    pub mean_z: f64,
    pub variance_rel: f64,
    pub acceptance: f64,
}

pub fn score_conjugate(
    problem: &Conjugate,
    samples: &[ParameterVector],
    acceptance: f64,
) -> ConjugateScore {
    use parinv::diagnostics::{batch_means_se, mean, variance};
    let mut mean_z = 0.0f64;
    let mut variance_rel = 0.0f64;
    for k in 0..problem.mean.len() {
        let series: Vec<f64> = samples.iter().map(|u| u.xi[k]).collect();
        let se = batch_means_se(&series, 50);
        mean_z = mean_z.max((mean(&series) - problem.mean[k]).abs() / se);
        variance_rel =
            variance_rel.max((variance(&series) / problem.covariance[(k, k)] - 1.0).abs());
    }
    ConjugateScore {
        mean_z,
        variance_rel,
        acceptance,
    }
}
