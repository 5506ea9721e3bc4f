//! Prior `μ₀ = U([0,λ_m]) ⊗ U([0,D_m]) ⊗ N(0, (−Δ)^(−α))` on `(λ, D, f)` and
//! its Gaussian reference measure.
//!
//! The latent log-source `f` is represented by a truncated Karhunen-Loève
//! expansion over the tensor sine basis of `[0,T] × [0,L]`,
//!
//! ```text
//! f(t, x) = Σ_{1 ≤ i₁,i₂ ≤ N} √λ_{i₁,i₂} ξ_{i₁,i₂} φ_{i₁,i₂}(t, x),   ξ ~ N(0, I)
//! φ_{i₁,i₂}(t, x) = c · sin(i₁πx/L) · sin(i₂πt/T)
//! ```
//!
//! The flat coefficient index is `k = (i₁−1)·N + (i₂−1)` (space frequency
//! major). The positive source is `f* = exp(f)`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pde::SpaceTimeGrid;

/// Largest latent value whose exponential is finite.
pub const MAX_LATENT: f64 = 709.782_712_893_384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `c = 2/√(LT)`, which makes the tensor sine basis orthonormal in
    /// `L²([0,T]×[0,L])`.
    #[default]
    Orthonormal,
    /// `c = 1/√(LT)`; the resulting functions have squared norm 1/4.
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spectrum {
    /// `λ = ((i₁/(πL))² + (i₂/(πT))²)^(−α)`.
    #[default]
    Scaled,
    /// Dirichlet Laplacian eigenvalues, `λ = ((i₁π/L)² + (i₂π/T)²)^(−α)`.
    Dirichlet,
}

/// Eigenpairs of the prior covariance of the latent log-source.
#[derive(Debug, Clone, PartialEq)]
pub struct KlBasis {
    truncation: usize,
    alpha: f64,
    length: f64,
    final_time: f64,
    normalization: Normalization,
    spectrum: Spectrum,
    eigenvalues: Vec<f64>,
}

impl KlBasis {
    pub fn new(
        truncation: usize,
        alpha: f64,
        length: f64,
        final_time: f64,
        normalization: Normalization,
        spectrum: Spectrum,
    ) -> Result<Self> {
        if truncation == 0 {
            return Err(Error::InvalidConfig(
                "KL truncation must be at least 1".into(),
            ));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "smoothness exponent must be positive, got {alpha}"
            )));
        }
        if !(length > 0.0 && final_time > 0.0) {
            return Err(Error::InvalidConfig(
                "domain extents must be positive".into(),
            ));
        }
        let pi = std::f64::consts::PI;
        let eigenvalues = (0..truncation * truncation)
            .map(|k| {
                let (i1, i2) = (k / truncation + 1, k % truncation + 1);
                let (a, b) = (i1 as f64, i2 as f64);
                let base = match spectrum {
                    Spectrum::Scaled => {
                        (a / (pi * length)).powi(2) + (b / (pi * final_time)).powi(2)
                    }
                    Spectrum::Dirichlet => {
                        (a * pi / length).powi(2) + (b * pi / final_time).powi(2)
                    }
                };
                base.powf(-alpha)
            })
            .collect();
        Ok(Self {
            truncation,
            alpha,
            length,
            final_time,
            normalization,
            spectrum,
            eigenvalues,
        })
    }

    /// Number of coefficients, `N²`.
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn spectrum(&self) -> Spectrum {
        self.spectrum
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    /// `(i₁, i₂)` of flat index `k`.
    pub fn frequencies(&self, k: usize) -> (usize, usize) {
        (k / self.truncation + 1, k % self.truncation + 1)
    }

    pub fn index(&self, i1: usize, i2: usize) -> usize {
        (i1 - 1) * self.truncation + (i2 - 1)
    }

    pub fn eigenvalue(&self, k: usize) -> f64 {
        self.eigenvalues[k]
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn normalization_constant(&self) -> f64 {
        let scale = match self.normalization {
            Normalization::Orthonormal => 2.0,
            Normalization::Unit => 1.0,
        };
        scale / (self.length * self.final_time).sqrt()
    }

    /// `φ_k(t, x)`.
    pub fn eval(&self, k: usize, t: f64, x: f64) -> f64 {
        let pi = std::f64::consts::PI;
        let (i1, i2) = self.frequencies(k);
        self.normalization_constant()
            * (i1 as f64 * pi * x / self.length).sin()
            * (i2 as f64 * pi * t / self.final_time).sin()
    }

    /// Prior pointwise variance of the truncated latent field, `Σ λ_k φ_k²`.
    pub fn pointwise_variance(&self, t: f64, x: f64) -> f64 {
        (0..self.len())
            .map(|k| self.eigenvalues[k] * self.eval(k, t, x).powi(2))
            .sum()
    }
}

/// KL basis tabulated on a grid lattice. Evaluation and its transpose use the
/// separable structure of the basis.
#[derive(Debug, Clone)]
pub struct KlField {
    basis: KlBasis,
    grid: SpaceTimeGrid,
    /// `c·sin(i₁πx_j/L)`, shape `N × (nx+2)`.
    space: Array2<f64>,
    /// `sin(i₂πt_n/T)`, shape `N × (nt+1)`.
    time: Array2<f64>,
}

impl KlField {
    pub fn new(basis: KlBasis, grid: SpaceTimeGrid) -> Self {
        let pi = std::f64::consts::PI;
        let n = basis.truncation();
        let c = basis.normalization_constant();
        let (nt1, nx2) = grid.lattice_shape();
        let space = Array2::from_shape_fn((n, nx2), |(i, j)| {
            if j == 0 || j == nx2 - 1 {
                0.0
            } else {
                c * ((i + 1) as f64 * pi * grid.x(j) / grid.length()).sin()
            }
        });
        let time = Array2::from_shape_fn((n, nt1), |(i, m)| {
            if m == 0 || m == nt1 - 1 {
                0.0
            } else {
                ((i + 1) as f64 * pi * grid.t(m) / grid.final_time()).sin()
            }
        });
        Self {
            basis,
            grid,
            space,
            time,
        }
    }

    pub fn basis(&self) -> &KlBasis {
        &self.basis
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    fn check_len(&self, xi: &[f64]) -> Result<()> {
        if xi.len() != self.basis.len() {
            return Err(Error::DimensionMismatch {
                expected: self.basis.len(),
                got: xi.len(),
            });
        }
        Ok(())
    }

    /// Latent field `Σ √λ_k ξ_k φ_k` on the lattice.
    pub fn field(&self, xi: &[f64]) -> Result<Array2<f64>> {
        self.check_len(xi)?;
        let n = self.basis.truncation();
        // coefficients indexed [i₂][i₁]
        let coeffs = Array2::from_shape_fn((n, n), |(i2, i1)| {
            let k = i1 * n + i2;
            self.basis.eigenvalue(k).sqrt() * xi[k]
        });
        Ok(self.time.t().dot(&coeffs).dot(&self.space))
    }

    /// Transpose of [`KlField::field`]: maps a lattice of derivatives with
    /// respect to nodal latent values to derivatives with respect to `ξ`.
    pub fn project(&self, lattice: &Array2<f64>) -> Result<Vec<f64>> {
        if lattice.dim() != self.grid.lattice_shape() {
            return Err(Error::DimensionMismatch {
                expected: self.grid.lattice_shape().0 * self.grid.lattice_shape().1,
                got: lattice.len(),
            });
        }
        let n = self.basis.truncation();
        let b = self.time.dot(lattice).dot(&self.space.t());
        Ok((0..n * n)
            .map(|k| {
                let (i1, i2) = (k / n, k % n);
                self.basis.eigenvalue(k).sqrt() * b[(i2, i1)]
            })
            .collect())
    }

    /// `√λ_k φ_k` on the lattice.
    pub fn mode(&self, k: usize) -> Array2<f64> {
        let n = self.basis.truncation();
        let (i1, i2) = (k / n, k % n);
        let scale = self.basis.eigenvalue(k).sqrt();
        let (nt1, nx2) = self.grid.lattice_shape();
        Array2::from_shape_fn((nt1, nx2), |(m, j)| {
            scale * self.time[(i2, m)] * self.space[(i1, j)]
        })
    }
}

/// Element-wise `exp` of a latent field.
///
/// Fails with [`Error::SourceOverflow`] at the first node whose exponential
/// would not be finite, and with [`Error::NonFinite`] on NaN input.
pub fn positive_source(latent: &Array2<f64>) -> Result<Array2<f64>> {
    for ((n, j), &v) in latent.indexed_iter() {
        if v.is_nan() {
            return Err(Error::NonFinite(format!(
                "latent source NaN at (n={n}, j={j})"
            )));
        }
        if v > MAX_LATENT {
            return Err(Error::SourceOverflow { value: v, n, j });
        }
    }
    Ok(latent.mapv(f64::exp))
}

/// The inferred unknown `(λ, D, ξ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub lambda: f64,
    pub diffusion: f64,
    pub xi: Vec<f64>,
}

impl ParameterVector {
    pub fn new(lambda: f64, diffusion: f64, xi: Vec<f64>) -> Self {
        Self {
            lambda,
            diffusion,
            xi,
        }
    }

    /// Total dimension `N² + 2`.
    pub fn dim(&self) -> usize {
        self.xi.len() + 2
    }

    /// Flat layout `[λ, D, ξ₀, ξ₁, …]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.lambda);
        v.push(self.diffusion);
        v.extend_from_slice(&self.xi);
        v
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: values.len(),
            });
        }
        Ok(Self {
            lambda: values[0],
            diffusion: values[1],
            xi: values[2..].to_vec(),
        })
    }

    pub fn xi_norm_sq(&self) -> f64 {
        self.xi.iter().map(|v| v * v).sum()
    }
}

/// Prior hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub lambda_max: f64,
    pub diffusion_max: f64,
    /// `N`, the number of KL modes per axis.
    pub truncation: usize,
    pub alpha: f64,
    pub normalization: Normalization,
    pub spectrum: Spectrum,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            lambda_max: 0.5,
            diffusion_max: 0.5,
            truncation: 10,
            alpha: 2.0,
            normalization: Normalization::Orthonormal,
            spectrum: Spectrum::Scaled,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_max.is_finite() && self.lambda_max > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda_max must be positive, got {}",
                self.lambda_max
            )));
        }
        if !(self.diffusion_max.is_finite() && self.diffusion_max > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "diffusion_max must be positive, got {}",
                self.diffusion_max
            )));
        }
        if self.truncation == 0 {
            return Err(Error::InvalidConfig("truncation must be at least 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn n_coefficients(&self) -> usize {
        self.truncation * self.truncation
    }

    pub fn basis(&self, length: f64, final_time: f64) -> Result<KlBasis> {
        self.validate()?;
        KlBasis::new(
            self.truncation,
            self.alpha,
            length,
            final_time,
            self.normalization,
            self.spectrum,
        )
    }

    pub fn reference(&self) -> ReferenceMeasure {
        ReferenceMeasure::from_prior(self)
    }

    pub fn in_support(&self, u: &ParameterVector) -> bool {
        (0.0..=self.lambda_max).contains(&u.lambda)
            && (0.0..=self.diffusion_max).contains(&u.diffusion)
    }
}

/// Gaussian reference `N(λ_ref, σ_λ²) ⊗ N(D_ref, σ_D²) ⊗ N(0, C)`, with the
/// rate moments matched to the uniform priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMeasure {
    pub lambda_ref: f64,
    pub lambda_std: f64,
    pub diffusion_ref: f64,
    pub diffusion_std: f64,
}

impl ReferenceMeasure {
    pub fn from_prior(prior: &PriorConfig) -> Self {
        let sqrt12 = 12f64.sqrt();
        Self {
            lambda_ref: prior.lambda_max / 2.0,
            lambda_std: prior.lambda_max / sqrt12,
            diffusion_ref: prior.diffusion_max / 2.0,
            diffusion_std: prior.diffusion_max / sqrt12,
        }
    }

    /// Coordinates in which the reference covariance is the identity.
    pub fn whiten(&self, u: &ParameterVector) -> Vec<f64> {
        let mut s = Vec::with_capacity(u.dim());
        s.push((u.lambda - self.lambda_ref) / self.lambda_std);
        s.push((u.diffusion - self.diffusion_ref) / self.diffusion_std);
        s.extend_from_slice(&u.xi);
        s
    }

    pub fn unwhiten(&self, s: &[f64]) -> ParameterVector {
        ParameterVector {
            lambda: self.lambda_ref + self.lambda_std * s[0],
            diffusion: self.diffusion_ref + self.diffusion_std * s[1],
            xi: s[2..].to_vec(),
        }
    }
}

/// Independent draw from the prior.
pub fn sample_prior<R: Rng + ?Sized>(prior: &PriorConfig, rng: &mut R) -> ParameterVector {
    let lambda = rng.random::<f64>() * prior.lambda_max;
    let diffusion = rng.random::<f64>() * prior.diffusion_max;
    let xi = (0..prior.n_coefficients())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    ParameterVector {
        lambda,
        diffusion,
        xi,
    }
}

/// `ln dμ₀/dμ_ref(u)`: finite on `[0,λ_m] × [0,D_m] × ℝ^{N²}`, `−∞` elsewhere.
/// The Gaussian factors of `ξ` coincide and contribute nothing.
pub fn log_prior_over_ref(prior: &PriorConfig, u: &ParameterVector) -> f64 {
    if !prior.in_support(u) {
        return f64::NEG_INFINITY;
    }
    let r = prior.reference();
    let two_pi = 2.0 * std::f64::consts::PI;
    (two_pi * r.lambda_std * r.diffusion_std / (prior.lambda_max * prior.diffusion_max)).ln()
        + (u.lambda - r.lambda_ref).powi(2) / (2.0 * r.lambda_std.powi(2))
        + (u.diffusion - r.diffusion_ref).powi(2) / (2.0 * r.diffusion_std.powi(2))
}
