//! Forward, adjoint and tangent solvers for
//! `∂y/∂t + λ y − D ∂²y/∂x² = f*` on `]0,L[ × ]0,T]` with homogeneous initial
//! and Dirichlet data.
//!
//! Space is discretised with piecewise-linear finite elements on a uniform
//! mesh, time with a θ-scheme (implicit Euler by default). Each step solves
//!
//! ```text
//! (M + θ·dt·A) yⁿ⁺¹ = (M − (1−θ)·dt·A) yⁿ + dt·M_f (θ fⁿ⁺¹ + (1−θ) fⁿ),   A = λM + DK
//! ```
//!
//! where `M_f` is the mass matrix restricted to interior rows but acting on
//! all nodal source values. Lattices are `(nt+1) × (nx+2)` arrays indexed
//! `[time level, node]`; boundary columns and the initial row of a solution
//! are identically zero.
//!
//! The adjoint and tangent solvers are the exact transposes/linearisations of
//! the discrete scheme, so gradients assembled from them agree with finite
//! differences of the discrete forward map up to round-off.

use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform space-time mesh of `]0,L[ × ]0,T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceTimeGrid {
    length: f64,
    final_time: f64,
    nx: usize,
    nt: usize,
}

impl SpaceTimeGrid {
    /// `nx` interior nodes, `nt` time steps.
    pub fn new(length: f64, final_time: f64, nx: usize, nt: usize) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "length must be positive, got {length}"
            )));
        }
        if !(final_time.is_finite() && final_time > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "final time must be positive, got {final_time}"
            )));
        }
        if nx < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 interior nodes, got {nx}"
            )));
        }
        if nt < 1 {
            return Err(Error::InvalidConfig("need at least one time step".into()));
        }
        Ok(Self {
            length,
            final_time,
            nx,
            nt,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn final_time(&self) -> f64 {
        self.final_time
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn dx(&self) -> f64 {
        self.length / (self.nx + 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.final_time / self.nt as f64
    }

    /// Coordinate of node `j` in `0..=nx+1`.
    pub fn x(&self, j: usize) -> f64 {
        if j == self.nx + 1 {
            self.length
        } else {
            j as f64 * self.dx()
        }
    }

    /// Time of level `n` in `0..=nt`.
    pub fn t(&self, n: usize) -> f64 {
        if n == self.nt {
            self.final_time
        } else {
            n as f64 * self.dt()
        }
    }

    pub fn lattice_shape(&self) -> (usize, usize) {
        (self.nt + 1, self.nx + 2)
    }

    pub fn zeros(&self) -> Array2<f64> {
        Array2::zeros(self.lattice_shape())
    }

    /// Lattice filled with `f(t, x)`.
    pub fn lattice_from_fn(&self, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
        Array2::from_shape_fn(self.lattice_shape(), |(n, j)| f(self.t(n), self.x(j)))
    }

    pub fn contains(&self, t: f64, x: f64) -> bool {
        let tol_t = 1e-12 * self.final_time;
        let tol_x = 1e-12 * self.length;
        t >= -tol_t && t <= self.final_time + tol_t && x >= -tol_x && x <= self.length + tol_x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScheme {
    /// Backward Euler, θ = 1. Unconditionally stable and positivity preserving
    /// with a lumped mass matrix.
    #[default]
    ImplicitEuler,
    /// θ = 1/2. Second order in time, no positivity guarantee.
    CrankNicolson,
}

impl TimeScheme {
    pub fn theta(self) -> f64 {
        match self {
            TimeScheme::ImplicitEuler => 1.0,
            TimeScheme::CrankNicolson => 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassKind {
    /// Row-sum lumping, `M = dx·I`.
    #[default]
    Lumped,
    Consistent,
}

/// Symmetric tridiagonal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTridiagonal {
    diag: Vec<f64>,
    off: Vec<f64>,
}

impl SymTridiagonal {
    pub fn new(diag: Vec<f64>, off: Vec<f64>) -> Self {
        assert_eq!(
            off.len() + 1,
            diag.len(),
            "off-diagonal must have n-1 entries"
        );
        Self { diag, off }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn off(&self) -> &[f64] {
        &self.off
    }

    /// `a·A + b·B`.
    pub fn combine(a: f64, lhs: &Self, b: f64, rhs: &Self) -> Self {
        let diag = lhs
            .diag
            .iter()
            .zip(&rhs.diag)
            .map(|(x, y)| a * x + b * y)
            .collect();
        let off = lhs
            .off
            .iter()
            .zip(&rhs.off)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Self { diag, off }
    }

    /// `out += scale · A x`.
    pub fn apply_add(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        let n = self.dim();
        debug_assert!(x.len() == n && out.len() == n);
        for i in 0..n {
            let mut v = self.diag[i] * x[i];
            if i > 0 {
                v += self.off[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                v += self.off[i] * x[i + 1];
            }
            out[i] += scale * v;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.apply_add(x, 1.0, &mut out);
        out
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let ax = self.apply(x);
        x.iter().zip(&ax).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.dim();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            if i + 1 < n {
                m[(i, i + 1)] = self.off[i];
                m[(i + 1, i)] = self.off[i];
            }
        }
        m
    }

    /// `LDLᵀ` factorisation (Thomas algorithm). Fails unless every pivot is
    /// positive, i.e. unless the matrix is positive definite.
    pub fn factorize(&self) -> Result<TridiagonalFactor> {
        let n = self.dim();
        let mut d = vec![0.0; n];
        let mut l = vec![0.0; n.saturating_sub(1)];
        d[0] = self.diag[0];
        for i in 0..n - 1 {
            if !(d[i] > 0.0) {
                return Err(Error::NonFinite(format!(
                    "non-positive pivot {} at row {i}",
                    d[i]
                )));
            }
            l[i] = self.off[i] / d[i];
            d[i + 1] = self.diag[i + 1] - l[i] * self.off[i];
        }
        if !(d[n - 1] > 0.0) {
            return Err(Error::NonFinite(format!(
                "non-positive pivot {} at row {}",
                d[n - 1],
                n - 1
            )));
        }
        Ok(TridiagonalFactor { d, l })
    }
}

#[derive(Debug, Clone)]
pub struct TridiagonalFactor {
    d: Vec<f64>,
    l: Vec<f64>,
}

impl TridiagonalFactor {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.d.len();
        for i in 1..n {
            b[i] -= self.l[i - 1] * b[i - 1];
        }
        for i in 0..n {
            b[i] /= self.d[i];
        }
        for i in (0..n - 1).rev() {
            b[i] -= self.l[i] * b[i + 1];
        }
    }
}

/// P1 mass and stiffness matrices over the interior nodes.
#[derive(Debug, Clone)]
pub struct FemOperators {
    pub mass: SymTridiagonal,
    pub stiffness: SymTridiagonal,
    kind: MassKind,
    dx: f64,
}

/// Assemble the mass (lumped or consistent) and stiffness matrices.
pub fn assemble_operators(grid: &SpaceTimeGrid, kind: MassKind) -> FemOperators {
    let n = grid.nx();
    let dx = grid.dx();
    let mass = match kind {
        MassKind::Lumped => SymTridiagonal::new(vec![dx; n], vec![0.0; n - 1]),
        MassKind::Consistent => SymTridiagonal::new(vec![4.0 * dx / 6.0; n], vec![dx / 6.0; n - 1]),
    };
    let stiffness = SymTridiagonal::new(vec![2.0 / dx; n], vec![-1.0 / dx; n - 1]);
    FemOperators {
        mass,
        stiffness,
        kind,
        dx,
    }
}

impl FemOperators {
    pub fn mass_kind(&self) -> MassKind {
        self.kind
    }

    /// `out += scale · M_f f` where `f` holds all `nx+2` nodal values and
    /// `out` the `nx` interior rows.
    pub fn load_add(&self, f: ArrayView1<f64>, scale: f64, out: &mut [f64]) {
        let n = out.len();
        match self.kind {
            MassKind::Lumped => {
                let c = scale * self.dx;
                for i in 0..n {
                    out[i] += c * f[i + 1];
                }
            }
            MassKind::Consistent => {
                let c = scale * self.dx / 6.0;
                for i in 0..n {
                    out[i] += c * (f[i] + 4.0 * f[i + 1] + f[i + 2]);
                }
            }
        }
    }

    /// `out += scale · M_fᵀ p`, the transpose of [`FemOperators::load_add`].
    pub fn load_transpose_add(&self, p: &[f64], scale: f64, mut out: ArrayViewMut1<f64>) {
        match self.kind {
            MassKind::Lumped => {
                let c = scale * self.dx;
                for (i, &pi) in p.iter().enumerate() {
                    out[i + 1] += c * pi;
                }
            }
            MassKind::Consistent => {
                let c = scale * self.dx / 6.0;
                for (i, &pi) in p.iter().enumerate() {
                    out[i] += c * pi;
                    out[i + 1] += 4.0 * c * pi;
                    out[i + 2] += c * pi;
                }
            }
        }
    }
}

/// Constant decay and diffusion rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdeCoefficients {
    pub lambda: f64,
    pub diffusion: f64,
}

impl PdeCoefficients {
    pub fn new(lambda: f64, diffusion: f64) -> Self {
        Self { lambda, diffusion }
    }

    fn check(&self) -> Result<()> {
        if !(self.diffusion > 0.0) {
            return Err(Error::NonPositiveDiffusion(self.diffusion));
        }
        if !self.lambda.is_finite() || !self.diffusion.is_finite() {
            return Err(Error::NonFinite(format!("coefficients {self:?}")));
        }
        Ok(())
    }
}

/// Perturbation of `(λ, D, f*)` for the tangent solver.
#[derive(Debug, Clone, Copy)]
pub struct TangentDirection<'a> {
    pub lambda: f64,
    pub diffusion: f64,
    /// Lattice perturbation of the positive source; `None` means zero.
    pub source: Option<ArrayView2<'a, f64>>,
}

/// Adjoint sensitivities of a linear functional of the discrete solution.
#[derive(Debug, Clone)]
pub struct Sensitivity {
    pub lambda: f64,
    pub diffusion: f64,
    /// Derivative with respect to every nodal source value.
    pub source: Array2<f64>,
}

struct Stepper {
    lhs: TridiagonalFactor,
    operator: SymTridiagonal,
    theta: f64,
    dt: f64,
}

impl Stepper {
    /// `out = (M − (1−θ)·dt·A) y`.
    fn explicit(&self, mass: &SymTridiagonal, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        mass.apply_add(y, 1.0, out);
        if self.theta < 1.0 {
            self.operator
                .apply_add(y, -(1.0 - self.theta) * self.dt, out);
        }
    }
}

/// Discrete solution operator for a fixed grid, mass treatment and time scheme.
#[derive(Debug, Clone)]
pub struct ForwardSolver {
    grid: SpaceTimeGrid,
    ops: FemOperators,
    scheme: TimeScheme,
}

impl ForwardSolver {
    pub fn new(grid: SpaceTimeGrid, mass: MassKind, scheme: TimeScheme) -> Self {
        let ops = assemble_operators(&grid, mass);
        Self { grid, ops, scheme }
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn operators(&self) -> &FemOperators {
        &self.ops
    }

    pub fn scheme(&self) -> TimeScheme {
        self.scheme
    }

    fn stepper(&self, coeffs: &PdeCoefficients) -> Result<Stepper> {
        coeffs.check()?;
        let theta = self.scheme.theta();
        let dt = self.grid.dt();
        let operator = SymTridiagonal::combine(
            coeffs.lambda,
            &self.ops.mass,
            coeffs.diffusion,
            &self.ops.stiffness,
        );
        let lhs =
            SymTridiagonal::combine(1.0, &self.ops.mass, theta * dt, &operator).factorize()?;
        Ok(Stepper {
            lhs,
            operator,
            theta,
            dt,
        })
    }

    /// March the scheme from `y⁰ = 0`; `source(n, rhs)` adds the load of the
    /// step from level `n` to `n+1`.
    fn march(&self, stepper: &Stepper, mut source: impl FnMut(usize, &mut [f64])) -> Array2<f64> {
        let nx = self.grid.nx();
        let mut y = self.grid.zeros();
        let mut prev = vec![0.0; nx];
        let mut rhs = vec![0.0; nx];
        for n in 0..self.grid.nt() {
            stepper.explicit(&self.ops.mass, &prev, &mut rhs);
            source(n, &mut rhs);
            stepper.lhs.solve_in_place(&mut rhs);
            y.slice_mut(s![n + 1, 1..=nx])
                .iter_mut()
                .zip(&rhs)
                .for_each(|(dst, v)| *dst = *v);
            std::mem::swap(&mut prev, &mut rhs);
        }
        y
    }

    /// Solve the forward problem for a nodal source lattice.
    pub fn solve_forward(
        &self,
        coeffs: &PdeCoefficients,
        source: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.check_lattice(source)?;
        let stepper = self.stepper(coeffs)?;
        let (theta, dt) = (stepper.theta, stepper.dt);
        let ops = &self.ops;
        Ok(self.march(&stepper, |n, rhs| {
            ops.load_add(source.row(n + 1), theta * dt, rhs);
            if theta < 1.0 {
                ops.load_add(source.row(n), (1.0 - theta) * dt, rhs);
            }
        }))
    }

    /// Linearised solve around `base = solve_forward(coeffs, ·)`.
    pub fn solve_tangent(
        &self,
        coeffs: &PdeCoefficients,
        base: &Array2<f64>,
        direction: TangentDirection<'_>,
    ) -> Result<Array2<f64>> {
        self.check_lattice(base)?;
        if let Some(ds) = direction.source {
            if ds.dim() != self.grid.lattice_shape() {
                return Err(Error::DimensionMismatch {
                    expected: self.grid.lattice_shape().0 * self.grid.lattice_shape().1,
                    got: ds.len(),
                });
            }
        }
        let stepper = self.stepper(coeffs)?;
        let (theta, dt) = (stepper.theta, stepper.dt);
        let nx = self.grid.nx();
        let ops = &self.ops;
        let d_operator = SymTridiagonal::combine(
            direction.lambda,
            &ops.mass,
            direction.diffusion,
            &ops.stiffness,
        );
        let has_rate = direction.lambda != 0.0 || direction.diffusion != 0.0;
        Ok(self.march(&stepper, |n, rhs| {
            if has_rate {
                let next = base.slice(s![n + 1, 1..=nx]);
                d_operator.apply_add(
                    next.as_slice().expect("row-major lattice"),
                    -theta * dt,
                    rhs,
                );
                if theta < 1.0 {
                    let cur = base.slice(s![n, 1..=nx]);
                    d_operator.apply_add(
                        cur.as_slice().expect("row-major lattice"),
                        -(1.0 - theta) * dt,
                        rhs,
                    );
                }
            }
            if let Some(ds) = direction.source {
                ops.load_add(ds.row(n + 1), theta * dt, rhs);
                if theta < 1.0 {
                    ops.load_add(ds.row(n), (1.0 - theta) * dt, rhs);
                }
            }
        }))
    }

    /// Backward solve of the discrete adjoint for a functional whose
    /// derivative with respect to the nodal solution is `load` (a lattice;
    /// boundary columns and the initial row are ignored since the solution is
    /// fixed there).
    pub fn solve_adjoint(
        &self,
        coeffs: &PdeCoefficients,
        load: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.check_lattice(load)?;
        let stepper = self.stepper(coeffs)?;
        let nx = self.grid.nx();
        let mut p = self.grid.zeros();
        let mut next = vec![0.0; nx];
        let mut rhs = vec![0.0; nx];
        for n in (1..=self.grid.nt()).rev() {
            stepper.explicit(&self.ops.mass, &next, &mut rhs);
            rhs.iter_mut()
                .zip(load.slice(s![n, 1..=nx]))
                .for_each(|(r, g)| *r += g);
            stepper.lhs.solve_in_place(&mut rhs);
            p.slice_mut(s![n, 1..=nx])
                .iter_mut()
                .zip(&rhs)
                .for_each(|(dst, v)| *dst = *v);
            std::mem::swap(&mut next, &mut rhs);
        }
        Ok(p)
    }

    /// Adjoint solve loaded by observation weights, distributed onto nodes by
    /// the transpose of the observation interpolation.
    pub fn solve_adjoint_observed(
        &self,
        coeffs: &PdeCoefficients,
        obs: &ObservationOperator,
        weights: &[f64],
    ) -> Result<Array2<f64>> {
        let mut load = self.grid.zeros();
        obs.scatter_add(weights, &mut load)?;
        self.solve_adjoint(coeffs, &load)
    }

    /// Derivatives of the functional behind the adjoint `p` with respect to
    /// `λ`, `D` and every nodal source value, given the forward solution `y`.
    pub fn sensitivities(&self, y: &Array2<f64>, p: &Array2<f64>) -> Sensitivity {
        let nx = self.grid.nx();
        let nt = self.grid.nt();
        let theta = self.scheme.theta();
        let dt = self.grid.dt();
        let mut d_lambda = 0.0;
        let mut d_diffusion = 0.0;
        let mut source = self.grid.zeros();
        let mut blend = vec![0.0; nx];
        for n in 1..=nt {
            let pn = p.slice(s![n, 1..=nx]);
            let pn = pn.as_slice().expect("row-major lattice");
            for (i, b) in blend.iter_mut().enumerate() {
                *b = theta * y[(n, i + 1)] + (1.0 - theta) * y[(n - 1, i + 1)];
            }
            let m_blend = self.ops.mass.apply(&blend);
            let k_blend = self.ops.stiffness.apply(&blend);
            d_lambda -= dt * dot(pn, &m_blend);
            d_diffusion -= dt * dot(pn, &k_blend);
            self.ops
                .load_transpose_add(pn, theta * dt, source.row_mut(n));
            if theta < 1.0 {
                self.ops
                    .load_transpose_add(pn, (1.0 - theta) * dt, source.row_mut(n - 1));
            }
        }
        Sensitivity {
            lambda: d_lambda,
            diffusion: d_diffusion,
            source,
        }
    }

    /// Discrete `L²(0,T; H¹₀)` seminorm, `(Σₙ dt·yⁿᵀ K yⁿ)^½`.
    pub fn energy_norm(&self, y: &Array2<f64>) -> f64 {
        self.time_sum(y, &self.ops.stiffness).sqrt()
    }

    /// Discrete `L²(0,T; L²)` norm, `(Σₙ dt·yⁿᵀ M yⁿ)^½` over interior nodes.
    pub fn l2_norm(&self, y: &Array2<f64>) -> f64 {
        self.time_sum(y, &self.ops.mass).sqrt()
    }

    fn time_sum(&self, y: &Array2<f64>, op: &SymTridiagonal) -> f64 {
        let nx = self.grid.nx();
        (1..=self.grid.nt())
            .map(|n| {
                let row = y.slice(s![n, 1..=nx]);
                self.grid.dt() * op.quadratic_form(row.as_slice().expect("row-major lattice"))
            })
            .sum()
    }

    fn check_lattice(&self, a: &Array2<f64>) -> Result<()> {
        let shape = self.grid.lattice_shape();
        if a.dim() != shape {
            return Err(Error::DimensionMismatch {
                expected: shape.0 * shape.1,
                got: a.len(),
            });
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Stencil {
    n: usize,
    j: usize,
    wt: f64,
    wx: f64,
}

impl Stencil {
    fn entries(&self) -> [(usize, usize, f64); 4] {
        let Stencil { n, j, wt, wx } = *self;
        [
            (n, j, (1.0 - wt) * (1.0 - wx)),
            (n, j + 1, (1.0 - wt) * wx),
            (n + 1, j, wt * (1.0 - wx)),
            (n + 1, j + 1, wt * wx),
        ]
    }
}

/// Round lattice coordinates that miss a node only by round-off, so points
/// given as node coordinates touch exactly one level and column.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Point evaluation of lattice functions at `(t, x)` pairs: piecewise linear
/// in space and linear in time between levels.
#[derive(Debug, Clone)]
pub struct ObservationOperator {
    stencils: Vec<Stencil>,
    shape: (usize, usize),
}

impl ObservationOperator {
    pub fn new(grid: &SpaceTimeGrid, points: &[(f64, f64)]) -> Result<Self> {
        let dt = grid.dt();
        let dx = grid.dx();
        let stencils = points
            .iter()
            .map(|&(t, x)| {
                if !(t.is_finite() && x.is_finite() && grid.contains(t, x)) {
                    return Err(Error::OutOfDomain {
                        t,
                        x,
                        final_time: grid.final_time(),
                        length: grid.length(),
                    });
                }
                let tt = snap((t / dt).clamp(0.0, grid.nt() as f64));
                let xx = snap((x / dx).clamp(0.0, (grid.nx() + 1) as f64));
                let n = (tt.floor() as usize).min(grid.nt() - 1);
                let j = (xx.floor() as usize).min(grid.nx());
                Ok(Stencil {
                    n,
                    j,
                    wt: tt - n as f64,
                    wx: xx - j as f64,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stencils,
            shape: grid.lattice_shape(),
        })
    }

    pub fn len(&self) -> usize {
        self.stencils.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stencils.is_empty()
    }

    /// Interpolate a lattice at every observation point.
    pub fn apply(&self, lattice: &Array2<f64>) -> Vec<f64> {
        assert_eq!(lattice.dim(), self.shape, "lattice shape mismatch");
        self.stencils
            .iter()
            .map(|s| {
                s.entries()
                    .iter()
                    .map(|&(n, j, w)| w * lattice[(n, j)])
                    .sum()
            })
            .collect()
    }

    /// `lattice += Oᵀ weights`.
    pub fn scatter_add(&self, weights: &[f64], lattice: &mut Array2<f64>) -> Result<()> {
        if weights.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: weights.len(),
            });
        }
        if lattice.dim() != self.shape {
            return Err(Error::DimensionMismatch {
                expected: self.shape.0 * self.shape.1,
                got: lattice.len(),
            });
        }
        for (s, &w) in self.stencils.iter().zip(weights) {
            for (n, j, c) in s.entries() {
                lattice[(n, j)] += c * w;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_grid(nx: usize, nt: usize) -> SpaceTimeGrid {
        SpaceTimeGrid::new(1.0, 1.0, nx, nt).unwrap()
    }

    #[test]
    fn grid_spacing() {
        let g = SpaceTimeGrid::new(100.0, 100.0, 100, 30).unwrap();
        assert!((g.dx() - 100.0 / 101.0).abs() < 1e-15);
        assert!((g.dt() - 100.0 / 30.0).abs() < 1e-15);
        assert!((g.dx() * 101.0 - 100.0).abs() < 1e-12);
        let g = SpaceTimeGrid::new(1.0, 1.0, 2, 1).unwrap();
        assert!((g.dx() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(g.dt(), 1.0);
        assert!(SpaceTimeGrid::new(100.0, 100.0, 100, 0).is_err());
        assert!(SpaceTimeGrid::new(100.0, 100.0, 1, 3).is_err());
        assert!(SpaceTimeGrid::new(0.0, 100.0, 4, 3).is_err());
        assert!(SpaceTimeGrid::new(1.0, -1.0, 4, 3).is_err());
    }

    #[test]
    fn operator_stencils() {
        let g = unit_grid(6, 2);
        let ops = assemble_operators(&g, MassKind::Lumped);
        assert!(ops.mass.diag().iter().all(|&d| d == g.dx()));
        assert!(ops.mass.off().iter().all(|&d| d == 0.0));
        assert!(ops
            .stiffness
            .diag()
            .iter()
            .all(|&d| (d - 2.0 / g.dx()).abs() < 1e-12));
        assert!(ops
            .stiffness
            .off()
            .iter()
            .all(|&d| (d + 1.0 / g.dx()).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!(ops.stiffness.quadratic_form(&v) >= 0.0);
            assert!(ops.mass.quadratic_form(&v) > 0.0);
        }
        let cons = assemble_operators(&g, MassKind::Consistent);
        let m = cons.mass.to_dense();
        assert!(m.clone().cholesky().is_some());
        assert_eq!(m, m.transpose());
    }

    #[test]
    fn thomas_matches_dense() {
        let a = SymTridiagonal::new(vec![4.0, 5.0, 6.0, 3.0], vec![1.0, -2.0, 0.5]);
        let b = vec![1.0, 2.0, -1.0, 0.25];
        let mut x = b.clone();
        a.factorize().unwrap().solve_in_place(&mut x);
        let back = a.apply(&x);
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).abs() < 1e-13);
        }
        let indefinite = SymTridiagonal::new(vec![1.0, -1.0], vec![0.0]);
        assert!(indefinite.factorize().is_err());
    }

    #[test]
    fn zero_source_gives_zero_solution() {
        let g = unit_grid(10, 5);
        let solver = ForwardSolver::new(g, MassKind::Lumped, TimeScheme::ImplicitEuler);
        let y = solver
            .solve_forward(&PdeCoefficients::new(0.3, 0.1), &g.zeros())
            .unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_non_positive_diffusion() {
        let g = unit_grid(4, 2);
        let solver = ForwardSolver::new(g, MassKind::Lumped, TimeScheme::ImplicitEuler);
        let f = g.lattice_from_fn(|_, _| 1.0);
        for d in [0.0, -1.0, f64::NAN] {
            let err = solver
                .solve_forward(&PdeCoefficients::new(0.0, d), &f)
                .unwrap_err();
            assert!(matches!(err, Error::NonPositiveDiffusion(_)));
        }
    }

    #[test]
    fn solution_respects_initial_and_boundary_data() {
        let g = unit_grid(8, 4);
        let solver = ForwardSolver::new(g, MassKind::Consistent, TimeScheme::CrankNicolson);
        let f = g.lattice_from_fn(|t, x| 1.0 + t * x);
        let y = solver
            .solve_forward(&PdeCoefficients::new(0.2, 0.5), &f)
            .unwrap();
        assert!(y.row(0).iter().all(|&v| v == 0.0));
        assert!(y.column(0).iter().all(|&v| v == 0.0));
        assert!(y.column(9).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn observation_interpolation() {
        let g = unit_grid(3, 2);
        let mut lat = g.zeros();
        lat[(1, 1)] = 0.0;
        lat[(1, 2)] = 2.0;
        let obs =
            ObservationOperator::new(&g, &[(0.5, 1.5 * g.dx()), (0.5, 2.0 * g.dx())]).unwrap();
        let v = obs.apply(&lat);
        assert!((v[0] - 1.0).abs() < 1e-14);
        assert!((v[1] - 2.0).abs() < 1e-14);
        assert_eq!(obs.apply(&g.zeros()), vec![0.0, 0.0]);

        let corner = ObservationOperator::new(&g, &[(1.0, 1.0), (0.0, 0.0)]).unwrap();
        let mut lat = g.zeros();
        lat[(2, 4)] = 7.0;
        assert_eq!(corner.apply(&lat), vec![7.0, 0.0]);

        assert!(ObservationOperator::new(&g, &[(1.1, 0.5)]).is_err());
        assert!(ObservationOperator::new(&g, &[(0.5, -0.1)]).is_err());
    }

    #[test]
    fn adjoint_zero_load_and_causality() {
        let g = unit_grid(6, 5);
        let solver = ForwardSolver::new(g, MassKind::Lumped, TimeScheme::ImplicitEuler);
        let c = PdeCoefficients::new(0.1, 0.2);
        let p = solver.solve_adjoint(&c, &g.zeros()).unwrap();
        assert!(p.iter().all(|&v| v == 0.0));

        let obs = ObservationOperator::new(&g, &[(g.t(3), 0.5)]).unwrap();
        let p = solver.solve_adjoint_observed(&c, &obs, &[1.0]).unwrap();
        for n in 4..=5 {
            assert!(p.row(n).iter().all(|&v| v == 0.0), "row {n} should vanish");
        }
        assert!(p.row(3).iter().any(|&v| v != 0.0));
        assert!(p.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn tangent_in_source_only_is_forward_solve() {
        let g = unit_grid(7, 6);
        let solver = ForwardSolver::new(g, MassKind::Lumped, TimeScheme::ImplicitEuler);
        let c = PdeCoefficients::new(0.4, 0.05);
        let f = g.lattice_from_fn(|t, x| (3.0 * x + t).sin() + 2.0);
        let df = g.lattice_from_fn(|t, x| x * (1.0 - x) * t);
        let y = solver.solve_forward(&c, &f).unwrap();
        let zero = solver
            .solve_tangent(
                &c,
                &y,
                TangentDirection {
                    lambda: 0.0,
                    diffusion: 0.0,
                    source: None,
                },
            )
            .unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let tan = solver
            .solve_tangent(
                &c,
                &y,
                TangentDirection {
                    lambda: 0.0,
                    diffusion: 0.0,
                    source: Some(df.view()),
                },
            )
            .unwrap();
        let direct = solver.solve_forward(&c, &df).unwrap();
        for (a, b) in tan.iter().zip(direct.iter()) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + b.abs()));
        }
    }
}
