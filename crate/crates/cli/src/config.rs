//! Run configuration, loaded from JSON with defaults for every field.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use parinv::map::OptimizerConfig;
use parinv::pde::{MassKind, TimeScheme};
use parinv::posterior::NoiseConfig;
use parinv::sampler::{KernelConfig, Protocol};
use parinv::{Execution, PriorConfig, SpaceTimeGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub length: f64,
    pub final_time: f64,
    /// Interior nodes.
    pub nx: usize,
    /// Time steps.
    pub nt: usize,
    pub mass: MassKind,
    pub scheme: TimeScheme,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            length: 100.0,
            final_time: 100.0,
            nx: 100,
            nt: 30,
            mass: MassKind::Lumped,
            scheme: TimeScheme::ImplicitEuler,
        }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<SpaceTimeGrid> {
        Ok(SpaceTimeGrid::new(
            self.length,
            self.final_time,
            self.nx,
            self.nt,
        )?)
    }
}

/// A KL mode `(i1, i2)` whose latent contribution peaks at `value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Peak {
    pub i1: usize,
    pub i2: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruthConfig {
    pub lambda: f64,
    pub diffusion: f64,
    /// Latent field as a sum of unit-peak modes; ignored when `xi` is given.
    pub peaks: Vec<Peak>,
    /// Explicit KL coefficients.
    pub xi: Option<Vec<f64>>,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            diffusion: 0.03,
            peaks: vec![
                Peak {
                    i1: 1,
                    i2: 1,
                    value: 1.5,
                },
                Peak {
                    i1: 2,
                    i2: 1,
                    value: 0.6,
                },
                Peak {
                    i1: 1,
                    i2: 2,
                    value: -0.4,
                },
            ],
            xi: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub truth: TruthConfig,
    /// Number of uniformly scattered observations when no layout is given.
    pub observations: usize,
    /// CSV with columns `t,x`; every row becomes one observation.
    pub layout: Option<PathBuf>,
    /// Noise standard deviation as a fraction of `max |G(truth)|`.
    pub noise_fraction: f64,
    /// Absolute noise variance; overrides `noise_fraction`.
    pub noise_variance: Option<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            truth: TruthConfig::default(),
            observations: 500,
            layout: None,
            noise_fraction: 0.05,
            noise_variance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    /// Known noise variance. When absent, `map` and `sample` read the
    /// estimate written by `estimate-noise`.
    pub variance: Option<f64>,
    pub estimate: NoiseConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SampleTarget {
    #[default]
    Posterior,
    /// Zero potential: the chain targets the prior. Used to check that a
    /// kernel leaves the reference measure invariant.
    Prior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub target: SampleTarget,
    pub kernel: KernelConfig,
    pub protocol: Protocol,
    /// Iterations between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            target: SampleTarget::Posterior,
            kernel: KernelConfig::default(),
            protocol: Protocol::default(),
            checkpoint_every: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseConfig {
    pub max_lag: usize,
    /// Mass of the equal-tailed credible intervals.
    pub credible_mass: f64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            max_lag: 100,
            credible_mass: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset CSV (`t,x,z`); defaults to `dataset.csv` in the output directory.
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub prior: PriorConfig,
    pub simulate: SimulateConfig,
    pub noise: NoiseSection,
    pub optimizer: OptimizerConfig,
    /// Random starts for the MAP estimate.
    pub starts: usize,
    pub sample: SampleConfig,
    pub diagnose: DiagnoseConfig,
    pub execution: Execution,
    pub seed: u64,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            prior: PriorConfig::default(),
            simulate: SimulateConfig::default(),
            noise: NoiseSection::default(),
            optimizer: OptimizerConfig::default(),
            starts: 3,
            sample: SampleConfig::default(),
            diagnose: DiagnoseConfig::default(),
            execution: Execution::Parallel,
            seed: 0,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Parse and validate. Relative paths are resolved against the directory
    /// of the config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        resolve(&mut config.simulate.layout);
        resolve(&mut config.paths.dataset);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.build()?;
        self.prior.validate()?;
        self.optimizer.validate()?;
        self.sample.kernel.validate()?;
        self.sample.protocol.validate()?;
        let truth = &self.simulate.truth;
        ensure!(
            (0.0..=self.prior.lambda_max).contains(&truth.lambda)
                && truth.diffusion > 0.0
                && truth.diffusion <= self.prior.diffusion_max,
            "truth rates ({}, {}) lie outside the prior box",
            truth.lambda,
            truth.diffusion
        );
        if let Some(xi) = &truth.xi {
            ensure!(
                xi.len() == self.prior.n_coefficients(),
                "truth has {} KL coefficients, the prior {}",
                xi.len(),
                self.prior.n_coefficients()
            );
        }
        for p in &truth.peaks {
            let n = self.prior.truncation;
            ensure!(
                (1..=n).contains(&p.i1) && (1..=n).contains(&p.i2),
                "peak mode ({}, {}) outside 1..={n}",
                p.i1,
                p.i2
            );
        }
        ensure!(
            self.simulate.noise_fraction >= 0.0 && self.simulate.noise_fraction.is_finite(),
            "noise_fraction must be non-negative"
        );
        if let Some(v) = self.simulate.noise_variance {
            ensure!(
                v >= 0.0 && v.is_finite(),
                "simulated noise variance must be non-negative"
            );
        }
        if self.simulate.layout.is_none() {
            ensure!(
                self.simulate.observations >= 1,
                "need at least one observation"
            );
        }
        if let Some(v) = self.noise.variance {
            ensure!(v > 0.0 && v.is_finite(), "noise variance must be positive");
        }
        ensure!(self.starts >= 1, "need at least one MAP start");
        ensure!(
            self.diagnose.credible_mass > 0.0 && self.diagnose.credible_mass < 1.0,
            "credible mass must lie in (0, 1)"
        );
        for path in [&self.simulate.layout, &self.paths.dataset]
            .into_iter()
            .flatten()
        {
            if !path.is_file() {
                bail!("referenced file {} does not exist", path.display());
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
