//! The five pipeline verbs. Each reads its inputs from and writes its
//! artifacts to a single output directory.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use parinv::diagnostics::{acf, credible_interval, summarize, Histogram};
use parinv::map::{multi_start, OptimResult};
use parinv::posterior::{estimate_noise, random_points, synthesize, NoiseIterate};
use parinv::sampler::{Chain, Checkpoint, PosteriorTarget, PriorTarget, Sampler, Target};
use parinv::{Dataset, Error, ForwardModel, ParameterVector, Posterior};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig, SampleTarget, TruthConfig};
use crate::io;

/// Artifact file names.
pub mod files {
    pub const RESOLVED_CONFIG: &str = "config.resolved.json";
    pub const DATASET: &str = "dataset.csv";
    pub const TRUTH: &str = "truth.json";
    pub const NOISE: &str = "noise.json";
    pub const MAP: &str = "map.json";
    pub const SOURCE_MAP: &str = "source_map.csv";
    pub const SOLUTION_MAP: &str = "solution_map.csv";
    pub const CHAIN: &str = "chain.json";
    pub const TRACE: &str = "trace.csv";
    pub const CHECKPOINT: &str = "checkpoint.json";
    pub const ACF: &str = "acf.csv";
    pub const SUMMARY: &str = "summary.json";
    pub const SOURCE_MEAN: &str = "source_mean.csv";
    pub const SOURCE_VARIANCE: &str = "source_variance.csv";
    pub const SOLUTION_MEAN: &str = "solution_mean.csv";
    pub const SOLUTION_VARIANCE: &str = "solution_variance.csv";
}

/// Independent random stream per verb, so that rerunning one stage does not
/// shift the draws of another.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Simulate = 1,
    Noise = 2,
    Map = 3,
    Sample = 4,
}

fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Run {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        let out = out.into();
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self { config, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_resolved(&self) -> Result<()> {
        io::write_json(&self.path(files::RESOLVED_CONFIG), &self.config)
    }

    fn model(&self) -> Result<ForwardModel> {
        let c = &self.config;
        let grid = c.grid.build()?;
        let basis = c.prior.basis(grid.length(), grid.final_time())?;
        Ok(ForwardModel::new(grid, basis, c.grid.mass, c.grid.scheme).with_execution(c.execution))
    }

    fn dataset_path(&self) -> PathBuf {
        self.config
            .paths
            .dataset
            .clone()
            .unwrap_or_else(|| self.path(files::DATASET))
    }

    /// Posterior for the stored dataset at the given noise variance.
    fn posterior(&self, noise_variance: f64) -> Result<Posterior> {
        let path = self.dataset_path();
        ensure!(
            path.is_file(),
            "no dataset at {}; run `simulate` or set paths.dataset",
            path.display()
        );
        let data = Dataset::new(io::read_dataset(&path)?, noise_variance)?;
        Ok(Posterior::new(self.model()?, self.config.prior, data)?)
    }

    /// Configured noise variance, else the one estimated by `estimate-noise`.
    fn noise_variance(&self) -> Result<f64> {
        if let Some(v) = self.config.noise.variance {
            return Ok(v);
        }
        let path = self.path(files::NOISE);
        ensure!(
            path.is_file(),
            "noise variance unknown: set noise.variance or run `estimate-noise` first"
        );
        Ok(io::read_json::<NoiseReport>(&path)?.noise_variance)
    }

    /// Identifies the chain inputs: configuration, dataset bytes and noise level.
    fn fingerprint(&self, noise_variance: Option<f64>) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.config.fingerprint());
        if let Some(v) = noise_variance {
            let data = std::fs::read(self.dataset_path())?;
            h.update(&data);
            h.update(v.to_le_bytes());
        }
        Ok(hex(&h.finalize()))
    }
}

pub fn truth_parameter(model: &ForwardModel, truth: &TruthConfig) -> ParameterVector {
    let xi = truth.xi.clone().unwrap_or_else(|| {
        let basis = model.field().basis();
        let mut xi = vec![0.0; basis.len()];
        for p in &truth.peaks {
            let k = basis.index(p.i1, p.i2);
            xi[k] += p.value / (basis.eigenvalue(k).sqrt() * basis.normalization_constant());
        }
        xi
    });
    ParameterVector::new(truth.lambda, truth.diffusion, xi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthReport {
    pub truth: ParameterVector,
    pub observations: usize,
    /// `max |G(truth)|` over the observation points.
    pub signal_amplitude: f64,
    pub noise_variance: f64,
}

pub fn simulate(run: &Run) -> Result<TruthReport> {
    run.write_resolved()?;
    let c = &run.config;
    let model = run.model()?;
    let truth = truth_parameter(&model, &c.simulate.truth);
    let mut rng = stream_rng(c.seed, Stream::Simulate);
    let points = match &c.simulate.layout {
        Some(path) => io::read_layout(path)?,
        None => random_points(model.grid(), c.simulate.observations, &mut rng),
    };
    let clean = synthesize(&model, &truth, &points, 0.0, &mut rng)?;
    let signal_amplitude = clean.iter().map(|o| o.z.abs()).fold(0.0, f64::max);
    let noise_variance = c
        .simulate
        .noise_variance
        .unwrap_or_else(|| (c.simulate.noise_fraction * signal_amplitude).powi(2));
    let observations = if noise_variance > 0.0 {
        synthesize(&model, &truth, &points, noise_variance.sqrt(), &mut rng)?
    } else {
        clean
    };
    io::write_dataset(&run.path(files::DATASET), &observations)?;
    let report = TruthReport {
        truth,
        observations: observations.len(),
        signal_amplitude,
        noise_variance,
    };
    io::write_json(&run.path(files::TRUTH), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub u_map: ParameterVector,
    pub objective: f64,
    pub phi: f64,
    /// `‖z − G(u_map)‖²/n`.
    pub residual_mean_square: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    pub message: String,
}

impl MapSummary {
    fn new(result: &OptimResult, noise_variance: f64, n: usize) -> Self {
        Self {
            u_map: result.u_map.clone(),
            objective: result.objective,
            phi: result.phi,
            residual_mean_square: 2.0 * noise_variance * result.phi / n as f64,
            iterations: result.iterations,
            converged: result.converged,
            gradient_norm: result.gradient_norm,
            message: result.message.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub noise_variance: f64,
    pub degenerate: bool,
    pub observations: usize,
    pub history: Vec<NoiseIterate>,
    pub map: MapSummary,
}

pub fn estimate_noise_cmd(run: &Run) -> Result<NoiseReport> {
    run.write_resolved()?;
    let c = &run.config;
    let posterior = run.posterior(1.0)?;
    let n = posterior.data().len();
    ensure!(
        n >= 2,
        "noise estimation needs at least 2 observations, the dataset has {n}"
    );
    let mut noise = c.noise.estimate;
    noise.starts = noise.starts.max(1);
    let mut rng = stream_rng(c.seed, Stream::Noise);
    let estimate = estimate_noise(&posterior, &noise, &c.optimizer, &mut rng)?;
    let last = estimate.history.last().map_or(1.0, |h| h.noise_variance);
    let report = NoiseReport {
        noise_variance: estimate.noise_variance,
        degenerate: estimate.degenerate,
        observations: n,
        map: MapSummary::new(&estimate.map, last, n),
        history: estimate.history,
    };
    io::write_json(&run.path(files::NOISE), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub noise_variance: f64,
    pub observations: usize,
    pub best_start: usize,
    /// Final objective of every start; `null` for failed starts.
    pub start_objectives: Vec<Option<f64>>,
    pub map: MapSummary,
}

pub fn map(run: &Run) -> Result<MapReport> {
    run.write_resolved()?;
    let c = &run.config;
    let noise_variance = run.noise_variance()?;
    let posterior = run.posterior(noise_variance)?;
    let mut rng = stream_rng(c.seed, Stream::Map);
    let result = multi_start(&posterior, &c.optimizer, c.starts, &mut rng)?;
    let state = posterior.model().solve(&result.best.u_map)?;
    let grid = posterior.model().grid();
    io::write_lattice(&run.path(files::SOURCE_MAP), grid, &state.source)?;
    io::write_lattice(&run.path(files::SOLUTION_MAP), grid, &state.solution)?;
    let report = MapReport {
        noise_variance,
        observations: posterior.data().len(),
        best_start: result.best_index,
        start_objectives: result
            .objectives
            .iter()
            .map(|&o| o.is_finite().then_some(o))
            .collect(),
        map: MapSummary::new(&result.best, noise_variance, posterior.data().len()),
    };
    io::write_json(&run.path(files::MAP), &report)?;
    Ok(report)
}

/// Run or resume the chain, checkpointing as configured. With `stop_after`
/// the chain pauses at that iteration, writes a checkpoint and returns `None`.
pub fn sample(
    run: &Run,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<Option<Chain>> {
    run.write_resolved()?;
    let c = &run.config;
    match c.sample.target {
        SampleTarget::Posterior => {
            let noise_variance = run.noise_variance()?;
            let posterior = run.posterior(noise_variance)?;
            let init =
                read_init(run).with_context(|| "the chain starts at the MAP; run `map` first")?;
            let target = PosteriorTarget::new(&posterior);
            drive(
                run,
                &target,
                &init,
                resume,
                stop_after,
                run.fingerprint(Some(noise_variance))?,
            )
        }
        SampleTarget::Prior => {
            let init = read_init(run).unwrap_or_else(|_| {
                ParameterVector::new(
                    0.5 * c.prior.lambda_max,
                    0.5 * c.prior.diffusion_max,
                    vec![0.0; c.prior.n_coefficients()],
                )
            });
            drive(
                run,
                &PriorTarget::new(c.prior),
                &init,
                resume,
                stop_after,
                run.fingerprint(None)?,
            )
        }
    }
}

fn read_init(run: &Run) -> Result<ParameterVector> {
    Ok(io::read_json::<MapReport>(&run.path(files::MAP))?.map.u_map)
}

fn drive(
    run: &Run,
    target: &dyn Target,
    init: &ParameterVector,
    resume: Option<&Path>,
    stop_after: Option<usize>,
    fingerprint: String,
) -> Result<Option<Chain>> {
    let c = &run.config.sample;
    let mut sampler = match resume {
        Some(path) => {
            let checkpoint: Checkpoint = io::read_json(path)?;
            Sampler::resume(target, checkpoint, c.kernel, c.protocol, fingerprint)?
        }
        None => Sampler::new(
            target,
            &target.whiten(init),
            c.kernel,
            c.protocol,
            stream_rng(run.config.seed, Stream::Sample),
            fingerprint,
        )?,
    };
    let every = if c.checkpoint_every == 0 {
        c.protocol.iterations
    } else {
        c.checkpoint_every
    };
    let stop = stop_after.unwrap_or(usize::MAX);
    while !sampler.is_finished() {
        if sampler.iteration() >= stop {
            io::write_json(&run.path(files::CHECKPOINT), &sampler.checkpoint())?;
            return Ok(None);
        }
        let next = ((sampler.iteration() / every + 1) * every).min(stop);
        match sampler.run_until(next) {
            Ok(()) => {}
            Err(Error::ChainAborted {
                iteration,
                reason,
                checkpoint,
            }) => {
                io::write_json(&run.path(files::CHECKPOINT), &checkpoint)?;
                bail!(
                    "chain aborted at iteration {iteration}: {reason}; resume with --resume {}",
                    run.path(files::CHECKPOINT).display()
                );
            }
            Err(e) => return Err(e.into()),
        }
        if c.checkpoint_every > 0 {
            io::write_json(&run.path(files::CHECKPOINT), &sampler.checkpoint())?;
        }
    }
    let chain = sampler.finish();
    io::write_trace(&run.path(files::TRACE), &chain.trace)?;
    io::write_json(&run.path(files::CHAIN), &chain)?;
    Ok(Some(chain))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_samples: usize,
    pub iterations: usize,
    pub acceptance_rate: f64,
    pub acceptance_rate_after_burn_in: f64,
    pub step_size: f64,
    pub noise_variance: f64,
    pub conditional_mean: ParameterVector,
    pub sample_map: ParameterVector,
    pub sample_map_index: usize,
    pub sample_map_objective: f64,
    pub credible_mass: f64,
    /// Equal-tailed intervals for `λ`, `D` and the first three KL coefficients.
    pub intervals: Vec<Interval>,
    pub histograms: Vec<Histogram>,
    /// Largest lag written to the autocorrelation table.
    pub max_lag: usize,
}

/// Autocorrelation of the six traced series after burn-in. Constant series
/// have no autocorrelation and are reported as `NaN`.
pub fn trace_acf(chain: &Chain, max_lag: usize) -> [Vec<f64>; 6] {
    let rows = &chain.trace[chain.protocol.burn_in.min(chain.trace.len())..];
    let lag = max_lag.min(rows.len().saturating_sub(1));
    io::trace_series(rows).map(|s| acf(&s, lag).unwrap_or_else(|_| vec![f64::NAN; lag + 1]))
}

pub fn diagnose(run: &Run) -> Result<Summary> {
    run.write_resolved()?;
    let c = &run.config;
    let chain: Chain = io::read_json(&run.path(files::CHAIN)).context("run `sample` first")?;
    if chain.retained.is_empty() {
        return Err(anyhow!(Error::EmptyChain));
    }
    let noise_variance = run.noise_variance()?;
    let posterior = run.posterior(noise_variance)?;
    let report = summarize(&chain.retained, &posterior)?;
    let grid = posterior.model().grid();
    io::write_lattice(&run.path(files::SOURCE_MEAN), grid, &report.source.mean)?;
    io::write_lattice(
        &run.path(files::SOURCE_VARIANCE),
        grid,
        &report.source.variance,
    )?;
    io::write_lattice(&run.path(files::SOLUTION_MEAN), grid, &report.solution.mean)?;
    io::write_lattice(
        &run.path(files::SOLUTION_VARIANCE),
        grid,
        &report.solution.variance,
    )?;

    let acfs = trace_acf(&chain, c.diagnose.max_lag);
    io::write_acf(&run.path(files::ACF), &acfs)?;

    let mut series: Vec<(String, Vec<f64>)> = vec![
        (
            "lambda".into(),
            chain.retained.iter().map(|u| u.lambda).collect(),
        ),
        (
            "D".into(),
            chain.retained.iter().map(|u| u.diffusion).collect(),
        ),
    ];
    for k in 0..chain.retained[0].xi.len().min(3) {
        series.push((
            format!("xi_{k}"),
            chain.retained.iter().map(|u| u.xi[k]).collect(),
        ));
    }
    let intervals = series
        .into_iter()
        .map(|(name, v)| {
            let (lo, hi) = credible_interval(&v, c.diagnose.credible_mass);
            Interval { name, lo, hi }
        })
        .collect();

    let summary = Summary {
        n_samples: report.n_samples,
        iterations: chain.total,
        acceptance_rate: chain.acceptance_rate(),
        acceptance_rate_after_burn_in: chain.acceptance_rate_after_burn_in(),
        step_size: chain.step_size,
        noise_variance,
        conditional_mean: report.conditional_mean,
        sample_map: report.sample_map,
        sample_map_index: report.sample_map_index,
        sample_map_objective: report.sample_map_objective,
        credible_mass: c.diagnose.credible_mass,
        intervals,
        histograms: report.histograms,
        max_lag: acfs[0].len().saturating_sub(1),
    };
    io::write_json(&run.path(files::SUMMARY), &summary)?;
    Ok(summary)
}
