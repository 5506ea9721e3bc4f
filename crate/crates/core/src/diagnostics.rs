//! Chain post-processing: autocorrelation, thinning, Monte-Carlo errors and
//! posterior summaries.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posterior::{ForwardState, Posterior};
use crate::prior::ParameterVector;

/// Biased autocorrelation estimator `r_k = Σ (x_i − x̄)(x_{i+k} − x̄) / Σ (x_i − x̄)²`
/// for `k = 0..=max_lag`.
pub fn acf(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = series.len();
    if max_lag == 0 || n <= max_lag {
        return Err(Error::InvalidConfig(format!(
            "autocorrelation needs 1 <= max_lag < length, got max_lag={max_lag}, length={n}"
        )));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centred: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let c0: f64 = centred.iter().map(|v| v * v).sum();
    if !(c0 > 0.0) || !c0.is_finite() {
        return Err(Error::DegenerateSeries(
            "series has zero or non-finite variance".into(),
        ));
    }
    Ok((0..=max_lag)
        .map(|k| {
            centred[..n - k]
                .iter()
                .zip(&centred[k..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / c0
        })
        .collect())
}

/// Every `stride`-th element starting with the first.
pub fn thin<T: Clone>(items: &[T], stride: usize) -> Result<Vec<T>> {
    if stride == 0 {
        return Err(Error::InvalidConfig(
            "thinning stride must be at least 1".into(),
        ));
    }
    Ok(items.iter().step_by(stride).cloned().collect())
}

pub fn mean(series: &[f64]) -> f64 {
    series.iter().sum::<f64>() / series.len() as f64
}

/// Unbiased sample variance.
pub fn variance(series: &[f64]) -> f64 {
    let m = mean(series);
    series.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (series.len() as f64 - 1.0)
}

/// Monte-Carlo standard error of the mean by non-overlapping batch means.
pub fn batch_means_se(series: &[f64], batches: usize) -> f64 {
    let size = series.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| mean(&series[b * size..(b + 1) * size]))
        .collect();
    (variance(&means) / batches as f64).sqrt()
}

/// Linear-interpolation quantile (type 7) of unsorted data.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Equal-tailed interval of the given mass.
pub fn credible_interval(values: &[f64], mass: f64) -> (f64, f64) {
    let tail = 0.5 * (1.0 - mass);
    (quantile(values, tail), quantile(values, 1.0 - tail))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Values outside `[lo, hi]` are clamped into the edge bins.
    pub fn new(name: &str, values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let b = if width > 0.0 {
                ((v - lo) / width).floor()
            } else {
                0.0
            };
            counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Self {
            name: name.into(),
            lo,
            hi,
            counts,
        }
    }
}

/// Pointwise mean and (population) variance over samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeStats {
    pub mean: Array2<f64>,
    pub variance: Array2<f64>,
}

impl LatticeStats {
    /// Two-pass reduction in sample order, on deviations from the first
    /// sample so that identical samples give exactly zero variance.
    pub fn from_samples<'a>(
        samples: impl Iterator<Item = &'a Array2<f64>> + Clone,
    ) -> Result<Self> {
        let mut iter = samples.clone();
        let first = iter.next().ok_or(Error::EmptyChain)?;
        let mut shift = Array2::zeros(first.dim());
        let mut n = 1usize;
        for s in iter {
            shift += &(s - first);
            n += 1;
        }
        shift /= n as f64;
        let mut var = Array2::zeros(first.dim());
        for s in samples {
            let d = s - first - &shift;
            var.zip_mut_with(&d, |acc, d| *acc += d * d);
        }
        Ok(Self {
            mean: first + &shift,
            variance: var / n as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub n_samples: usize,
    pub conditional_mean: ParameterVector,
    /// Retained state with the smallest Onsager-Machlup value, i.e. the
    /// largest posterior density.
    pub sample_map: ParameterVector,
    pub sample_map_index: usize,
    pub sample_map_objective: f64,
    /// `Φ` and `I` of every retained state.
    pub phi: Vec<f64>,
    pub objective: Vec<f64>,
    pub histograms: Vec<Histogram>,
    pub source: LatticeStats,
    pub solution: LatticeStats,
}

pub const HISTOGRAM_BINS: usize = 20;

/// Posterior mean, sample MAP, marginal histograms and pointwise moments of
/// `f*` and `y`, re-solving the forward problem for every retained state.
pub fn summarize(samples: &[ParameterVector], posterior: &Posterior) -> Result<SummaryReport> {
    if samples.is_empty() {
        return Err(Error::EmptyChain);
    }
    let n = samples.len();
    let dim = samples[0].dim();
    let first = samples[0].to_vec();
    let mut shift = vec![0.0; dim];
    for u in samples {
        if u.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: u.dim(),
            });
        }
        shift
            .iter_mut()
            .zip(u.to_vec())
            .zip(&first)
            .for_each(|((m, v), f)| *m += v - f);
    }
    let mean: Vec<f64> = first
        .iter()
        .zip(&shift)
        .map(|(f, s)| f + s / n as f64)
        .collect();
    let conditional_mean = ParameterVector::from_slice(&mean)?;

    let model = posterior.model();
    let states: Vec<ForwardState> = model
        .execution()
        .map_slice(samples, |u| model.solve(u))
        .into_iter()
        .collect::<Result<_>>()?;
    let obs = posterior.observation_operator();
    let values = posterior.data().values();
    let phi: Vec<f64> = states
        .iter()
        .map(|s| {
            let pred = obs.apply(&s.solution);
            let r: Vec<f64> = values.iter().zip(&pred).map(|(z, g)| z - g).collect();
            posterior.phi_from_residual(&r)
        })
        .collect();
    let objective: Vec<f64> = samples
        .iter()
        .zip(&phi)
        .map(|(u, &p)| posterior.om_from_phi(u, p))
        .collect();
    let (sample_map_index, sample_map_objective) =
        objective
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |best, (i, v)| if v < best.1 { (i, v) } else { best },
            );

    let prior = posterior.prior();
    let mut histograms = vec![
        Histogram::new(
            "lambda",
            &samples.iter().map(|u| u.lambda).collect::<Vec<_>>(),
            0.0,
            prior.lambda_max,
            HISTOGRAM_BINS,
        ),
        Histogram::new(
            "D",
            &samples.iter().map(|u| u.diffusion).collect::<Vec<_>>(),
            0.0,
            prior.diffusion_max,
            HISTOGRAM_BINS,
        ),
    ];
    for k in 0..samples[0].xi.len().min(3) {
        let v: Vec<f64> = samples.iter().map(|u| u.xi[k]).collect();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        histograms.push(Histogram::new(
            &format!("xi_{k}"),
            &v,
            lo,
            hi,
            HISTOGRAM_BINS,
        ));
    }

    Ok(SummaryReport {
        n_samples: n,
        conditional_mean,
        sample_map: samples[sample_map_index].clone(),
        sample_map_index,
        sample_map_objective,
        phi,
        objective,
        histograms,
        source: LatticeStats::from_samples(states.iter().map(|s| &s.source))?,
        solution: LatticeStats::from_samples(states.iter().map(|s| &s.solution))?,
    })
}
