//! Turning raw matching scores into particle weights.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{MetricKind, ScoreSeries};

pub const DEFAULT_OMEGA: f64 = 0.1;
pub const DEFAULT_BINS: usize = 30;
const DENOMINATOR_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("need at least two samples with nonzero spread")]
    DegenerateSamples,
    #[error("empty sample set")]
    EmptyInput,
    #[error("score model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Scott's rule `h = σ̂ n^(-1/5)` with the unbiased sample deviation.
pub fn scott_bandwidth(samples: &[f64]) -> Result<f64, CalibError> {
    if samples.len() < 2 {
        return Err(CalibError::DegenerateSamples);
    }
    let (_, std) = mean_std(samples);
    if !(std > 0.0 && std.is_finite()) {
        return Err(CalibError::DegenerateSamples);
    }
    Ok(std * (samples.len() as f64).powf(-0.2))
}

/// Gaussian kernel density estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde1D {
    pub samples: Vec<f64>,
    pub bandwidth: f64,
}

impl Kde1D {
    pub fn fit(samples: &[f64]) -> Result<Self, CalibError> {
        Ok(Self {
            bandwidth: scott_bandwidth(samples)?,
            samples: samples.to_vec(),
        })
    }

    pub fn eval(&self, c: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / (self.samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
        norm * self.samples.iter().map(|s| (-0.5 * ((c - s) / h).powi(2)).exp()).sum::<f64>()
    }

    /// `ln(eval(c))`, finite far into the tails where `eval` underflows.
    pub fn ln_eval(&self, c: f64) -> f64 {
        let h = self.bandwidth;
        let ln_norm = -(self.samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt()).ln();
        let exps = self.samples.iter().map(|s| -0.5 * ((c - s) / h).powi(2));
        ln_norm + log_sum_exp(exps)
    }
}

fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// `p_t / (p_t + p_f + ω·p_o)` with the denominator floored.
pub fn posterior_from_densities(p_t: f64, p_f: f64, omega_p_o: f64) -> f64 {
    p_t / (p_t + p_f + omega_p_o).max(DENOMINATOR_FLOOR)
}

/// Calibrated score-to-weight mapping for one metric kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub metric: MetricKind,
    pub omega: f64,
    pub outlier_low: f64,
    pub outlier_high: f64,
    pub true_density: Kde1D,
    pub random_density: Kde1D,
    /// Weight factor for hypotheses that cannot be scored at all (off the
    /// map, too little overlap): that of a typical wrong pose.
    pub failure_weight: f64,
}

impl ScoreModel {
    pub fn fit(metric: MetricKind, true_scores: &[f64], random_scores: &[f64], omega: f64) -> Result<Self, CalibError> {
        let true_density = Kde1D::fit(true_scores)?;
        let random_density = Kde1D::fit(random_scores)?;
        let all = true_scores.iter().chain(random_scores);
        let low = all.clone().copied().fold(f64::INFINITY, f64::min);
        let high = all.copied().fold(f64::NEG_INFINITY, f64::max);
        if !(high > low) {
            return Err(CalibError::DegenerateSamples);
        }
        let mut model = Self {
            metric,
            omega,
            outlier_low: low,
            outlier_high: high,
            true_density,
            random_density,
            failure_weight: 0.0,
        };
        model.failure_weight = model.typical_wrong_weight();
        Ok(model)
    }

    pub fn from_series(metric: MetricKind, series: &ScoreSeries, omega: f64) -> Result<Self, CalibError> {
        Self::fit(metric, &series.true_scores, &series.random_scores, omega)
    }

    /// Uniform outlier density over the calibration range.
    pub fn outlier_density(&self) -> f64 {
        1.0 / (self.outlier_high - self.outlier_low)
    }

    /// Probability that score `c` came from a correct pose. Scores outside
    /// the calibration range are clamped to its edge first.
    pub fn posterior_weight(&self, c: f64) -> f64 {
        self.ln_posterior_weight(c).exp()
    }

    /// Logarithm of [`Self::posterior_weight`], evaluated without
    /// underflow so that far-tail scores still rank against each other.
    pub fn ln_posterior_weight(&self, c: f64) -> f64 {
        let c = c.clamp(self.outlier_low, self.outlier_high);
        let ln_t = self.true_density.ln_eval(c);
        let ln_f = self.random_density.ln_eval(c);
        let ln_o = (self.omega * self.outlier_density()).ln();
        let ln_den = log_sum_exp([ln_t, ln_f, ln_o].into_iter()).max(DENOMINATOR_FLOOR.ln());
        ln_t - ln_den
    }

    /// Median posterior over the random-pose calibration scores.
    fn typical_wrong_weight(&self) -> f64 {
        let mut w: Vec<f64> = self.random_density.samples.iter().map(|c| self.posterior_weight(*c)).collect();
        w.sort_by(f64::total_cmp);
        w[w.len() / 2]
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibError> {
        let text = toml::to_string(self).map_err(|e| CalibError::Format(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CalibError> {
        let text = fs::read_to_string(path)?;
        let model: Self = toml::from_str(&text).map_err(|e| CalibError::Format(e.to_string()))?;
        let ok = model.outlier_high > model.outlier_low
            && model.omega >= 0.0
            && model.true_density.bandwidth > 0.0
            && model.random_density.bandwidth > 0.0
            && model.true_density.samples.len() >= 2
            && model.random_density.samples.len() >= 2
            && (0.0..=1.0).contains(&model.failure_weight);
        if !ok {
            return Err(CalibError::Format("inconsistent model parameters".into()));
        }
        Ok(model)
    }
}

/// Area shared by the two normalized histograms over a common set of
/// `n_bins` equal bins spanning the pooled range.
pub fn overlapping_coefficient(a: &[f64], b: &[f64], n_bins: usize) -> Result<f64, CalibError> {
    let h = match PairedHistogram::build(a, b, n_bins) {
        Err(CalibError::DegenerateSamples) => return Ok(1.0),
        other => other?,
    };
    let oc: f64 = h.first.iter().zip(&h.second).map(|(x, y)| x.min(*y) * h.width).sum();
    Ok(oc.clamp(0.0, 1.0))
}

/// Two density histograms over the shared bins spanning the pooled range.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedHistogram {
    pub low: f64,
    pub width: f64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl PairedHistogram {
    pub fn build(a: &[f64], b: &[f64], n_bins: usize) -> Result<Self, CalibError> {
        if a.is_empty() || b.is_empty() || n_bins == 0 {
            return Err(CalibError::EmptyInput);
        }
        let pooled = a.iter().chain(b);
        let lo = pooled.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = pooled.copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return Err(CalibError::DegenerateSamples);
        }
        let width = (hi - lo) / n_bins as f64;
        let hist = |xs: &[f64]| {
            let mut h = vec![0.0; n_bins];
            for x in xs {
                let i = (((x - lo) / width) as usize).min(n_bins - 1);
                h[i] += 1.0;
            }
            let norm = 1.0 / (xs.len() as f64 * width);
            h.iter_mut().for_each(|v| *v *= norm);
            h
        };
        Ok(Self {
            low: lo,
            width,
            first: hist(a),
            second: hist(b),
        })
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        (self.low + i as f64 * self.width, self.low + (i + 1) as f64 * self.width)
    }
}

/// Metric kinds ordered by ascending overlap; ties keep enumeration order.
/// Kinds without scores in both classes are left out.
pub fn rank_metrics(series: &[(MetricKind, ScoreSeries)]) -> Vec<(MetricKind, f64)> {
    let mut ranked: Vec<(MetricKind, f64)> = series
        .iter()
        .filter_map(|(k, s)| overlapping_coefficient(&s.true_scores, &s.random_scores, DEFAULT_BINS).ok().map(|o| (*k, o)))
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    ranked
}
