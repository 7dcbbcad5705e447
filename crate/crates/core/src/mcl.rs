//! Monte-Carlo localization over `(x, y, φ, s)` against the reference map.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::calib::ScoreModel;
use crate::geo::wrap_angle;
use crate::metrics::{MatchHypothesis, PreparedOrtho, MAX_SCALE, MIN_SCALE};
use crate::ortho::OrthoImage;
use crate::raster::GeoRaster;
use crate::vio::OdometryIncrement;

pub const DEFAULT_PARTICLES: usize = 1000;
pub const DEFAULT_INIT_SIDE_M: f64 = 200.0;
pub const DEFAULT_SCALE_VARIANCE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MclError {
    #[error("no particle carries any weight after the update")]
    AllParticlesDead,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
    pub s: f64,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
    /// Number of measurement updates applied so far.
    pub generation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeliefSummary {
    pub mean_xy: Vector2<f64>,
    pub std_xy: Vector2<f64>,
    pub effective_sample_size: f64,
}

impl BeliefSummary {
    pub fn converged(&self, threshold_m: f64) -> bool {
        self.std_xy.x < threshold_m && self.std_xy.y < threshold_m
    }
}

/// Positions uniform over a `d × d` square, heading uniform, unit scale.
pub fn initialize(center: Vector2<f64>, d: f64, count: usize, rng_seed: u64) -> ParticleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let half = 0.5 * d;
    let w = 1.0 / count as f64;
    let particles = (0..count)
        .map(|_| Particle {
            x: center.x + rng.gen_range(-half..half),
            y: center.y + rng.gen_range(-half..half),
            phi: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            s: 1.0,
            w,
        })
        .collect();
    ParticleSet { particles, generation: 0 }
}

/// Square root of a PSD matrix through its eigendecomposition, so singular
/// covariances (a noiseless axis) are fine.
fn psd_sqrt(cov: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = (0.5 * (cov + cov.transpose())).symmetric_eigen();
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    eig.eigenvectors * Matrix3::from_diagonal(&d)
}

/// Moves each particle by its own draw of the increment, rotated into its
/// heading and stretched by its scale, then random-walks the scale.
pub fn predict(set: &ParticleSet, increment: &OdometryIncrement, scale_variance: f64, rng_seed: u64) -> ParticleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let root = psd_sqrt(&increment.covariance);
    let scale_std = scale_variance.max(0.0).sqrt();
    let mean = Vector3::new(increment.delta_xy.x, increment.delta_xy.y, increment.delta_yaw);
    let particles = set
        .particles
        .iter()
        .map(|p| {
            let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let d = mean + root * z;
            let (s, c) = p.phi.sin_cos();
            let ds: f64 = rng.sample::<f64, _>(StandardNormal) * scale_std;
            Particle {
                x: p.x + p.s * (c * d.x - s * d.y),
                y: p.y + p.s * (s * d.x + c * d.y),
                phi: wrap_angle(p.phi + d.z),
                s: (p.s + ds).clamp(MIN_SCALE, MAX_SCALE),
                w: p.w,
            }
        })
        .collect();
    ParticleSet {
        particles,
        generation: set.generation,
    }
}

/// Multiplies each weight by the calibrated posterior of its match score and
/// renormalizes. Hypotheses that cannot be scored get the model's failure
/// weight; if no particle could be scored at all the filter has lost the map.
pub fn update_weights(set: &ParticleSet, ortho: &OrthoImage, map: &GeoRaster, model: &ScoreModel) -> Result<ParticleSet, MclError> {
    let prepared = PreparedOrtho::new(ortho);
    let factors: Vec<Option<f64>> = set
        .particles
        .par_iter()
        .map(|p| {
            let hyp = MatchHypothesis::new(p.x, p.y, p.phi, p.s);
            prepared.score(&hyp, map, model.metric).ok().map(|c| model.ln_posterior_weight(c))
        })
        .collect();
    if factors.iter().all(Option::is_none) {
        return Err(MclError::AllParticlesDead);
    }
    // work in logs: narrow calibration densities put most hypotheses far
    // in the tails, where the linear posterior underflows for all of them
    let ln_failure = model.failure_weight.ln();
    let ln_w: Vec<f64> = set
        .particles
        .iter()
        .zip(&factors)
        .map(|(p, f)| p.w.ln() + f.unwrap_or(ln_failure))
        .collect();
    let top = ln_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(MclError::AllParticlesDead);
    }
    let mut particles = set.particles.clone();
    for (p, l) in particles.iter_mut().zip(&ln_w) {
        p.w = (l - top).exp();
    }
    let total: f64 = particles.iter().map(|p| p.w).sum();
    particles.iter_mut().for_each(|p| p.w /= total);
    Ok(ParticleSet {
        particles,
        generation: set.generation + 1,
    })
}

/// Systematic low-variance resampling with one uniform draw in `[0, 1/P)`.
pub fn resample(set: &ParticleSet, rng_seed: u64) -> ParticleSet {
    let n = set.particles.len();
    let total: f64 = set.particles.iter().map(|p| p.w).sum();
    let step = 1.0 / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let r: f64 = rng.gen_range(0.0..step);
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    let mut c = set.particles[0].w / total;
    for m in 0..n {
        let u = r + m as f64 * step;
        while u > c && i + 1 < n {
            i += 1;
            c += set.particles[i].w / total;
        }
        out.push(Particle { w: step, ..set.particles[i] });
    }
    ParticleSet {
        particles: out,
        generation: set.generation,
    }
}

pub fn summarize(set: &ParticleSet) -> BeliefSummary {
    let total: f64 = set.particles.iter().map(|p| p.w).sum();
    let mut mean = Vector2::zeros();
    for p in &set.particles {
        mean += Vector2::new(p.x, p.y) * (p.w / total);
    }
    let mut var = Vector2::zeros();
    let mut sq = 0.0;
    for p in &set.particles {
        let w = p.w / total;
        let d = Vector2::new(p.x, p.y) - mean;
        var += d.component_mul(&d) * w;
        sq += w * w;
    }
    BeliefSummary {
        mean_xy: mean,
        std_xy: var.map(|v| v.max(0.0).sqrt()),
        effective_sample_size: 1.0 / sq,
    }
}

/// Weighted circular variance `1 − |Σ w e^{iφ}|` of the headings.
pub fn heading_circular_variance(set: &ParticleSet) -> f64 {
    let total: f64 = set.particles.iter().map(|p| p.w).sum();
    let (mut c, mut s) = (0.0, 0.0);
    for p in &set.particles {
        c += p.w * p.phi.cos();
        s += p.w * p.phi.sin();
    }
    1.0 - c.hypot(s) / total
}
