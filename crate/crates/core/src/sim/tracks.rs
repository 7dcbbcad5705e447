use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{GroundTruthFrame, ScenarioConfig, SimError};
use crate::geo::{pixel_ray, project_pixel, CameraIntrinsics};
use crate::track::{FeatureTrack, Observation};

/// Fewest tracks any frame may see.
pub const MIN_TRACKS_PER_FRAME: usize = 50;

/// Tracks are spawned and kept this far inside the image border.
const BORDER_PX: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SimFeatureTrack {
    pub track: FeatureTrack,
    /// Hidden ground-truth landmark position.
    pub landmark: Vector3<f64>,
    pub is_outlier: bool,
}

struct Active {
    id: usize,
    landmark: Vector3<f64>,
    last_frame: usize,
    observations: Vec<Observation>,
}

fn inside(k: &CameraIntrinsics, p: &Vector2<f64>, border: f64) -> bool {
    p.x >= border && p.y >= border && p.x <= k.width as f64 - 1.0 - border && p.y <= k.height as f64 - 1.0 - border
}

/// Landmarks on `z = 0` tracked across consecutive frames with noisy
/// projections. An exact `round(rate · n)` subset of tracks gets one
/// observation replaced by a uniformly random pixel.
pub fn generate_feature_tracks(
    frames: &[GroundTruthFrame],
    intrinsics: &CameraIntrinsics,
    config: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SimFeatureTrack>, SimError> {
    if frames.len() < 2 {
        return Err(SimError::InsufficientCoverage { frame: 0, count: 0 });
    }
    let settings = &config.tracks;
    let noise = Normal::new(0.0, config.pixel_noise_std_px).map_err(|e| SimError::InvalidConfig {
        key: "pixel_noise_std_px",
        reason: e.to_string(),
    })?;
    let (maxu, maxv) = ((intrinsics.width - 1) as f64, (intrinsics.height - 1) as f64);
    let observe = |rng: &mut ChaCha8Rng, p: Vector2<f64>| {
        Vector2::new(
            (p.x + noise.sample(rng)).clamp(0.0, maxu),
            (p.y + noise.sample(rng)).clamp(0.0, maxv),
        )
    };

    let mut done: Vec<SimFeatureTrack> = Vec::new();
    let mut active: Vec<Active> = Vec::new();
    let mut next_id = 0;
    let finish = |a: Active, done: &mut Vec<SimFeatureTrack>| {
        if a.observations.len() >= 2 {
            done.push(SimFeatureTrack {
                track: FeatureTrack {
                    id: a.id,
                    observations: a.observations,
                },
                landmark: a.landmark,
                is_outlier: false,
            });
        }
    };

    for (k, frame) in frames.iter().enumerate() {
        let pose = &frame.camera_pose;
        let mut still = Vec::with_capacity(active.len());
        for mut a in active.drain(..) {
            let projected = project_pixel(intrinsics, &pose.inverse_transform_point(&a.landmark)).ok();
            match projected {
                Some(p) if k <= a.last_frame && inside(intrinsics, &p, BORDER_PX) => {
                    let pixel = observe(rng, p);
                    a.observations.push(Observation { frame: k, pixel });
                    still.push(a);
                }
                _ => finish(a, &mut done),
            }
        }
        active = still;

        let mut attempts = 0;
        while active.len() < settings.per_frame && attempts < 100 * settings.per_frame {
            attempts += 1;
            let p = Vector2::new(
                rng.gen_range(BORDER_PX..=maxu - BORDER_PX),
                rng.gen_range(BORDER_PX..=maxv - BORDER_PX),
            );
            let ray = pixel_ray(intrinsics, pose, &p);
            if ray.direction.z >= -1e-6 {
                continue;
            }
            let landmark = ray.at(-ray.origin.z / ray.direction.z);
            let lifetime = rng.gen_range(settings.min_lifetime_s..=settings.max_lifetime_s);
            let pixel = observe(rng, p);
            active.push(Active {
                id: next_id,
                landmark,
                last_frame: k + (lifetime * config.frame_rate_hz).round() as usize,
                observations: vec![Observation { frame: k, pixel }],
            });
            next_id += 1;
        }
    }
    for a in active.drain(..) {
        finish(a, &mut done);
    }
    done.sort_by_key(|t| t.track.id);

    let mut counts = vec![0usize; frames.len()];
    for t in &done {
        for o in &t.track.observations {
            counts[o.frame] += 1;
        }
    }
    if let Some((frame, &count)) = counts.iter().enumerate().find(|(_, c)| **c < MIN_TRACKS_PER_FRAME) {
        return Err(SimError::InsufficientCoverage { frame, count });
    }

    let n_out = (config.track_outlier_rate * done.len() as f64).round() as usize;
    for i in rand::seq::index::sample(rng, done.len(), n_out).into_vec() {
        let t = &mut done[i];
        let j = rng.gen_range(0..t.track.observations.len());
        t.track.observations[j].pixel = Vector2::new(rng.gen_range(0.0..=maxu), rng.gen_range(0.0..=maxv));
        t.is_outlier = true;
    }
    Ok(done)
}
