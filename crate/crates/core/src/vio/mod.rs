//! Visual-inertial odometry backend: outlier rejection, triangulation,
//! batch MAP estimation and the planar increments handed to the filter.

mod batch;
mod ransac;
mod triangulate;

use nalgebra::{Matrix3, Matrix3x6, Vector2};
use thiserror::Error;

pub use batch::{huber, solve_batch_map, BatchSolution, BatchWindow, SolverOptions};
pub use ransac::{fundamental_eight_point, ransac_reject_outliers, symmetric_epipolar_distance};
pub use triangulate::triangulate_linear;

use crate::geo::{camera_heading, gravity_aligned_frame, wrap_angle};
use crate::track::FeatureTrack;

#[derive(Debug, Error)]
pub enum VioError {
    #[error("need at least 8 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("best consensus set has only {0} correspondences")]
    NoConsensus(usize),
    #[error("degenerate triangulation geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("only {triangulated} of {tracks} tracks could be triangulated")]
    InsufficientLandmarks { triangulated: usize, tracks: usize },
    #[error("batch solve did not converge after {} iterations", .0.iterations)]
    DidNotConverge(Box<BatchSolution>),
    #[error("invalid batch window: {0}")]
    InvalidBatch(String),
    #[error("information matrix is singular")]
    SingularInformation,
}

pub const MIN_VALID_FEATURES: usize = 100;
pub const MIN_BATCH_TRAVEL_M: f64 = 100.0;
/// A feature counts as valid once the vehicle moved this far while tracking it.
pub const MIN_FEATURE_TRAVEL_M: f64 = 20.0;

/// Running statistics since the last batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TriggerState {
    pub valid_features: usize,
    pub traveled_m: f64,
}

pub fn batch_trigger(state: &TriggerState) -> bool {
    state.valid_features >= MIN_VALID_FEATURES && state.traveled_m >= MIN_BATCH_TRAVEL_M
}

/// Tracks inside `[first, last]` whose observation span covers at least
/// [`MIN_FEATURE_TRAVEL_M`] of odometry distance. `distance[k]` is the
/// cumulative distance at global frame `k`.
pub fn valid_tracks(tracks: &[FeatureTrack], first: usize, last: usize, distance: &[f64]) -> Vec<FeatureTrack> {
    tracks
        .iter()
        .filter_map(|t| {
            let obs = t.within(first, last);
            if obs.len() < 2 {
                return None;
            }
            let span = distance[obs[obs.len() - 1].frame] - distance[obs[0].frame];
            (span >= MIN_FEATURE_TRAVEL_M).then(|| FeatureTrack {
                id: t.id,
                observations: obs.to_vec(),
            })
        })
        .collect()
}

/// Runs fundamental-matrix RANSAC on frame pairs `(k, k + gap)` and removes
/// observations that were flagged in every pair they took part in. Tracks
/// left with fewer than two observations are dropped.
pub fn reject_track_outliers(tracks: &[FeatureTrack], first: usize, last: usize, gap: usize, threshold_px: f64, seed: u64) -> Vec<FeatureTrack> {
    let mut pairs_seen: Vec<Vec<(u32, u32)>> = tracks.iter().map(|t| vec![(0, 0); t.observations.len()]).collect();
    for k in first..=last.saturating_sub(gap) {
        let mut refs = Vec::new();
        let mut corr = Vec::new();
        for (ti, t) in tracks.iter().enumerate() {
            let a = t.observations.binary_search_by_key(&k, |o| o.frame);
            let b = t.observations.binary_search_by_key(&(k + gap), |o| o.frame);
            if let (Ok(a), Ok(b)) = (a, b) {
                refs.push((ti, a, b));
                corr.push((t.observations[a].pixel, t.observations[b].pixel));
            }
        }
        let Ok(flags) = ransac_reject_outliers(&corr, 500, threshold_px, seed ^ k as u64) else { continue };
        for ((ti, a, b), inlier) in refs.into_iter().zip(flags) {
            for o in [a, b] {
                pairs_seen[ti][o].0 += 1;
                if !inlier {
                    pairs_seen[ti][o].1 += 1;
                }
            }
        }
    }
    tracks
        .iter()
        .zip(pairs_seen)
        .filter_map(|(t, seen)| {
            let observations: Vec<_> = t
                .observations
                .iter()
                .zip(seen)
                .filter(|(_, (n, bad))| *n == 0 || bad < n)
                .map(|(o, _)| *o)
                .collect();
            (observations.len() >= 2).then_some(FeatureTrack { id: t.id, observations })
        })
        .collect()
}

/// Planar motion between consecutive batch ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryIncrement {
    /// Translation in the previous gravity-aligned frame, meters.
    pub delta_xy: Vector2<f64>,
    pub delta_yaw: f64,
    /// Covariance over `(dx, dy, dyaw)`.
    pub covariance: Matrix3<f64>,
}

impl OdometryIncrement {
    pub fn zero() -> Self {
        Self {
            delta_xy: Vector2::zeros(),
            delta_yaw: 0.0,
            covariance: Matrix3::zeros(),
        }
    }
}

/// Relative motion between the last poses of two solutions expressed in a
/// common frame. The covariance comes from the current solution's last-pose
/// marginal: horizontal translation rotated into the previous heading, and
/// rotation about the vertical. Roll and pitch are taken as known from gravity.
pub fn extract_increment(previous: &BatchSolution, current: &BatchSolution) -> OdometryIncrement {
    let (a, b) = (previous.last_pose(), current.last_pose());
    let heading = |p| gravity_aligned_frame(p).map(|_| camera_heading(p)).unwrap_or_else(|_| p.yaw());
    let psi = heading(a);
    let d = b.translation - a.translation;
    let (s, c) = psi.sin_cos();
    let delta_xy = Vector2::new(c * d.x + s * d.y, -s * d.x + c * d.y);
    let delta_yaw = wrap_angle(heading(b) - psi);
    let mut j = Matrix3x6::zeros();
    j[(0, 3)] = c;
    j[(0, 4)] = s;
    j[(1, 3)] = -s;
    j[(1, 4)] = c;
    j[(2, 2)] = 1.0;
    let cov = j * current.last_pose_marginal * j.transpose();
    OdometryIncrement {
        delta_xy,
        delta_yaw,
        covariance: 0.5 * (cov + cov.transpose()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{oblique_camera_pose, Pose3};
    use crate::track::Observation;
    use nalgebra::{Matrix6, Vector3, Vector6};

    #[test]
    fn trigger_thresholds() {
        let t = |v, d| batch_trigger(&TriggerState { valid_features: v, traveled_m: d });
        assert!(!t(99, 150.0));
        assert!(!t(120, 99.0));
        assert!(t(120, 150.0));
        assert!(t(100, 100.0));
    }

    fn solution(pose: Pose3, marginal: Matrix6<f64>) -> BatchSolution {
        BatchSolution {
            poses: vec![pose.clone(), pose],
            landmarks: vec![],
            last_pose_marginal: marginal,
            converged: true,
            final_cost: 0.0,
            iterations: 1,
        }
    }

    #[test]
    fn null_and_forward_motion() {
        let heading = 0.7;
        let a = oblique_camera_pose(Vector3::new(100.0, 50.0, 92.0), heading, 0.9);
        let inc = extract_increment(&solution(a.clone(), Matrix6::zeros()), &solution(a.clone(), Matrix6::zeros()));
        assert!(inc.delta_xy.norm() < 1e-12 && inc.delta_yaw.abs() < 1e-12);

        let ahead = Vector3::new(heading.cos(), heading.sin(), 0.0) * 10.0;
        let b = oblique_camera_pose(a.translation + ahead, heading, 0.9);
        let inc = extract_increment(&solution(a, Matrix6::zeros()), &solution(b, Matrix6::zeros()));
        assert!((inc.delta_xy - Vector2::new(10.0, 0.0)).norm() < 1e-9);
        assert!(inc.delta_yaw.abs() < 1e-12);
    }

    #[test]
    fn covariance_selects_planar_blocks() {
        let a = oblique_camera_pose(Vector3::new(0.0, 0.0, 92.0), 0.0, 0.9);
        let diag = Vector6::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0);
        let inc = extract_increment(&solution(a.clone(), Matrix6::zeros()), &solution(a, Matrix6::from_diagonal(&diag)));
        assert!((inc.covariance - Matrix3::from_diagonal(&Vector3::new(4.0, 5.0, 3.0))).norm() < 1e-12);
    }

    #[test]
    fn valid_tracks_need_travel() {
        let distance: Vec<f64> = (0..100).map(|k| k as f64).collect();
        let obs = |frames: &[usize]| {
            frames
                .iter()
                .map(|f| Observation {
                    frame: *f,
                    pixel: Vector2::zeros(),
                })
                .collect()
        };
        let tracks = vec![
            FeatureTrack { id: 0, observations: obs(&[10, 20, 35]) },
            FeatureTrack { id: 1, observations: obs(&[10, 15]) },
            FeatureTrack { id: 2, observations: obs(&[50, 60, 90]) },
        ];
        let valid = valid_tracks(&tracks, 0, 70, &distance);
        assert_eq!(valid.iter().map(|t| t.id).collect::<Vec<_>>(), vec![0]);
    }
}
