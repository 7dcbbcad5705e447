//! Constant-altitude, constant-speed flight through waypoints with rounded corners.

use nalgebra::{Vector2, Vector3};

use super::{ScenarioConfig, SimError};
use crate::geo::{oblique_camera_pose, Pose3};

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFrame {
    pub timestamp: f64,
    pub camera_pose: Pose3,
}

/// Arc-length parameterized planar path.
#[derive(Debug, Clone)]
pub struct Path2 {
    points: Vec<Vector2<f64>>,
    cumulative: Vec<f64>,
}

const ARC_STEP_M: f64 = 0.25;

impl Path2 {
    /// Polyline through `waypoints` with each corner replaced by a circular
    /// fillet of radius `turn_radius` (shrunk where legs are short).
    pub fn rounded(waypoints: &[Vector2<f64>], turn_radius: f64) -> Self {
        let mut points = vec![waypoints[0]];
        for i in 1..waypoints.len() - 1 {
            let (prev, corner, next) = (waypoints[i - 1], waypoints[i], waypoints[i + 1]);
            let (d1, d2) = ((corner - prev), (next - corner));
            let (l1, l2) = (d1.norm(), d2.norm());
            if l1 < 1e-9 || l2 < 1e-9 {
                continue;
            }
            let (u1, u2) = (d1 / l1, d2 / l2);
            let turn = u1.perp(&u2).atan2(u1.dot(&u2));
            if turn.abs() < 1e-6 {
                points.push(corner);
                continue;
            }
            let mut tangent = turn_radius * (turn.abs() / 2.0).tan();
            tangent = tangent.min(0.5 * l1).min(0.5 * l2);
            let radius = tangent / (turn.abs() / 2.0).tan();
            let start = corner - u1 * tangent;
            let left = Vector2::new(-u1.y, u1.x) * turn.signum();
            let center = start + left * radius;
            let a0 = (start - center).y.atan2((start - center).x);
            let n = ((radius * turn.abs()) / ARC_STEP_M).ceil().max(1.0) as usize;
            for k in 0..=n {
                let a = a0 + turn * k as f64 / n as f64;
                points.push(center + radius * Vector2::new(a.cos(), a.sin()));
            }
        }
        points.push(*waypoints.last().unwrap());
        points.dedup_by(|a, b| (*a - *b).norm() < 1e-12);
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            cumulative.push(cumulative.last().unwrap() + (w[1] - w[0]).norm());
        }
        Self { points, cumulative }
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Position and tangent heading at arc length `s`.
    pub fn at(&self, s: f64) -> (Vector2<f64>, f64) {
        let s = s.clamp(0.0, self.length());
        let i = match self.cumulative.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.points.len() - 2),
        };
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let t = if seg > 0.0 { (s - self.cumulative[i]) / seg } else { 0.0 };
        let d = self.points[i + 1] - self.points[i];
        (self.points[i] + d * t, d.y.atan2(d.x))
    }
}

pub fn generate_trajectory(config: &ScenarioConfig) -> Result<Vec<GroundTruthFrame>, SimError> {
    if config.trajectory_waypoints.len() < 2 {
        return Err(SimError::InvalidConfig {
            key: "trajectory_waypoints",
            reason: "need at least two waypoints".into(),
        });
    }
    let extent = config.map_extent_m();
    let waypoints: Vec<Vector2<f64>> = config
        .trajectory_waypoints
        .iter()
        .map(|w| Vector2::new(w[0], w[1]))
        .collect();
    for w in &waypoints {
        if !(w.x >= 0.0 && w.y >= 0.0 && w.x <= extent && w.y <= extent) {
            return Err(SimError::WaypointsOutsideMap { x: w.x, y: w.y });
        }
    }
    let path = Path2::rounded(&waypoints, config.turn_radius_m);
    if path.length() < 500.0 {
        return Err(SimError::TrajectoryTooShort(path.length()));
    }
    let step = config.speed_mps / config.frame_rate_hz;
    let n = (path.length() / step + 1e-9).floor() as usize + 1;
    let off_nadir = config.camera_off_nadir_deg.to_radians();
    Ok((0..n)
        .map(|k| {
            let (p, yaw) = path.at(k as f64 * step);
            GroundTruthFrame {
                timestamp: k as f64 / config.frame_rate_hz,
                camera_pose: oblique_camera_pose(Vector3::new(p.x, p.y, config.altitude_m), yaw, off_nadir),
            }
        })
        .collect())
}
