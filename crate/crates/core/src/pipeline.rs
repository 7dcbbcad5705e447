//! The full localization loop: batch trigger, MAP solve, orthorectification
//! of the batch's last frame, then predict, update and resample.

use std::io;

use nalgebra::{Matrix6, Vector2};
use thiserror::Error;

use crate::calib::ScoreModel;
use crate::geo::{camera_heading, gravity_aligned_frame, skew, wrap_angle, CameraIntrinsics, Pose3};
use crate::mcl::{initialize, predict, resample, summarize, update_weights, MclError, Particle, ParticleSet, DEFAULT_INIT_SIDE_M, DEFAULT_PARTICLES, DEFAULT_SCALE_VARIANCE};
use crate::metrics::PosedOrtho;
use crate::ortho::{fit_ground_plane, orthorectify, OrthoImage, Plane};
use crate::raster::{GeoRaster, GrayImage};
use crate::sim::{GroundTruthFrame, ImuIncrement, Scenario, ScenarioRecord, SimError};
use crate::track::FeatureTrack;
use crate::vio::{
    batch_trigger, extract_increment, reject_track_outliers, solve_batch_map, valid_tracks, BatchSolution, BatchWindow, OdometryIncrement,
    SolverOptions, TriggerState, VioError, MIN_BATCH_TRAVEL_M,
};

/// Weighted position spread below which the filter counts as converged.
pub const CONVERGENCE_STD_M: f64 = 50.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("the flight produced no batches")]
    NoBatches,
}

/// Where camera images come from.
pub trait FrameSource {
    /// Whether frame `k` has an image at all.
    fn has_frame(&self, k: usize) -> bool;
    fn frame(&self, k: usize) -> Result<GrayImage, PipelineError>;
}

impl FrameSource for Scenario {
    fn has_frame(&self, k: usize) -> bool {
        k < self.frames.len()
    }

    fn frame(&self, k: usize) -> Result<GrayImage, PipelineError> {
        Ok(self.render_frame(k)?)
    }
}

impl FrameSource for ScenarioRecord {
    fn has_frame(&self, k: usize) -> bool {
        crate::sim::frame_path(&self.dir, k).exists()
    }

    fn frame(&self, k: usize) -> Result<GrayImage, PipelineError> {
        match self.frame_image(k) {
            Some(r) => Ok(r?),
            None => Err(io::Error::new(io::ErrorKind::NotFound, format!("no image for frame {k}")).into()),
        }
    }
}

/// Sensor data of one flight plus the ground truth used for evaluation.
#[derive(Debug, Clone)]
pub struct Flight {
    pub intrinsics: CameraIntrinsics,
    pub tracks: Vec<FeatureTrack>,
    pub imu: Vec<ImuIncrement>,
    pub truth: Vec<GroundTruthFrame>,
}

impl Flight {
    pub fn from_scenario(s: &Scenario) -> Self {
        Self {
            intrinsics: s.config.camera,
            tracks: s.feature_tracks(),
            imu: s.imu.clone(),
            truth: s.frames.clone(),
        }
    }

    pub fn from_record(r: &ScenarioRecord) -> Self {
        Self {
            intrinsics: r.config.camera,
            tracks: r.tracks.clone(),
            imu: r.imu.clone(),
            truth: r.frames.clone(),
        }
    }

    pub fn frame_count(&self) -> usize {
        self.truth.len()
    }

    /// Cumulative inertial-odometry distance at every frame.
    pub fn odometry_distance(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.frame_count()];
        for (i, inc) in self.imu.iter().enumerate() {
            d[i + 1] = d[i] + inc.delta.translation.norm();
        }
        d
    }

    /// True `(x, y, heading)` of the camera at frame `k`.
    pub fn true_planar(&self, k: usize) -> (Vector2<f64>, f64) {
        let p = &self.truth[k].camera_pose;
        (p.translation.xy(), camera_heading(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VioOptions {
    pub solver: SolverOptions,
    /// Frame gap of the RANSAC pairs `(k, k + gap)`.
    pub ransac_gap: usize,
    pub ransac_threshold_px: f64,
    pub ransac_seed: u64,
}

impl Default for VioOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            ransac_gap: 5,
            ransac_threshold_px: 4.0,
            ransac_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchRecord {
    pub first_frame: usize,
    pub last_frame: usize,
    /// Poses and landmarks in the odometry frame.
    pub solution: BatchSolution,
    /// The solve failed and the poses are IMU dead reckoning.
    pub dead_reckoned: bool,
    pub increment: OdometryIncrement,
    pub plane: Option<Plane>,
    pub ortho: Option<OrthoImage>,
}

/// Chains the IMU increments of a window into a solution whose last-pose
/// covariance is the propagated increment noise.
fn dead_reckoned_solution(window: &BatchWindow) -> BatchSolution {
    let poses = window.dead_reckoning();
    let mut marginal = Matrix6::zeros();
    for (d, pose) in window.imu_increments.iter().zip(&poses[1..]) {
        let r = pose.rotation_matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&(skew(&pose.translation) * r));
        marginal += ad * d.covariance.unwrap_or_else(Matrix6::zeros) * ad.transpose();
    }
    BatchSolution {
        poses,
        landmarks: Vec::new(),
        last_pose_marginal: marginal,
        converged: false,
        final_cost: f64::NAN,
        iterations: 0,
    }
}

fn anchor_solution(pose: &Pose3) -> BatchSolution {
    BatchSolution {
        poses: vec![pose.clone(), pose.clone()],
        landmarks: Vec::new(),
        last_pose_marginal: Matrix6::zeros(),
        converged: true,
        final_cost: 0.0,
        iterations: 0,
    }
}

/// Orthorectifies `image` using the batch's last pose and landmarks.
pub fn batch_ortho(solution: &BatchSolution, image: &GrayImage, k: &CameraIntrinsics, frame: usize) -> Option<(Plane, OrthoImage)> {
    let last = solution.last_pose();
    let bm = gravity_aligned_frame(last).ok()?;
    let local: Vec<_> = solution.landmarks.iter().map(|(_, l)| bm.inverse_transform_point(l)).collect();
    let plane = fit_ground_plane(&local).ok()?;
    let ortho = orthorectify(image, k, &bm.between(last), &plane, frame).ok()?;
    Some((plane, ortho))
}

/// Runs the odometry front half over the whole flight. `initial_pose` is the
/// first camera pose in the odometry frame; only its attitude matters to
/// the filter, which sees relative increments.
pub fn run_vio(flight: &Flight, frames: &dyn FrameSource, initial_pose: &Pose3, options: &VioOptions) -> Result<Vec<BatchRecord>, PipelineError> {
    let distance = flight.odometry_distance();
    let mut batches = Vec::new();
    let mut first = 0;
    let mut previous = anchor_solution(initial_pose);
    for k in 1..flight.frame_count() {
        let traveled = distance[k] - distance[first];
        if traveled < MIN_BATCH_TRAVEL_M || !frames.has_frame(k) {
            continue;
        }
        let state = TriggerState {
            valid_features: valid_tracks(&flight.tracks, first, k, &distance).len(),
            traveled_m: traveled,
        };
        if !batch_trigger(&state) {
            continue;
        }
        let window_tracks: Vec<FeatureTrack> = flight
            .tracks
            .iter()
            .filter_map(|t| {
                let obs = t.within(first, k);
                (obs.len() >= 2).then(|| FeatureTrack { id: t.id, observations: obs.to_vec() })
            })
            .collect();
        let cleaned = reject_track_outliers(&window_tracks, first, k, options.ransac_gap, options.ransac_threshold_px, options.ransac_seed ^ first as u64);
        let window = BatchWindow {
            frame_indices: (first..=k).collect(),
            tracks: valid_tracks(&cleaned, first, k, &distance),
            imu_increments: flight.imu[first..k].iter().map(|i| i.delta.clone()).collect(),
            anchor_pose: previous.last_pose().clone(),
        };
        let (solution, dead_reckoned) = match solve_batch_map(&window, &flight.intrinsics, &options.solver) {
            Ok(s) => (s, false),
            Err(VioError::DidNotConverge(s)) => (*s, false),
            Err(_) => (dead_reckoned_solution(&window), true),
        };
        let increment = extract_increment(&previous, &solution);
        let (plane, ortho) = match batch_ortho(&solution, &frames.frame(k)?, &flight.intrinsics, k) {
            Some((p, o)) => (Some(p), Some(o)),
            None => (None, None),
        };
        batches.push(BatchRecord {
            first_frame: first,
            last_frame: k,
            solution: solution.clone(),
            dead_reckoned,
            increment,
            plane,
            ortho,
        });
        previous = solution;
        first = k;
    }
    if batches.is_empty() {
        return Err(PipelineError::NoBatches);
    }
    Ok(batches)
}

/// Ortho images paired with the true map pose of their center.
pub fn posed_orthos(flight: &Flight, batches: &[BatchRecord]) -> Vec<PosedOrtho> {
    batches
        .iter()
        .filter_map(|b| {
            let ortho = b.ortho.clone()?;
            let (xy, heading) = flight.true_planar(b.last_frame);
            Some(PosedOrtho {
                ortho,
                x: xy.x,
                y: xy.y,
                theta: heading,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Every particle at the true start pose.
    Accurate,
    /// Uniform over a square around a center, unknown heading.
    Inaccurate,
}

impl std::str::FromStr for InitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "accurate" => Ok(Self::Accurate),
            "inaccurate" => Ok(Self::Inaccurate),
            other => Err(format!("unknown init mode `{other}` (accurate | inaccurate)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MclOptions {
    pub particles: usize,
    pub init_mode: InitMode,
    /// Center of the initial square; the true start when `None`.
    pub init_center: Option<Vector2<f64>>,
    pub init_side_m: f64,
    pub scale_variance: f64,
    pub seed: u64,
}

impl Default for MclOptions {
    fn default() -> Self {
        Self {
            particles: DEFAULT_PARTICLES,
            init_mode: InitMode::Inaccurate,
            init_center: None,
            init_side_m: DEFAULT_INIT_SIDE_M,
            scale_variance: DEFAULT_SCALE_VARIANCE,
            seed: 0,
        }
    }
}

/// One line of the belief log.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct BeliefRow {
    pub step: usize,
    pub frame: usize,
    pub mean_x: f64,
    pub mean_y: f64,
    pub std_x: f64,
    pub std_y: f64,
    pub ess: f64,
    pub true_x: f64,
    pub true_y: f64,
    pub error_m: f64,
    pub odom_x: f64,
    pub odom_y: f64,
    pub odom_error_m: f64,
    /// Whether a measurement update happened at this step.
    pub updated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RunSummary {
    pub steps: usize,
    pub convergence_step: Option<usize>,
    pub rms_error_m: f64,
    pub odom_rms_error_m: f64,
    /// Over steps from convergence on; `NaN` without convergence.
    pub post_rms_error_m: f64,
    pub post_mean_error_m: f64,
    pub post_odom_rms_error_m: f64,
    pub post_odom_mean_error_m: f64,
}

impl RunSummary {
    pub fn from_rows(rows: &[BeliefRow]) -> Self {
        let rms = |v: &mut dyn Iterator<Item = f64>| {
            let (s, n) = v.fold((0.0, 0usize), |(s, n), e| (s + e * e, n + 1));
            if n == 0 {
                f64::NAN
            } else {
                (s / n as f64).sqrt()
            }
        };
        let mean = |v: &mut dyn Iterator<Item = f64>| {
            let (s, n) = v.fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
            if n == 0 {
                f64::NAN
            } else {
                s / n as f64
            }
        };
        let convergence_step = rows
            .iter()
            .find(|r| r.std_x < CONVERGENCE_STD_M && r.std_y < CONVERGENCE_STD_M)
            .map(|r| r.step);
        let post: Vec<&BeliefRow> = match convergence_step {
            Some(c) => rows.iter().filter(|r| r.step >= c).collect(),
            None => Vec::new(),
        };
        RunSummary {
            steps: rows.len(),
            convergence_step,
            rms_error_m: rms(&mut rows.iter().map(|r| r.error_m)),
            odom_rms_error_m: rms(&mut rows.iter().map(|r| r.odom_error_m)),
            post_rms_error_m: rms(&mut post.iter().map(|r| r.error_m)),
            post_mean_error_m: mean(&mut post.iter().map(|r| r.error_m)),
            post_odom_rms_error_m: rms(&mut post.iter().map(|r| r.odom_error_m)),
            post_odom_mean_error_m: mean(&mut post.iter().map(|r| r.odom_error_m)),
        }
    }
}

/// The filter diverged; `rows` holds the log up to the failing step.
#[derive(Debug, Error)]
#[error("{error} at step {}", rows.len())]
pub struct FilterDiverged {
    pub error: MclError,
    pub rows: Vec<BeliefRow>,
}

pub fn initial_particles(flight: &Flight, options: &MclOptions) -> ParticleSet {
    let (xy, heading) = flight.true_planar(0);
    match options.init_mode {
        InitMode::Accurate => ParticleSet {
            particles: vec![
                Particle {
                    x: xy.x,
                    y: xy.y,
                    phi: heading,
                    s: 1.0,
                    w: 1.0 / options.particles as f64,
                };
                options.particles
            ],
            generation: 0,
        },
        InitMode::Inaccurate => initialize(options.init_center.unwrap_or(xy), options.init_side_m, options.particles, options.seed),
    }
}

/// Runs the filter over precomputed batches. The odometry-only baseline
/// chains the same increments from the true start pose.
pub fn run_mcl(flight: &Flight, batches: &[BatchRecord], map: &GeoRaster, model: &ScoreModel, options: &MclOptions) -> Result<Vec<BeliefRow>, FilterDiverged> {
    let mut set = initial_particles(flight, options);
    let (mut odom, mut odom_heading) = flight.true_planar(0);
    let mut rows = Vec::with_capacity(batches.len());
    for (step, b) in batches.iter().enumerate() {
        let seed = options.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64 + 1);
        set = predict(&set, &b.increment, options.scale_variance, seed);
        let mut updated = false;
        if let Some(ortho) = &b.ortho {
            set = match update_weights(&set, ortho, map, model) {
                Ok(s) => s,
                Err(error) => return Err(FilterDiverged { error, rows }),
            };
            updated = true;
        }
        let summary = summarize(&set);
        if updated {
            set = resample(&set, seed ^ 0xA5A5_A5A5);
        }

        let (s, c) = odom_heading.sin_cos();
        let d = b.increment.delta_xy;
        odom += Vector2::new(c * d.x - s * d.y, s * d.x + c * d.y);
        odom_heading = wrap_angle(odom_heading + b.increment.delta_yaw);

        let (truth, _) = flight.true_planar(b.last_frame);
        rows.push(BeliefRow {
            step,
            frame: b.last_frame,
            mean_x: summary.mean_xy.x,
            mean_y: summary.mean_xy.y,
            std_x: summary.std_xy.x,
            std_y: summary.std_xy.y,
            ess: summary.effective_sample_size,
            true_x: truth.x,
            true_y: truth.y,
            error_m: (summary.mean_xy - truth).norm(),
            odom_x: odom.x,
            odom_y: odom.y,
            odom_error_m: (odom - truth).norm(),
            updated,
        });
    }
    Ok(rows)
}
