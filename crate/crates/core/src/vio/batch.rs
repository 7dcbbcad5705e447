//! Batch MAP estimation of camera poses and landmarks from feature tracks and
//! IMU increments, solved with Levenberg–Marquardt over a Schur-reduced
//! system.
//!
//! Poses are perturbed on the left in the batch frame: `R ← Exp(δθ)·R`,
//! `p ← p + δp`, tangent ordered `[δθ, δp]`. The marginal covariance of the
//! last pose uses the same convention.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix6, SMatrix, UnitQuaternion, Vector2, Vector3, Vector6};

use super::{triangulate_linear, VioError};
use crate::geo::{skew, CameraIntrinsics, Pose3};
use crate::track::FeatureTrack;

type Matrix6x3 = SMatrix<f64, 6, 3>;
type Matrix2x6 = SMatrix<f64, 2, 6>;

/// Variances are floored here so zero-noise increments stay invertible.
const MIN_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchWindow {
    /// Global frame indices, consecutive and ascending.
    pub frame_indices: Vec<usize>,
    /// Tracks restricted to the window; observation frames are global indices.
    pub tracks: Vec<FeatureTrack>,
    /// `imu_increments[i]` moves frame `i` to frame `i + 1`, with covariance.
    pub imu_increments: Vec<Pose3>,
    /// Pose of the first frame in the batch frame; held fixed.
    pub anchor_pose: Pose3,
}

impl BatchWindow {
    pub fn validate(&self) -> Result<(), VioError> {
        let n = self.frame_indices.len();
        if n < 2 {
            return Err(VioError::InvalidBatch(format!("{n} frames")));
        }
        if self.imu_increments.len() + 1 != n {
            return Err(VioError::InvalidBatch(format!("{} increments for {n} frames", self.imu_increments.len())));
        }
        let (first, last) = (self.frame_indices[0], self.frame_indices[n - 1]);
        for t in &self.tracks {
            if t.observations.len() < 2 || t.first_frame() < first || t.last_frame() > last {
                return Err(VioError::InvalidBatch(format!("track {} is not inside the window", t.id)));
            }
        }
        Ok(())
    }

    /// Poses obtained by chaining IMU increments from the anchor.
    pub fn dead_reckoning(&self) -> Vec<Pose3> {
        let mut poses = vec![self.anchor_pose.clone()];
        for d in &self.imu_increments {
            let next = poses.last().unwrap().compose(d);
            poses.push(next);
        }
        poses
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Huber threshold on the whitened reprojection error norm, pixels.
    pub huber_delta: f64,
    pub pixel_sigma: f64,
    pub max_iterations: usize,
    /// Relative cost decrease below which the solve is converged.
    pub relative_tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            huber_delta: 10.0,
            pixel_sigma: 1.0,
            max_iterations: 100,
            relative_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSolution {
    /// One pose per window frame, in the batch frame.
    pub poses: Vec<Pose3>,
    /// `(track id, position)` for every track that entered the solve.
    pub landmarks: Vec<(usize, Vector3<f64>)>,
    /// Covariance of the last pose over `[δθ, δp]`.
    pub last_pose_marginal: Matrix6<f64>,
    pub converged: bool,
    pub final_cost: f64,
    pub iterations: usize,
}

impl BatchSolution {
    /// Re-expresses poses, landmarks and the marginal in the frame where the
    /// batch frame has pose `frame`.
    pub fn transformed(&self, frame: &Pose3) -> BatchSolution {
        let r = frame.rotation_matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        BatchSolution {
            poses: self.poses.iter().map(|p| frame.compose(p)).collect(),
            landmarks: self.landmarks.iter().map(|(id, l)| (*id, frame.transform_point(l))).collect(),
            last_pose_marginal: ad * self.last_pose_marginal * ad.transpose(),
            ..self.clone()
        }
    }

    pub fn last_pose(&self) -> &Pose3 {
        self.poses.last().expect("solutions hold at least two poses")
    }
}

/// `ρ(e) = e²/2` inside `δ`, `δ(|e| − δ/2)` outside.
pub fn huber(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * a * a
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn huber_weight(e: f64, delta: f64) -> f64 {
    if e <= delta {
        1.0
    } else {
        delta / e
    }
}

fn perturb(pose: &Pose3, d: &[f64]) -> Pose3 {
    let dr = UnitQuaternion::from_scaled_axis(Vector3::new(d[0], d[1], d[2]));
    Pose3::new(dr * pose.rotation, pose.translation + Vector3::new(d[3], d[4], d[5]))
}

struct ImuFactor {
    inv_measurement: Pose3,
    information: Matrix6<f64>,
}

impl ImuFactor {
    fn new(measurement: &Pose3) -> Self {
        let cov = measurement.covariance.unwrap_or_else(Matrix6::zeros);
        let mut information = Matrix6::zeros();
        for i in 0..6 {
            information[(i, i)] = 1.0 / cov[(i, i)].max(MIN_VARIANCE);
        }
        Self {
            inv_measurement: measurement.inverse(),
            information,
        }
    }

    fn residual(&self, a: &Pose3, b: &Pose3) -> Vector6<f64> {
        self.inv_measurement.compose(&a.between(b)).log()
    }

    fn cost(&self, a: &Pose3, b: &Pose3) -> f64 {
        let r = self.residual(a, b);
        0.5 * (r.transpose() * self.information * r)[0]
    }

    /// Central-difference Jacobians with respect to both poses.
    fn jacobians(&self, a: &Pose3, b: &Pose3) -> (Matrix6<f64>, Matrix6<f64>) {
        const H: f64 = 1e-6;
        let mut ja = Matrix6::zeros();
        let mut jb = Matrix6::zeros();
        for k in 0..6 {
            let mut d = [0.0; 6];
            d[k] = H;
            let plus = self.residual(&perturb(a, &d), b);
            let plus_b = self.residual(a, &perturb(b, &d));
            d[k] = -H;
            let minus = self.residual(&perturb(a, &d), b);
            let minus_b = self.residual(a, &perturb(b, &d));
            ja.set_column(k, &((plus - minus) / (2.0 * H)));
            jb.set_column(k, &((plus_b - minus_b) / (2.0 * H)));
        }
        (ja, jb)
    }
}

struct Problem<'a> {
    k: &'a CameraIntrinsics,
    options: SolverOptions,
    /// `(local pose index, pixel)` per landmark.
    observations: Vec<Vec<(usize, Vector2<f64>)>>,
    imu: Vec<ImuFactor>,
}

struct Linearized {
    hpp: DMatrix<f64>,
    gp: DVector<f64>,
    /// Per landmark: `(pose index, W_ij)` blocks of the pose–landmark coupling.
    hpl: Vec<Vec<(usize, Matrix6x3)>>,
    hll: Vec<Matrix3<f64>>,
    gl: Vec<Vector3<f64>>,
}

impl Problem<'_> {
    fn n_free(&self) -> usize {
        self.imu.len()
    }

    /// Reprojection residual and Jacobians with respect to `[δθ, δp]` and
    /// the landmark, or `None` behind the camera.
    fn reprojection(&self, pose: &Pose3, l: &Vector3<f64>, z: &Vector2<f64>) -> Option<(Vector2<f64>, Matrix2x6, Matrix2x3<f64>)> {
        let rt = pose.rotation_matrix().transpose();
        let d = l - pose.translation;
        let pc = rt * d;
        if pc.z <= 1e-9 {
            return None;
        }
        let k = self.k;
        let iz = 1.0 / pc.z;
        let r = Vector2::new(k.fx * pc.x * iz + k.cx - z.x, k.fy * pc.y * iz + k.cy - z.y);
        let jp = Matrix2x3::new(k.fx * iz, 0.0, -k.fx * pc.x * iz * iz, 0.0, k.fy * iz, -k.fy * pc.y * iz * iz);
        let jl = jp * rt;
        let mut jx = Matrix2x6::zeros();
        jx.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jl * skew(&d)));
        jx.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-jl));
        Some((r, jx, jl))
    }

    fn cost(&self, poses: &[Pose3], landmarks: &[Vector3<f64>]) -> f64 {
        let (s, delta) = (self.options.pixel_sigma, self.options.huber_delta);
        let mut c = 0.0;
        for (j, obs) in self.observations.iter().enumerate() {
            for (i, z) in obs {
                let pc = poses[*i].inverse_transform_point(&landmarks[j]);
                if pc.z <= 1e-9 {
                    return f64::INFINITY;
                }
                let px = Vector2::new(self.k.fx * pc.x / pc.z + self.k.cx, self.k.fy * pc.y / pc.z + self.k.cy);
                c += huber((px - z).norm() / s, delta);
            }
        }
        for (i, f) in self.imu.iter().enumerate() {
            c += f.cost(&poses[i], &poses[i + 1]);
        }
        c
    }

    fn linearize(&self, poses: &[Pose3], landmarks: &[Vector3<f64>]) -> Linearized {
        let np = 6 * self.n_free();
        let mut hpp = DMatrix::zeros(np, np);
        let mut gp = DVector::zeros(np);
        let mut hpl = Vec::with_capacity(landmarks.len());
        let mut hll = Vec::with_capacity(landmarks.len());
        let mut gl = Vec::with_capacity(landmarks.len());
        let (s, delta) = (self.options.pixel_sigma, self.options.huber_delta);
        let inv_var = 1.0 / (s * s);

        for (j, obs) in self.observations.iter().enumerate() {
            let mut blocks = Vec::with_capacity(obs.len());
            let mut c = Matrix3::zeros();
            let mut g = Vector3::zeros();
            for (i, z) in obs {
                let Some((r, jx, jl)) = self.reprojection(&poses[*i], &landmarks[j], z) else { continue };
                let w = huber_weight(r.norm() / s, delta) * inv_var;
                c += w * jl.transpose() * jl;
                g += w * jl.transpose() * r;
                if *i > 0 {
                    let o = 6 * (i - 1);
                    let mut block = hpp.fixed_view_mut::<6, 6>(o, o);
                    block += w * jx.transpose() * jx;
                    let mut gb = gp.fixed_rows_mut::<6>(o);
                    gb += w * jx.transpose() * r;
                    blocks.push((i - 1, w * jx.transpose() * jl));
                }
            }
            hpl.push(blocks);
            hll.push(c);
            gl.push(g);
        }

        for (i, f) in self.imu.iter().enumerate() {
            let (a, b) = (&poses[i], &poses[i + 1]);
            let r = f.residual(a, b);
            let (ja, jb) = f.jacobians(a, b);
            let wr = f.information * r;
            let ob = 6 * i;
            {
                let mut block = hpp.fixed_view_mut::<6, 6>(ob, ob);
                block += jb.transpose() * f.information * jb;
            }
            {
                let mut gb = gp.fixed_rows_mut::<6>(ob);
                gb += jb.transpose() * wr;
            }
            if i > 0 {
                let oa = 6 * (i - 1);
                let cross = ja.transpose() * f.information * jb;
                {
                    let mut block = hpp.fixed_view_mut::<6, 6>(oa, oa);
                    block += ja.transpose() * f.information * ja;
                }
                {
                    let mut block = hpp.fixed_view_mut::<6, 6>(oa, ob);
                    block += cross;
                }
                {
                    let mut block = hpp.fixed_view_mut::<6, 6>(ob, oa);
                    block += cross.transpose();
                }
                let mut ga = gp.fixed_rows_mut::<6>(oa);
                ga += ja.transpose() * wr;
            }
        }
        Linearized { hpp, gp, hpl, hll, gl }
    }

    /// Reduced camera system `S` and right-hand side for damping `lambda`,
    /// plus the damped landmark blocks' inverses.
    fn reduce(&self, lin: &Linearized, lambda: f64) -> Option<(DMatrix<f64>, DVector<f64>, Vec<Matrix3<f64>>)> {
        let mut s = lin.hpp.clone();
        for d in 0..s.nrows() {
            s[(d, d)] += lambda * lin.hpp[(d, d)].max(1e-9);
        }
        let mut rhs = -lin.gp.clone();
        let mut cinvs = Vec::with_capacity(lin.hll.len());
        for (j, blocks) in lin.hpl.iter().enumerate() {
            let mut c = lin.hll[j];
            for d in 0..3 {
                c[(d, d)] += lambda * lin.hll[j][(d, d)] + 1e-9;
            }
            let cinv = c.try_inverse()?;
            cinvs.push(cinv);
            let wc: Vec<(usize, Matrix6x3)> = blocks.iter().map(|(i, w)| (*i, w * cinv)).collect();
            for (a, (ia, wca)) in wc.iter().enumerate() {
                let mut r = rhs.fixed_rows_mut::<6>(6 * ia);
                r += wca * lin.gl[j];
                for (ib, wb) in &blocks[a..] {
                    let m = wca * wb.transpose();
                    let mut block = s.fixed_view_mut::<6, 6>(6 * ia, 6 * ib);
                    block -= m;
                    if ia != ib {
                        let mut block = s.fixed_view_mut::<6, 6>(6 * ib, 6 * ia);
                        block -= m.transpose();
                    }
                }
            }
        }
        Some((s, rhs, cinvs))
    }
}

/// Solves the batch with IMU dead reckoning and linear triangulation as the
/// starting point.
pub fn solve_batch_map(batch: &BatchWindow, k: &CameraIntrinsics, options: &SolverOptions) -> Result<BatchSolution, VioError> {
    batch.validate()?;
    let poses = batch.dead_reckoning();
    let index: HashMap<usize, usize> = batch.frame_indices.iter().enumerate().map(|(i, f)| (*f, i)).collect();

    let mut ids = Vec::new();
    let mut landmarks = Vec::new();
    let mut observations = Vec::new();
    for t in &batch.tracks {
        let obs: Vec<(usize, Vector2<f64>)> = t.observations.iter().map(|o| (index[&o.frame], o.pixel)).collect();
        let views: Vec<(Pose3, Vector2<f64>)> = obs.iter().map(|(i, z)| (poses[*i].clone(), *z)).collect();
        if let Ok(l) = triangulate_linear(&views, k) {
            ids.push(t.id);
            landmarks.push(l);
            observations.push(obs);
        }
    }
    if landmarks.is_empty() || 2 * landmarks.len() < batch.tracks.len() {
        return Err(VioError::InsufficientLandmarks {
            triangulated: landmarks.len(),
            tracks: batch.tracks.len(),
        });
    }
    let problem = Problem {
        k,
        options: *options,
        observations,
        imu: batch.imu_increments.iter().map(ImuFactor::new).collect(),
    };
    optimize(&problem, poses, landmarks, ids)
}

fn optimize(problem: &Problem, mut poses: Vec<Pose3>, mut landmarks: Vec<Vector3<f64>>, ids: Vec<usize>) -> Result<BatchSolution, VioError> {
    let opts = problem.options;
    let mut cost = problem.cost(&poses, &landmarks);
    if !cost.is_finite() {
        return Err(VioError::InsufficientLandmarks {
            triangulated: 0,
            tracks: ids.len(),
        });
    }
    let mut lambda = 1e-4;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations && !converged {
        iterations += 1;
        if cost < 1e-15 {
            converged = true;
            break;
        }
        let lin = problem.linearize(&poses, &landmarks);
        let mut accepted = false;
        while lambda < 1e12 {
            let Some((s, rhs, cinvs)) = problem.reduce(&lin, lambda) else {
                lambda *= 10.0;
                continue;
            };
            let Some(chol) = s.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let dx = chol.solve(&rhs);
            let mut trial_poses = poses.clone();
            for i in 1..poses.len() {
                trial_poses[i] = perturb(&poses[i], dx.fixed_rows::<6>(6 * (i - 1)).as_slice());
            }
            let mut trial_landmarks = landmarks.clone();
            for (j, blocks) in lin.hpl.iter().enumerate() {
                let mut g = -lin.gl[j];
                for (i, w) in blocks {
                    g -= w.transpose() * dx.fixed_rows::<6>(6 * i);
                }
                trial_landmarks[j] += cinvs[j] * g;
            }
            let new_cost = problem.cost(&trial_poses, &trial_landmarks);
            if new_cost < cost {
                let decrease = (cost - new_cost) / cost;
                poses = trial_poses;
                landmarks = trial_landmarks;
                cost = new_cost;
                lambda = (lambda / 10.0).max(1e-12);
                converged = decrease < opts.relative_tolerance;
                accepted = true;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no damping level decreases the cost: a local minimum
            converged = true;
        }
    }

    let lin = problem.linearize(&poses, &landmarks);
    let last_pose_marginal = problem
        .reduce(&lin, 0.0)
        .and_then(|(s, _, _)| marginal_of_last(s))
        .ok_or(VioError::SingularInformation)?;
    let solution = BatchSolution {
        poses,
        landmarks: ids.into_iter().zip(landmarks).collect(),
        last_pose_marginal,
        converged,
        final_cost: cost,
        iterations,
    };
    if converged {
        Ok(solution)
    } else {
        Err(VioError::DidNotConverge(Box::new(solution)))
    }
}

fn marginal_of_last(s: DMatrix<f64>) -> Option<Matrix6<f64>> {
    let n = s.nrows();
    let chol = s.cholesky()?;
    let mut e = DMatrix::zeros(n, 6);
    for d in 0..6 {
        e[(n - 6 + d, d)] = 1.0;
    }
    let x = chol.solve(&e);
    let m: Matrix6<f64> = x.fixed_view::<6, 6>(n - 6, 0).into_owned();
    Some(0.5 * (m + m.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate_imu_increment, ImuNoise};
    use crate::track::Observation;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn huber_values() {
        assert_eq!(huber(20.0, 10.0), 150.0);
        assert_eq!(huber(-20.0, 10.0), 150.0);
        assert_eq!(huber(4.0, 10.0), 8.0);
        assert_eq!(huber(10.0, 10.0), 50.0);
    }

    /// Straight flight with landmarks on the ground, 40 frames at 2 m spacing.
    pub(crate) fn synthetic_batch(pixel_noise: f64, imu: ImuNoise, seed: u64) -> (BatchWindow, Vec<Pose3>) {
        let k = CameraIntrinsics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<Pose3> = (0..40)
            .map(|i| crate::geo::oblique_camera_pose(Vector3::new(2.0 * i as f64, 0.0, 92.0), 0.01 * i as f64, 0.92))
            .collect();
        let mut tracks = Vec::new();
        for id in 0..150 {
            let start = rng.gen_range(0..30);
            let len = rng.gen_range(8..=(40 - start).min(25));
            let p0 = Vector2::new(rng.gen_range(20.0..620.0), rng.gen_range(150.0..500.0));
            let ray = crate::geo::pixel_ray(&k, &truth[start], &p0);
            let l = ray.at(-ray.origin.z / ray.direction.z);
            let mut observations = Vec::new();
            for f in start..start + len {
                let Ok(mut px) = crate::geo::project_pixel(&k, &truth[f].inverse_transform_point(&l)) else { continue };
                px.x += pixel_noise * rng.sample::<f64, _>(StandardNormal);
                px.y += pixel_noise * rng.sample::<f64, _>(StandardNormal);
                observations.push(Observation { frame: 100 + f, pixel: px });
            }
            if observations.len() >= 2 {
                tracks.push(FeatureTrack { id, observations });
            }
        }
        let imu_increments = truth
            .windows(2)
            .map(|w| simulate_imu_increment(&w[0].between(&w[1]), 0.2, &imu, &mut rng))
            .collect();
        let batch = BatchWindow {
            frame_indices: (100..140).collect(),
            tracks,
            imu_increments,
            anchor_pose: truth[0].clone(),
        };
        (batch, truth)
    }

    #[test]
    fn noiseless_batch_recovers_truth() {
        let (batch, truth) = synthetic_batch(0.0, ImuNoise::zero(), 1);
        let sol = solve_batch_map(&batch, &CameraIntrinsics::default(), &SolverOptions::default()).unwrap();
        assert!(sol.final_cost < 1e-9, "cost {}", sol.final_cost);
        for (a, b) in sol.poses.iter().zip(&truth) {
            assert!(a.is_approx(b, 1e-6));
        }
        let m = sol.last_pose_marginal;
        assert!((m - m.transpose()).norm() < 1e-12);
        assert!(m.symmetric_eigen().eigenvalues.iter().all(|e| *e >= -1e-15));
    }

    #[test]
    fn gauge_shift_leaves_cost_unchanged() {
        let (batch, _) = synthetic_batch(1.0, ImuNoise::default().scaled(100.0), 2);
        let k = CameraIntrinsics::default();
        let a = solve_batch_map(&batch, &k, &SolverOptions::default()).unwrap();
        let mut shifted = batch.clone();
        shifted.anchor_pose.translation += Vector3::new(50.0, -20.0, 0.0);
        let b = solve_batch_map(&shifted, &k, &SolverOptions::default()).unwrap();
        assert!((a.final_cost - b.final_cost).abs() < 1e-9 * a.final_cost.max(1.0), "{} vs {}", a.final_cost, b.final_cost);
    }

    #[test]
    fn solution_improves_on_noisy_imu() {
        let noise = ImuNoise::default().scaled(100.0);
        let (batch, truth) = synthetic_batch(1.0, noise, 3);
        let sol = solve_batch_map(&batch, &CameraIntrinsics::default(), &SolverOptions::default()).unwrap();
        let dr = batch.dead_reckoning();
        let err = |p: &Pose3| (p.translation - truth.last().unwrap().translation).norm();
        assert!(sol.converged);
        assert!(err(sol.last_pose()) <= err(dr.last().unwrap()), "{} vs {}", err(sol.last_pose()), err(dr.last().unwrap()));
        assert!(sol.landmarks.len() <= batch.tracks.len());
    }

    #[test]
    fn huber_limits_outlier_influence() {
        let (mut batch, truth) = synthetic_batch(1.0, ImuNoise::default().scaled(100.0), 4);
        let clean = solve_batch_map(&batch, &CameraIntrinsics::default(), &SolverOptions::default()).unwrap();
        for t in batch.tracks.iter_mut().step_by(10) {
            t.observations[0].pixel += Vector2::new(80.0, -60.0);
        }
        let dirty = solve_batch_map(&batch, &CameraIntrinsics::default(), &SolverOptions::default()).unwrap();
        let err = |s: &BatchSolution| (s.last_pose().translation - truth.last().unwrap().translation).norm();
        assert!(err(&dirty) < err(&clean) + 0.5, "{} vs {}", err(&dirty), err(&clean));
    }

    #[test]
    fn marginal_grows_with_imu_noise() {
        let k = CameraIntrinsics::default();
        let trace = |noise: ImuNoise, seed| {
            let (batch, _) = synthetic_batch(1.0, noise, seed);
            let m = solve_batch_map(&batch, &k, &SolverOptions::default()).unwrap().last_pose_marginal;
            m.fixed_view::<3, 3>(3, 3).trace()
        };
        for seed in 0..20 {
            let base = ImuNoise::default();
            assert!(trace(base.scaled(2.0), 100 + seed) >= trace(base, 100 + seed), "seed {seed}");
        }
    }

    #[test]
    fn invalid_window_rejected() {
        let (mut batch, _) = synthetic_batch(0.0, ImuNoise::zero(), 5);
        batch.imu_increments.pop();
        assert!(matches!(
            solve_batch_map(&batch, &CameraIntrinsics::default(), &SolverOptions::default()),
            Err(VioError::InvalidBatch(_))
        ));
    }
}
