use nalgebra::{Matrix6, Vector6};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ImuNoise;
use crate::geo::Pose3;

/// Relative motion between consecutive frames as reported by the IMU.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuIncrement {
    /// Index of the later frame; the increment runs from `frame_index - 1`.
    pub frame_index: usize,
    pub delta: Pose3,
    pub tau: f64,
}

/// Diagonal covariance over `[rotation, translation]` after `tau` seconds.
pub fn imu_covariance(noise: &ImuNoise, tau: f64) -> Matrix6<f64> {
    let (sr, st) = (noise.sigma_rotation(tau), noise.sigma_translation(tau));
    Matrix6::from_diagonal(&Vector6::new(sr * sr, sr * sr, sr * sr, st * st, st * st, st * st))
}

/// `true_delta ∘ Exp(ξ)` with `ξ` drawn from the random-walk model.
pub fn simulate_imu_increment(true_delta: &Pose3, tau: f64, noise: &ImuNoise, rng: &mut ChaCha8Rng) -> Pose3 {
    let tau = tau.max(0.0);
    let (sr, st) = (noise.sigma_rotation(tau), noise.sigma_translation(tau));
    let mut xi = Vector6::zeros();
    for i in 0..6 {
        let z: f64 = StandardNormal.sample(rng);
        xi[i] = z * if i < 3 { sr } else { st };
    }
    let mut out = true_delta.compose(&Pose3::exp(&xi));
    out.covariance = Some(imu_covariance(noise, tau));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::SeedableRng;

    #[test]
    fn empirical_std_matches_model() {
        let noise = ImuNoise::default();
        let delta = Pose3::new(UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3), Vector3::new(1.0, 2.0, 3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for tau in [1.0, 10.0, 100.0] {
            let mut sq = Vector6::<f64>::zeros();
            let n = 10_000;
            for _ in 0..n {
                let xi = delta.between(&simulate_imu_increment(&delta, tau, &noise, &mut rng)).log();
                sq += xi.component_mul(&xi);
            }
            for i in 0..6 {
                let want = if i < 3 { noise.sigma_rotation(tau) } else { noise.sigma_translation(tau) };
                let got = (sq[i] / n as f64).sqrt();
                assert!((got / want - 1.0).abs() < 0.05, "tau {tau} axis {i}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn zero_time_is_exact() {
        let delta = Pose3::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let out = simulate_imu_increment(&delta, 0.0, &ImuNoise::default(), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(out.is_approx(&delta, 1e-15));
        assert_eq!(out.covariance, Some(Matrix6::zeros()));
    }
}
