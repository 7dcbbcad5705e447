use nalgebra::{DMatrix, Matrix4, Vector2, Vector3, Vector4};

use super::VioError;
use crate::geo::{CameraIntrinsics, Pose3};

/// Camera centers closer than this cannot triangulate anything.
const MIN_BASELINE_M: f64 = 1e-6;

/// Linear (DLT) triangulation from camera-to-world poses and pixels.
/// Works in normalized image coordinates around the mean camera center.
pub fn triangulate_linear(observations: &[(Pose3, Vector2<f64>)], k: &CameraIntrinsics) -> Result<Vector3<f64>, VioError> {
    if observations.len() < 2 {
        return Err(VioError::DegenerateGeometry("need two views"));
    }
    let center = observations.iter().fold(Vector3::zeros(), |a, (p, _)| a + p.translation) / observations.len() as f64;
    let baseline = observations
        .iter()
        .map(|(p, _)| (p.translation - center).norm())
        .fold(0.0, f64::max);
    if baseline < MIN_BASELINE_M {
        return Err(VioError::DegenerateGeometry("zero baseline"));
    }

    let mut a = DMatrix::<f64>::zeros(2 * observations.len(), 4);
    for (i, (pose, px)) in observations.iter().enumerate() {
        let x = (px.x - k.cx) / k.fx;
        let y = (px.y - k.cy) / k.fy;
        let rt = pose.rotation_matrix().transpose();
        let t = -rt * (pose.translation - center);
        let p = |r: usize| Vector4::new(rt[(r, 0)], rt[(r, 1)], rt[(r, 2)], t[r]);
        let (p0, p1, p2) = (p(0), p(1), p(2));
        let r0 = x * p2 - p0;
        let r1 = y * p2 - p1;
        let (n0, n1) = (r0.norm().max(1e-300), r1.norm().max(1e-300));
        a.row_mut(2 * i).copy_from(&(r0 / n0).transpose());
        a.row_mut(2 * i + 1).copy_from(&(r1 / n1).transpose());
    }
    let ata: Matrix4<f64> = (a.transpose() * &a).fixed_view::<4, 4>(0, 0).into_owned();
    let eig = ata.symmetric_eigen();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|i, j| eig.eigenvalues[*i].total_cmp(&eig.eigenvalues[*j]));
    let (l0, l1) = (eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]]);
    if l1 <= 1e-14 * eig.eigenvalues[order[3]] || l0 >= l1 {
        return Err(VioError::DegenerateGeometry("rank-deficient system"));
    }
    let h = eig.eigenvectors.column(order[0]);
    if h[3].abs() < 1e-12 * h.norm() {
        return Err(VioError::DegenerateGeometry("point at infinity"));
    }
    let point = Vector3::new(h[0], h[1], h[2]) / h[3] + center;
    for (pose, _) in observations {
        if pose.inverse_transform_point(&point).z <= 0.0 {
            return Err(VioError::DegenerateGeometry("point behind a camera"));
        }
    }
    Ok(point)
}
