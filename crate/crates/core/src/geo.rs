//! Rigid transforms, the pinhole camera and gravity-aligned frames.
//!
//! Conventions used throughout the crate:
//!
//! * A [`Pose3`] maps points from its local frame into the parent frame,
//!   `p_parent = R * p_local + t`. A camera pose is therefore camera-to-world.
//! * Camera frames have `z` along the principal axis, `x` to the image right
//!   and `y` down the image.
//! * Tangent vectors and covariances are ordered `[rotation(3), translation(3)]`.
//! * The world frame is east/north/up in meters; gravity points along `-z`.

use nalgebra::{Matrix3, Matrix6, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("point is behind the camera (z = {0})")]
    PointBehindCamera(f64),
    #[error("principal axis is within 0.1 degrees of vertical")]
    DegenerateHeading,
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Smallest horizontal component of the principal axis, `sin(0.1°)`.
const MIN_HEADING_SIN: f64 = 1.745_328_365_898_309e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Pose3 {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    /// Covariance over `[rotation, translation]` exponential coordinates.
    pub covariance: Option<Matrix6<f64>>,
}

impl Default for Pose3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose3 {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
            covariance: None,
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
            covariance: None,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Builds a pose from a rotation matrix whose columns are the local axes
    /// expressed in the parent frame.
    pub fn from_axes(x: Vector3<f64>, y: Vector3<f64>, z: Vector3<f64>, origin: Vector3<f64>) -> Self {
        let m = Matrix3::from_columns(&[x, y, z]);
        let rot = Rotation3::from_matrix_unchecked(m);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), origin)
    }

    pub fn with_covariance(mut self, covariance: Matrix6<f64>) -> Self {
        self.covariance = Some(covariance);
        self
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `self ∘ other`: applies `other` first, then `self`. Covariance is dropped.
    pub fn compose(&self, other: &Pose3) -> Pose3 {
        let rotation = UnitQuaternion::new_normalize((self.rotation * other.rotation).into_inner());
        Pose3::new(rotation, self.rotation * other.translation + self.translation)
    }

    pub fn inverse(&self) -> Pose3 {
        let inv = self.rotation.inverse();
        Pose3::new(inv, -(inv * self.translation))
    }

    /// Relative transform `self⁻¹ ∘ other`.
    pub fn between(&self, other: &Pose3) -> Pose3 {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    /// SE(3) exponential of `[ω, ρ]`.
    pub fn exp(xi: &Vector6<f64>) -> Pose3 {
        let omega = Vector3::new(xi[0], xi[1], xi[2]);
        let rho = Vector3::new(xi[3], xi[4], xi[5]);
        let rotation = UnitQuaternion::from_scaled_axis(omega);
        Pose3::new(rotation, left_jacobian_so3(&omega) * rho)
    }

    /// SE(3) logarithm, returning `[ω, ρ]`.
    pub fn log(&self) -> Vector6<f64> {
        let omega = so3_log(&self.rotation);
        let rho = inverse_left_jacobian_so3(&omega) * self.translation;
        Vector6::new(omega[0], omega[1], omega[2], rho[0], rho[1], rho[2])
    }

    /// Heading of the local x axis projected on the horizontal plane.
    pub fn yaw(&self) -> f64 {
        let x = self.rotation * Vector3::x();
        x.y.atan2(x.x)
    }

    pub fn is_approx(&self, other: &Pose3, tol: f64) -> bool {
        (self.translation - other.translation).norm() <= tol
            && so3_log(&(self.rotation.inverse() * other.rotation)).norm() <= tol
    }
}

/// Rotation vector of a unit quaternion, accurate near the identity.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = q.quaternion();
    let (w, v) = if q.w < 0.0 { (-q.w, -q.imag()) } else { (q.w, q.imag()) };
    let n = v.norm();
    if n < 1e-12 {
        return v * (2.0 / w);
    }
    v * (2.0 * n.atan2(w) / n)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn left_jacobian_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = skew(omega);
    if theta2 < 1e-10 {
        return Matrix3::identity() + 0.5 * w + w * w / 6.0;
    }
    let theta = theta2.sqrt();
    Matrix3::identity()
        + (1.0 - theta.cos()) / theta2 * w
        + (theta - theta.sin()) / (theta2 * theta) * w * w
}

fn inverse_left_jacobian_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = skew(omega);
    let coeff = if theta2 < 1e-10 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Matrix3::identity() - 0.5 * w + coeff * w * w
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r >= PI {
        r - TAU
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 256.0,
            width: 640,
            height: 512,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), GeoError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeoError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeoError::InvalidIntrinsics("principal point outside image".into()));
        }
        Ok(())
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x <= (self.width - 1) as f64 && px.y <= (self.height - 1) as f64
    }

    /// Pixel centers of the upper-left, upper-right, lower-left and lower-right corners.
    pub fn corners(&self) -> [Vector2<f64>; 4] {
        let (w, h) = ((self.width - 1) as f64, (self.height - 1) as f64);
        [
            Vector2::new(0.0, 0.0),
            Vector2::new(w, 0.0),
            Vector2::new(0.0, h),
            Vector2::new(w, h),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray3 {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray3 {
    /// Normalizes `direction`.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + t * self.direction
    }
}

pub fn project_pixel(k: &CameraIntrinsics, point_in_camera: &Vector3<f64>) -> Result<Vector2<f64>, GeoError> {
    let p = point_in_camera;
    if p.z <= 0.0 {
        return Err(GeoError::PointBehindCamera(p.z));
    }
    Ok(Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// Back-projects a pixel to a world ray through the camera center.
pub fn pixel_ray(k: &CameraIntrinsics, camera_pose: &Pose3, pixel: &Vector2<f64>) -> Ray3 {
    let dir_cam = Vector3::new((pixel.x - k.cx) / k.fx, (pixel.y - k.cy) / k.fy, 1.0);
    Ray3::new(camera_pose.translation, camera_pose.rotation * dir_cam)
}

/// Pose of the gravity-aligned frame `{B}` attached to a camera: origin at the
/// camera center, `z` up, `x` along the horizontal projection of the
/// principal axis.
pub fn gravity_aligned_frame(camera_pose: &Pose3) -> Result<Pose3, GeoError> {
    let axis = camera_pose.rotation * Vector3::z();
    let horizontal = Vector3::new(axis.x, axis.y, 0.0);
    let norm = horizontal.norm();
    if norm < MIN_HEADING_SIN * axis.norm() {
        return Err(GeoError::DegenerateHeading);
    }
    let x = horizontal / norm;
    let z = Vector3::z();
    let y = z.cross(&x);
    Ok(Pose3::from_axes(x, y, z, camera_pose.translation))
}

/// Heading of the principal axis projected on the horizontal plane.
pub fn camera_heading(camera_pose: &Pose3) -> f64 {
    let axis = camera_pose.rotation * Vector3::z();
    axis.y.atan2(axis.x)
}

/// Camera pose expressed in its own gravity-aligned frame.
pub fn camera_in_gravity_frame(camera_pose: &Pose3) -> Result<(Pose3, Pose3), GeoError> {
    let frame = gravity_aligned_frame(camera_pose)?;
    Ok((frame.between(camera_pose), frame))
}

/// Camera pose with principal axis tilted `off_nadir` radians from straight
/// down, toward heading `yaw` (radians from +x, counter-clockwise).
pub fn oblique_camera_pose(position: Vector3<f64>, yaw: f64, off_nadir: f64) -> Pose3 {
    let (sy, cy) = yaw.sin_cos();
    let (sa, ca) = off_nadir.sin_cos();
    let z = Vector3::new(cy * sa, sy * sa, -ca);
    let x = Vector3::new(sy, -cy, 0.0);
    let y = z.cross(&x);
    Pose3::from_axes(x, y, z, position)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::default()
    }

    fn random_pose(v: &[f64; 6]) -> Pose3 {
        Pose3::new(
            UnitQuaternion::from_scaled_axis(Vector3::new(v[0], v[1], v[2])),
            Vector3::new(v[3], v[4], v[5]) * 10.0,
        )
    }

    #[test]
    fn compose_identities_and_translations() {
        let id = Pose3::identity();
        assert!(id.compose(&id).is_approx(&id, 0.0));
        let a = Pose3::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let b = Pose3::from_translation(Vector3::new(0.0, 2.0, 0.0));
        assert_eq!(a.compose(&b).translation, Vector3::new(1.0, 2.0, 0.0));
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let p = random_pose(&[0.3, -1.2, 0.7, 1.0, 2.0, -3.0]);
        assert!(p.compose(&p.inverse()).is_approx(&Pose3::identity(), 1e-12));
    }

    #[test]
    fn projection_examples() {
        let k = k();
        assert_eq!(project_pixel(&k, &Vector3::new(0.0, 0.0, 1.0)).unwrap(), Vector2::new(320.0, 256.0));
        assert_eq!(project_pixel(&k, &Vector3::new(1.0, 0.0, 1.0)).unwrap(), Vector2::new(820.0, 256.0));
        assert!(matches!(
            project_pixel(&k, &Vector3::new(0.0, 0.0, -1.0)),
            Err(GeoError::PointBehindCamera(_))
        ));
    }

    #[test]
    fn principal_ray() {
        let ray = pixel_ray(&k(), &Pose3::identity(), &Vector2::new(320.0, 256.0));
        assert_eq!(ray.origin, Vector3::zeros());
        assert!((ray.direction - Vector3::z()).norm() < 1e-15);

        let rot = Pose3::new(UnitQuaternion::from_axis_angle(&Vector3::x_axis(), FRAC_PI_2), Vector3::zeros());
        let ray = pixel_ray(&k(), &rot, &Vector2::new(320.0, 256.0));
        assert!((ray.direction - rot.rotation * Vector3::z()).norm() < 1e-15);
    }

    #[test]
    fn gravity_frame_examples() {
        let level = oblique_camera_pose(Vector3::new(5.0, 6.0, 7.0), 0.0, FRAC_PI_2);
        let b = gravity_aligned_frame(&level).unwrap();
        assert!(b.rotation.angle() < 1e-12);
        assert_eq!(b.translation, Vector3::new(5.0, 6.0, 7.0));

        let pitched = oblique_camera_pose(Vector3::zeros(), 0.0, 45f64.to_radians());
        let b = gravity_aligned_frame(&pitched).unwrap();
        assert!((b.rotation * Vector3::x() - Vector3::x()).norm() < 1e-12);

        let nadir = oblique_camera_pose(Vector3::zeros(), 0.3, 0.0);
        assert_eq!(gravity_aligned_frame(&nadir), Err(GeoError::DegenerateHeading));
    }

    #[test]
    fn exp_log_round_trip() {
        let xi = Vector6::new(0.1, -0.4, 0.9, 3.0, -2.0, 1.0);
        assert!((Pose3::exp(&xi).log() - xi).norm() < 1e-12);
        let tiny = Vector6::new(1e-9, 0.0, -2e-9, 0.5, 0.1, 0.0);
        assert!((Pose3::exp(&tiny).log() - tiny).norm() < 1e-15);
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), -PI);
        assert!((wrap_angle(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        assert_eq!(wrap_angle(0.5), 0.5);
    }

    proptest! {
        #[test]
        fn composition_is_associative(
            a in prop::array::uniform6(-1.0..1.0f64),
            b in prop::array::uniform6(-1.0..1.0f64),
            c in prop::array::uniform6(-1.0..1.0f64),
        ) {
            let (a, b, c) = (random_pose(&a), random_pose(&b), random_pose(&c));
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!(left.is_approx(&right, 1e-12));
        }

        #[test]
        fn projection_ray_round_trip(
            pose in prop::array::uniform6(-1.0..1.0f64),
            x in -50.0..50.0f64, y in -40.0..40.0f64, z in 1.0..200.0f64,
        ) {
            let pose = random_pose(&pose);
            let pc = Vector3::new(x, y, z);
            let pw = pose.transform_point(&pc);
            let px = project_pixel(&k(), &pc).unwrap();
            let ray = pixel_ray(&k(), &pose, &px);
            let t = (pw - ray.origin).dot(&ray.direction);
            prop_assert!((ray.at(t) - pw).norm() < 1e-9);
            prop_assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn gravity_frame_is_level(yaw in -3.2..3.2f64, tilt in 0.01..3.1f64, roll in -1.0..1.0f64) {
            let cam = oblique_camera_pose(Vector3::new(1.0, 2.0, 3.0), yaw, tilt);
            let cam = cam.compose(&Pose3::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), roll), Vector3::zeros()));
            let b = gravity_aligned_frame(&cam).unwrap();
            prop_assert!((b.rotation * Vector3::x()).z.abs() < 1e-12);
            prop_assert!((b.rotation * Vector3::z() - Vector3::z()).norm() < 1e-12);
        }
    }
}
