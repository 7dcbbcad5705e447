use nalgebra::Vector2;
use rayon::prelude::*;

use super::SimError;
use crate::geo::{pixel_ray, CameraIntrinsics, Pose3};
use crate::raster::{GeoRaster, GrayImage, INVALID};

/// Renders what a pinhole camera at `pose` sees of the flat textured ground
/// `z = 0`. Pixels whose ray misses the ground or leaves the texture are
/// [`INVALID`].
pub fn render_oblique(truth_texture: &GeoRaster, pose: &Pose3, intrinsics: &CameraIntrinsics) -> Result<GrayImage, SimError> {
    let height = pose.translation.z;
    if !(height > 0.0) {
        return Err(SimError::CameraBelowGround(height));
    }
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut data = vec![INVALID; w * h];
    data.par_chunks_mut(w).enumerate().for_each(|(row, line)| {
        for (col, out) in line.iter_mut().enumerate() {
            let ray = pixel_ray(intrinsics, pose, &Vector2::new(col as f64, row as f64));
            if ray.direction.z >= -1e-9 {
                continue;
            }
            let g = ray.at(-height / ray.direction.z);
            if let Some(v) = truth_texture.sample_world(g.x, g.y) {
                *out = v;
            }
        }
    });
    Ok(GrayImage { width: w, height: h, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::oblique_camera_pose;
    use nalgebra::Vector3;

    fn ramp() -> GeoRaster {
        // intensity encodes world x so footprints can be measured
        let img = GrayImage::from_fn(2000, 2000, |c, _| c as f32 / 2000.0);
        GeoRaster::new(img, -1000.0, -1000.0, 1.0).unwrap()
    }

    #[test]
    fn nadir_footprint_is_h_over_f() {
        let k = CameraIntrinsics::default();
        let pose = oblique_camera_pose(Vector3::new(0.0, 0.0, 92.0), 0.0, 0.0);
        let img = render_oblique(&ramp(), &pose, &k).unwrap();
        // camera x points to world -y for yaw 0, so world x varies down the image
        let (r, c) = (k.cy as usize, k.cx as usize);
        let step = (img.get(c, r + 1) - img.get(c, r)) as f64 * 2000.0;
        assert!((step.abs() - 92.0 / 500.0).abs() < 1e-3, "{step}");
    }

    #[test]
    fn sky_pixels_are_invalid() {
        let k = CameraIntrinsics::default();
        let pose = oblique_camera_pose(Vector3::new(0.0, 0.0, 92.0), 0.0, 80f64.to_radians());
        let img = render_oblique(&ramp(), &pose, &k).unwrap();
        assert_eq!(img.get(0, 0), INVALID);
        assert!(img.get(320, 511) >= 0.0);
    }

    #[test]
    fn below_ground_rejected() {
        let k = CameraIntrinsics::default();
        let pose = oblique_camera_pose(Vector3::new(0.0, 0.0, -1.0), 0.0, 0.5);
        assert!(matches!(render_oblique(&ramp(), &pose, &k), Err(SimError::CameraBelowGround(_))));
    }
}
