//! Orthorectification of an oblique frame onto a least-squares ground plane.
//!
//! Everything here lives in the gravity-aligned frame `{B_m}` of the last
//! camera of a batch: origin at the camera center, `z` up, `x` along the
//! horizontal heading.

use std::io;
use std::path::Path;

use nalgebra::{Matrix2, Matrix3, SMatrix, SVector, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::geo::{pixel_ray, CameraIntrinsics, Pose3, Ray3};
use crate::io::{read_pgm, write_mask_pgm, write_pgm};
use crate::raster::{is_valid, GrayImage};

/// Output grid side length in pixels.
pub const ORTHO_SIZE: usize = 500;
pub const ORTHO_MPP: f64 = 1.0;
pub const ORTHO_HALF_EXTENT_M: f64 = 250.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrthoError {
    #[error("plane fit needs at least three non-collinear points")]
    DegenerateConfiguration,
    #[error("ray does not hit the plane in front of its origin")]
    NoIntersection,
    #[error("corner quadruple has three collinear points")]
    DegenerateCorners,
    #[error("image corner {0} does not see the ground plane")]
    CornerRayMiss(usize),
}

/// `z = a·x + b·y + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub rmse: f64,
}

impl Plane {
    pub fn horizontal(z: f64) -> Self {
        Self { a: 0.0, b: 0.0, c: z, rmse: 0.0 }
    }

    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        self.a * x + self.b * y + self.c
    }

    pub fn unit_normal(&self) -> Vector3<f64> {
        Vector3::new(-self.a, -self.b, 1.0).normalize()
    }
}

pub fn fit_ground_plane(landmarks: &[Vector3<f64>]) -> Result<Plane, OrthoError> {
    if landmarks.len() < 3 {
        return Err(OrthoError::DegenerateConfiguration);
    }
    let n = landmarks.len() as f64;
    let mean = landmarks.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut sxx = Matrix2::zeros();
    let mut sxz = Vector2::zeros();
    for p in landmarks {
        let d = p - mean;
        let xy = Vector2::new(d.x, d.y);
        sxx += xy * xy.transpose();
        sxz += xy * d.z;
    }
    let eig = sxx.symmetric_eigen();
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if !(hi > 0.0) || lo <= 1e-12 * hi {
        return Err(OrthoError::DegenerateConfiguration);
    }
    let ab = sxx.try_inverse().ok_or(OrthoError::DegenerateConfiguration)? * sxz;
    let c = mean.z - ab.x * mean.x - ab.y * mean.y;
    let sq: f64 = landmarks
        .iter()
        .map(|p| (p.z - ab.x * p.x - ab.y * p.y - c).powi(2))
        .sum();
    Ok(Plane {
        a: ab.x,
        b: ab.y,
        c,
        rmse: (sq / n).sqrt(),
    })
}

pub fn intersect_ray_plane(ray: &Ray3, plane: &Plane) -> Result<Vector3<f64>, OrthoError> {
    let normal = Vector3::new(plane.a, plane.b, -1.0);
    let scale = normal.norm();
    let denom = normal.dot(&ray.direction) / (scale * ray.direction.norm());
    if denom.abs() < 1e-9 {
        return Err(OrthoError::NoIntersection);
    }
    let t = -(normal.dot(&ray.origin) + plane.c) / normal.dot(&ray.direction);
    if !(t >= 0.0) {
        return Err(OrthoError::NoIntersection);
    }
    Ok(ray.at(t))
}

fn has_collinear_triple(p: &[Vector2<f64>; 4]) -> bool {
    let scale = p.iter().map(|q| (q - p[0]).norm()).fold(0.0, f64::max).max(1e-300);
    let area = |a: usize, b: usize, c: usize| (p[b] - p[a]).perp(&(p[c] - p[a])).abs() / (scale * scale);
    [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
        .iter()
        .any(|&(a, b, c)| area(a, b, c) < 1e-10)
}

fn similarity_normalizer(p: &[Vector2<f64>; 4]) -> Matrix3<f64> {
    let c = p.iter().fold(Vector2::zeros(), |a, q| a + q) / 4.0;
    let d = p.iter().map(|q| (q - c).norm()).sum::<f64>() / 4.0;
    let s = std::f64::consts::SQRT_2 / d;
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// Exact homography taking each `from[i]` to `to[i]`, scaled so `H[(2,2)] = 1`.
pub fn homography_from_corners(from: &[Vector2<f64>; 4], to: &[Vector2<f64>; 4]) -> Result<Matrix3<f64>, OrthoError> {
    if has_collinear_triple(from) || has_collinear_triple(to) {
        return Err(OrthoError::DegenerateCorners);
    }
    let (t1, t2) = (similarity_normalizer(from), similarity_normalizer(to));
    let apply = |t: &Matrix3<f64>, p: &Vector2<f64>| {
        let q = t * Vector3::new(p.x, p.y, 1.0);
        Vector2::new(q.x, q.y)
    };
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut rhs = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (p, q) = (apply(&t1, &from[i]), apply(&t2, &to[i]));
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[p.x, p.y, 1.0, 0.0, 0.0, 0.0, -q.x * p.x, -q.x * p.y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, p.x, p.y, 1.0, -q.y * p.x, -q.y * p.y]);
        rhs[r] = q.x;
        rhs[r + 1] = q.y;
    }
    let h = a.lu().solve(&rhs).ok_or(OrthoError::DegenerateCorners)?;
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
    let full = t2.try_inverse().ok_or(OrthoError::DegenerateCorners)? * hn * t1;
    if full[(2, 2)].abs() < 1e-12 * full.norm() {
        return Err(OrthoError::DegenerateCorners);
    }
    Ok(full / full[(2, 2)])
}

pub fn apply_homography(h: &Matrix3<f64>, p: &Vector2<f64>) -> Option<Vector2<f64>> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    (q.z.abs() > 1e-300).then(|| Vector2::new(q.x / q.z, q.y / q.z))
}

/// Top-down view around the camera in `{B_m}`. Grid pixel `(col, row)` has
/// its center at `x = col - 250`, `y = row - 250`, so the camera sits on a
/// pixel center like the map's own pixels do.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoImage {
    pub pixels: GrayImage,
    pub mask: Vec<bool>,
    /// Global index of the frame that was warped.
    pub center_frame: usize,
    pub camera_height_above_plane: f64,
}

impl OrthoImage {
    pub fn grid_to_local(col: f64, row: f64) -> (f64, f64) {
        (col * ORTHO_MPP - ORTHO_HALF_EXTENT_M, row * ORTHO_MPP - ORTHO_HALF_EXTENT_M)
    }

    pub fn local_to_grid(x: f64, y: f64) -> (f64, f64) {
        ((x + ORTHO_HALF_EXTENT_M) / ORTHO_MPP, (y + ORTHO_HALF_EXTENT_M) / ORTHO_MPP)
    }

    pub fn width(&self) -> usize {
        self.pixels.width
    }

    pub fn height(&self) -> usize {
        self.pixels.height
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn is_valid(&self, col: usize, row: usize) -> bool {
        self.mask[row * self.pixels.width + col]
    }

    /// Writes `ortho_%06d.pgm` and `mask_%06d.pgm` into `dir`.
    pub fn write_pair(&self, dir: &Path) -> io::Result<()> {
        let k = self.center_frame;
        write_pgm(&dir.join(format!("ortho_{k:06}.pgm")), &self.pixels)?;
        write_mask_pgm(&dir.join(format!("mask_{k:06}.pgm")), self.width(), self.height(), &self.mask)
    }

    /// Reads an image/mask pair written by [`Self::write_pair`]. Without a
    /// mask every valid pixel counts.
    pub fn read_pair(ortho: &Path, mask: Option<&Path>, center_frame: usize) -> io::Result<Self> {
        let pixels = read_pgm(ortho)?;
        if pixels.width != ORTHO_SIZE || pixels.height != ORTHO_SIZE {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("ortho image must be {ORTHO_SIZE}x{ORTHO_SIZE}, got {}x{}", pixels.width, pixels.height),
            ));
        }
        let mask = match mask {
            Some(path) => {
                let m = read_pgm(path)?;
                if (m.width, m.height) != (pixels.width, pixels.height) {
                    return Err(io::Error::new(io::ErrorKind::InvalidData, "mask and ortho sizes differ"));
                }
                m.data.iter().zip(&pixels.data).map(|(m, v)| *m > 0.5 && is_valid(*v)).collect()
            }
            None => pixels.data.iter().map(|v| is_valid(*v)).collect(),
        };
        Ok(Self {
            pixels,
            mask,
            center_frame,
            camera_height_above_plane: f64::NAN,
        })
    }
}

/// Warps `image` onto `plane` as seen from `camera_pose` (both in `{B_m}`).
/// Corner rays define a homography from image pixels to ground `(x, y)`;
/// each output pixel is sampled through its inverse.
pub fn orthorectify(
    image: &GrayImage,
    intrinsics: &CameraIntrinsics,
    camera_pose: &Pose3,
    plane: &Plane,
    center_frame: usize,
) -> Result<OrthoImage, OrthoError> {
    let pixel_corners = intrinsics.corners();
    let mut ground = [Vector2::zeros(); 4];
    for (i, px) in pixel_corners.iter().enumerate() {
        let hit = intersect_ray_plane(&pixel_ray(intrinsics, camera_pose, px), plane).map_err(|_| OrthoError::CornerRayMiss(i))?;
        ground[i] = Vector2::new(hit.x, hit.y);
    }
    let h = homography_from_corners(&pixel_corners, &ground)?;
    let inv = h.try_inverse().ok_or(OrthoError::DegenerateCorners)?;
    let (w, hgt) = (ORTHO_SIZE, ORTHO_SIZE);
    let (maxu, maxv) = ((image.width - 1) as f64, (image.height - 1) as f64);
    let mut pixels = vec![0.0f32; w * hgt];
    let mut mask = vec![false; w * hgt];
    pixels
        .par_chunks_mut(w)
        .zip(mask.par_chunks_mut(w))
        .enumerate()
        .for_each(|(row, (line, valid))| {
            for col in 0..w {
                let (x, y) = OrthoImage::grid_to_local(col as f64, row as f64);
                let q = inv * Vector3::new(x, y, 1.0);
                if q.z.abs() < 1e-300 {
                    continue;
                }
                let (u, v) = (q.x / q.z, q.y / q.z);
                if !(u >= 0.0 && v >= 0.0 && u <= maxu && v <= maxv) {
                    continue;
                }
                if let Some(value) = image.sample_bilinear(u, v) {
                    line[col] = value;
                    valid[col] = true;
                }
            }
        });
    let c = camera_pose.translation;
    Ok(OrthoImage {
        pixels: GrayImage { width: w, height: hgt, data: pixels },
        mask,
        center_frame,
        camera_height_above_plane: c.z - plane.height_at(c.x, c.y),
    })
}
