//! Single-channel images and georeferenced rasters.

use thiserror::Error;

/// Intensity used for pixels that carry no observation.
pub const INVALID: f32 = -1.0;

pub fn is_valid(v: f32) -> bool {
    v >= 0.0
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("meters per pixel must be positive, got {0}")]
    InvalidScale(f64),
    #[error("raster contains non-finite intensities")]
    NonFinite,
    #[error("pixel buffer has {got} entries, expected {expected}")]
    SizeMismatch { expected: usize, got: usize },
}

/// Row-major single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self, RasterError> {
        if data.len() != width * height {
            return Err(RasterError::SizeMismatch {
                expected: width * height,
                got: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(col, row));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integers). Returns `None` outside the image or when any contributing
    /// neighbor is [`INVALID`].
    #[inline]
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<f32> {
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let (maxu, maxv) = ((self.width - 1) as f64, (self.height - 1) as f64);
        if u > maxu || v > maxv {
            return None;
        }
        let c0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let r0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let fu = (u - c0 as f64) as f32;
        let fv = (v - r0 as f64) as f32;
        let i = r0 * self.width + c0;
        let c1 = if self.width > 1 { 1 } else { 0 };
        let r1 = if self.height > 1 { self.width } else { 0 };
        let (a, b, c, d) = (self.data[i], self.data[i + c1], self.data[i + r1], self.data[i + r1 + c1]);
        if !(is_valid(a) && is_valid(b) && is_valid(c) && is_valid(d)) {
            return None;
        }
        let top = a + (b - a) * fu;
        let bottom = c + (d - c) * fu;
        Some(top + (bottom - top) * fv)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|v| is_valid(**v)).count()
    }

    /// Separable Gaussian blur ignoring [`INVALID`] pixels.
    pub fn gaussian_blur(&self, sigma: f64) -> GrayImage {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
            .collect();
        let pass = |src: &GrayImage, horizontal: bool| -> GrayImage {
            let mut out = src.clone();
            for row in 0..src.height {
                for col in 0..src.width {
                    if !is_valid(src.get(col, row)) {
                        continue;
                    }
                    let (mut acc, mut wsum) = (0.0f32, 0.0f32);
                    for (k, w) in kernel.iter().enumerate() {
                        let off = k as isize - radius;
                        let (c, r) = if horizontal {
                            (col as isize + off, row as isize)
                        } else {
                            (col as isize, row as isize + off)
                        };
                        if c < 0 || r < 0 || c >= src.width as isize || r >= src.height as isize {
                            continue;
                        }
                        let v = src.get(c as usize, r as usize);
                        if is_valid(v) {
                            acc += w * v;
                            wsum += w;
                        }
                    }
                    out.set(col, row, acc / wsum);
                }
            }
            out
        };
        pass(&pass(self, true), false)
    }
}

/// Georeferenced raster. Pixel `(col, row)` has its center at world
/// `(origin_x + col·mpp, origin_y + row·mpp)`, so rows increase northward.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoRaster {
    pub image: GrayImage,
    pub origin_x: f64,
    pub origin_y: f64,
    pub meters_per_pixel: f64,
}

impl GeoRaster {
    pub fn new(image: GrayImage, origin_x: f64, origin_y: f64, meters_per_pixel: f64) -> Result<Self, RasterError> {
        if !(meters_per_pixel > 0.0 && meters_per_pixel.is_finite()) {
            return Err(RasterError::InvalidScale(meters_per_pixel));
        }
        if !image.is_finite() {
            return Err(RasterError::NonFinite);
        }
        Ok(Self {
            image,
            origin_x,
            origin_y,
            meters_per_pixel,
        })
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    #[inline]
    pub fn world_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin_x) / self.meters_per_pixel,
            (y - self.origin_y) / self.meters_per_pixel,
        )
    }

    #[inline]
    pub fn pixel_to_world(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.meters_per_pixel,
            self.origin_y + row * self.meters_per_pixel,
        )
    }

    /// World-coordinate bounds `(min_x, min_y, max_x, max_y)` of pixel centers.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let (x1, y1) = self.pixel_to_world((self.width() - 1) as f64, (self.height() - 1) as f64);
        (self.origin_x, self.origin_y, x1, y1)
    }

    pub fn contains_world(&self, x: f64, y: f64) -> bool {
        let (a, b, c, d) = self.bounds();
        x >= a && x <= c && y >= b && y <= d
    }

    #[inline]
    pub fn sample_world(&self, x: f64, y: f64) -> Option<f32> {
        let (u, v) = self.world_to_pixel(x, y);
        self.image.sample_bilinear(u, v)
    }

    /// Box-filter downsample by an integer factor.
    pub fn downsample(&self, factor: usize) -> GeoRaster {
        if factor <= 1 {
            return self.clone();
        }
        let (w, h) = (self.width() / factor, self.height() / factor);
        let norm = 1.0 / (factor * factor) as f32;
        let image = GrayImage::from_fn(w, h, |c, r| {
            let mut acc = 0.0;
            for dr in 0..factor {
                for dc in 0..factor {
                    acc += self.image.get(c * factor + dc, r * factor + dr);
                }
            }
            acc * norm
        });
        // New pixel centers sit at the middle of each block.
        let shift = (factor as f64 - 1.0) * 0.5 * self.meters_per_pixel;
        GeoRaster {
            image,
            origin_x: self.origin_x + shift,
            origin_y: self.origin_y + shift,
            meters_per_pixel: self.meters_per_pixel * factor as f64,
        }
    }
}
