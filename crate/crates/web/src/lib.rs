//! Browser demo. A synthetic map is generated in the page; clicking on it
//! renders the oblique camera view from that spot, orthorectifies it and
//! scores it against the map around the true position.

use nalgebra::Vector3;
use ortholoc::geo::{gravity_aligned_frame, oblique_camera_pose};
use ortholoc::metrics::{score_grid, GridRegion, MetricKind};
use ortholoc::ortho::{orthorectify, OrthoImage, Plane};
use ortholoc::raster::{is_valid, GeoRaster, GrayImage};
use ortholoc::sim::{render_oblique, synthesize_map, Appearance, ScenarioConfig};
use wasm_bindgen::prelude::*;

/// Map, camera and the most recent view, independent of the JS bindings.
pub struct Scene {
    config: ScenarioConfig,
    truth: GeoRaster,
    map: GeoRaster,
    view: Option<View>,
}

struct View {
    x: f64,
    y: f64,
    heading: f64,
    camera: GrayImage,
    ortho: OrthoImage,
}

/// Score surface around the view position, normalized so the best cell is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSurface {
    pub width: usize,
    pub height: usize,
    pub normalized: Vec<f64>,
    /// Offset of the best cell from the true position, meters.
    pub best_dx: f64,
    pub best_dy: f64,
    pub best_score: f64,
}

impl Scene {
    pub fn new(seed: u64, size_px: usize, appearance_gap: bool) -> Result<Self, String> {
        let config = ScenarioConfig {
            seed,
            map_size_px: size_px,
            appearance: if appearance_gap { Appearance::default() } else { Appearance::identity() },
            ..Default::default()
        };
        let (truth, map) = synthesize_map(&config).map_err(|e| e.to_string())?;
        Ok(Self { config, truth, map, view: None })
    }

    pub fn map(&self) -> &GeoRaster {
        &self.map
    }

    /// Camera over map pixel `(col, row)` looking along `heading` (radians
    /// from +x). Keeps the view for [`Self::score_surface`].
    pub fn fly_to(&mut self, col: f64, row: f64, heading: f64) -> Result<(), String> {
        let (x, y) = self.map.pixel_to_world(col, row);
        let altitude = self.config.altitude_m;
        let pose = oblique_camera_pose(Vector3::new(x, y, altitude), heading, self.config.camera_off_nadir_deg.to_radians());
        let camera = render_oblique(&self.truth, &pose, &self.config.camera).map_err(|e| e.to_string())?;
        let frame = gravity_aligned_frame(&pose).map_err(|e| e.to_string())?;
        let ortho = orthorectify(&camera, &self.config.camera, &frame.between(&pose), &Plane::horizontal(-altitude), 0).map_err(|e| e.to_string())?;
        self.view = Some(View { x, y, heading, camera, ortho });
        Ok(())
    }

    pub fn camera(&self) -> Option<&GrayImage> {
        self.view.as_ref().map(|v| &v.camera)
    }

    pub fn ortho(&self) -> Option<&OrthoImage> {
        self.view.as_ref().map(|v| &v.ortho)
    }

    /// Scores the current view over a square of translations centered on
    /// the true position, at the true heading and unit scale.
    pub fn score_surface(&self, metric: MetricKind, half_width_m: f64, step_m: f64) -> Result<ScoreSurface, String> {
        let v = self.view.as_ref().ok_or("no view yet")?;
        let region = GridRegion {
            x0: v.x - half_width_m,
            y0: v.y - half_width_m,
            x1: v.x + half_width_m,
            y1: v.y + half_width_m,
            step: step_m,
        };
        let grid = score_grid(&v.ortho, &self.map, metric, &region, v.heading, 1.0).map_err(|e| e.to_string())?;
        let (bc, br, best_score) = grid.best(metric).ok_or("no cell could be scored")?;
        let finite = grid.values.iter().copied().filter(|s| !s.is_nan());
        let lo = finite.clone().fold(f64::INFINITY, f64::min);
        let hi = finite.fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(f64::MIN_POSITIVE);
        let normalized = grid
            .values
            .iter()
            .map(|s| match (s.is_nan(), metric.higher_is_better()) {
                (true, _) => f64::NAN,
                (false, true) => (s - lo) / span,
                (false, false) => (hi - s) / span,
            })
            .collect();
        let (bx, by) = region.position(bc, br);
        Ok(ScoreSurface {
            width: grid.width,
            height: grid.height,
            normalized,
            best_dx: bx - v.x,
            best_dy: by - v.y,
            best_score,
        })
    }
}

/// Grayscale to RGBA; invalid pixels become transparent.
pub fn gray_rgba(image: &GrayImage) -> Vec<u8> {
    image
        .data
        .iter()
        .flat_map(|v| {
            if is_valid(*v) {
                let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                [g, g, g, 255]
            } else {
                [0, 0, 0, 0]
            }
        })
        .collect()
}

/// Dark blue through red to pale yellow; NaN is transparent.
pub fn heat_rgba(values: &[f64]) -> Vec<u8> {
    const STOPS: [[f64; 3]; 4] = [[20.0, 12.0, 60.0], [150.0, 30.0, 90.0], [235.0, 110.0, 30.0], [252.0, 250.0, 170.0]];
    values
        .iter()
        .flat_map(|v| {
            if v.is_nan() {
                return [0, 0, 0, 0];
            }
            let t = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
            let i = (t.floor() as usize).min(STOPS.len() - 2);
            let f = t - i as f64;
            let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
            [c(0), c(1), c(2), 255]
        })
        .collect()
}

#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
}

#[wasm_bindgen]
pub struct Heatmap {
    surface: ScoreSurface,
}

#[wasm_bindgen]
impl Heatmap {
    pub fn width(&self) -> usize {
        self.surface.width
    }

    pub fn height(&self) -> usize {
        self.surface.height
    }

    pub fn rgba(&self) -> Vec<u8> {
        heat_rgba(&self.surface.normalized)
    }

    pub fn best_dx(&self) -> f64 {
        self.surface.best_dx
    }

    pub fn best_dy(&self) -> f64 {
        self.surface.best_dy
    }

    pub fn best_score(&self) -> f64 {
        self.surface.best_score
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size_px: usize, appearance_gap: bool) -> Result<Demo, JsError> {
        Ok(Self {
            scene: Scene::new(seed.into(), size_px, appearance_gap).map_err(|e| JsError::new(&e))?,
        })
    }

    pub fn map_size(&self) -> usize {
        self.scene.map().width()
    }

    pub fn map_rgba(&self) -> Vec<u8> {
        gray_rgba(&self.scene.map().image)
    }

    pub fn fly_to(&mut self, col: f64, row: f64, heading_deg: f64) -> Result<(), JsError> {
        self.scene.fly_to(col, row, heading_deg.to_radians()).map_err(|e| JsError::new(&e))
    }

    pub fn camera_width(&self) -> usize {
        self.scene.camera().map_or(0, |c| c.width)
    }

    pub fn camera_height(&self) -> usize {
        self.scene.camera().map_or(0, |c| c.height)
    }

    pub fn camera_rgba(&self) -> Vec<u8> {
        self.scene.camera().map(gray_rgba).unwrap_or_default()
    }

    pub fn ortho_rgba(&self) -> Vec<u8> {
        self.scene
            .ortho()
            .map(|o| {
                let mut rgba = gray_rgba(&o.pixels);
                for (px, m) in rgba.chunks_mut(4).zip(&o.mask) {
                    if !m {
                        px[3] = 0;
                    }
                }
                rgba
            })
            .unwrap_or_default()
    }

    pub fn heatmap(&self, metric: &str, half_width_m: f64, step_m: f64) -> Result<Heatmap, JsError> {
        let kind: MetricKind = metric.parse().map_err(|e: String| JsError::new(&e))?;
        let surface = self.scene.score_surface(kind, half_width_m, step_m).map_err(|e| JsError::new(&e))?;
        Ok(Heatmap { surface })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_peaks_near_the_true_position_without_appearance_gap() {
        let mut scene = Scene::new(4, 1024, false).unwrap();
        scene.fly_to(512.0, 512.0, 0.7).unwrap();
        let n = scene.ortho().unwrap().valid_count();
        assert!(n > 10_000, "{n}");
        let s = scene.score_surface(MetricKind::Zncc, 20.0, 2.0).unwrap();
        assert_eq!((s.width, s.height), (21, 21));
        assert!(s.best_dx.hypot(s.best_dy) <= 2.0, "{} {}", s.best_dx, s.best_dy);
        assert!(s.best_score > 0.9);
        let ones = s.normalized.iter().filter(|v| **v == 1.0).count();
        assert!(ones >= 1);
    }

    #[test]
    fn surface_needs_a_view() {
        let scene = Scene::new(1, 600, true).unwrap();
        assert!(scene.score_surface(MetricKind::Ssd, 10.0, 1.0).is_err());
    }

    #[test]
    fn color_maps() {
        let img = GrayImage::from_vec(2, 1, vec![0.5, -1.0]).unwrap();
        assert_eq!(gray_rgba(&img), vec![128, 128, 128, 255, 0, 0, 0, 0]);
        let heat = heat_rgba(&[0.0, 1.0, f64::NAN]);
        assert_eq!(&heat[..4], &[20, 12, 60, 255]);
        assert_eq!(&heat[4..8], &[252, 250, 170, 255]);
        assert_eq!(heat[11], 0);
    }
}
