//! Procedural agricultural landscape: fields, hedgerows, forest, roads and a lake.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::raster::GrayImage;

#[inline]
fn hash2(seed: u64, x: i64, y: i64) -> u64 {
    // splitmix64 over the combined lattice key
    let mut z = seed
        .wrapping_add((x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth lattice value noise in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ValueNoise {
    pub seed: u64,
}

impl ValueNoise {
    pub fn at(&self, x: f64, y: f64) -> f64 {
        let (xf, yf) = (x.floor(), y.floor());
        let (xi, yi) = (xf as i64, yf as i64);
        let (tx, ty) = (x - xf, y - yf);
        let sx = tx * tx * (3.0 - 2.0 * tx);
        let sy = ty * ty * (3.0 - 2.0 * ty);
        let v00 = unit(hash2(self.seed, xi, yi));
        let v10 = unit(hash2(self.seed, xi + 1, yi));
        let v01 = unit(hash2(self.seed, xi, yi + 1));
        let v11 = unit(hash2(self.seed, xi + 1, yi + 1));
        let a = v00 + (v10 - v00) * sx;
        let b = v01 + (v11 - v01) * sx;
        a + (b - a) * sy
    }

    pub fn fbm(&self, x: f64, y: f64, octaves: u32) -> f64 {
        let (mut sum, mut amp, mut freq, mut norm) = (0.0, 1.0, 1.0, 0.0);
        for o in 0..octaves {
            let n = ValueNoise {
                seed: self.seed.wrapping_add(o as u64 * 7919),
            };
            sum += amp * n.at(x * freq, y * freq);
            norm += amp;
            amp *= 0.5;
            freq *= 2.0;
        }
        sum / norm
    }
}

#[derive(Debug, Clone, Copy)]
struct Field {
    base: f64,
    stripe_dir: (f64, f64),
    stripe_period: f64,
    stripe_amp: f64,
}

#[derive(Debug, Clone, Copy)]
struct Road {
    normal: (f64, f64),
    offset: f64,
    half_width: f64,
}

/// Landscape parameters drawn once per scenario.
pub struct Landscape {
    cell: f64,
    fields_per_axis: i64,
    fields: Vec<Field>,
    jitter: Vec<(f64, f64)>,
    roads: Vec<Road>,
    lake: (f64, f64, f64, f64),
    forest: ValueNoise,
    grain: ValueNoise,
    objects: u64,
}

const FIELD_SIZE_M: f64 = 130.0;
const TREE_CELL_M: f64 = 25.0;
const FARM_CELL_M: f64 = 160.0;

impl Landscape {
    pub fn new(rng: &mut ChaCha8Rng, extent_m: f64) -> Self {
        let seed: u64 = rng.gen();
        let fields_per_axis = (extent_m / FIELD_SIZE_M).ceil() as i64 + 2;
        let n = (fields_per_axis * fields_per_axis) as usize;
        let mut fields = Vec::with_capacity(n);
        let mut jitter = Vec::with_capacity(n);
        for _ in 0..n {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            fields.push(Field {
                base: rng.gen_range(0.25..0.8),
                stripe_dir: (angle.cos(), angle.sin()),
                stripe_period: rng.gen_range(6.0..18.0),
                stripe_amp: if rng.gen_bool(0.6) { rng.gen_range(0.02..0.08) } else { 0.0 },
            });
            jitter.push((rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)));
        }
        let n_roads = ((extent_m / 700.0).round() as usize).max(2);
        let roads = (0..n_roads)
            .map(|_| {
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let (nx, ny) = (angle.cos(), angle.sin());
                let px = rng.gen_range(0.1..0.9) * extent_m;
                let py = rng.gen_range(0.1..0.9) * extent_m;
                Road {
                    normal: (nx, ny),
                    offset: nx * px + ny * py,
                    half_width: rng.gen_range(3.0..5.0),
                }
            })
            .collect();
        let lake = (
            rng.gen_range(0.2..0.8) * extent_m,
            rng.gen_range(0.2..0.8) * extent_m,
            rng.gen_range(0.05..0.1) * extent_m,
            rng.gen_range(0.03..0.07) * extent_m,
        );
        Self {
            cell: FIELD_SIZE_M,
            fields_per_axis,
            fields,
            jitter,
            roads,
            lake,
            forest: ValueNoise { seed: seed ^ 0xF0E5 },
            grain: ValueNoise { seed: seed ^ 0x6A41 },
            objects: seed ^ 0x0B1E,
        }
    }

    fn site(&self, i: i64, j: i64) -> Option<(usize, f64, f64)> {
        if i < 0 || j < 0 || i >= self.fields_per_axis || j >= self.fields_per_axis {
            return None;
        }
        let idx = (j * self.fields_per_axis + i) as usize;
        let (jx, jy) = self.jitter[idx];
        Some((idx, (i as f64 + jx) * self.cell, (j as f64 + jy) * self.cell))
    }

    /// Intensity at world position `(x, y)` in meters.
    pub fn intensity(&self, x: f64, y: f64) -> f32 {
        let (ci, cj) = ((x / self.cell).floor() as i64, (y / self.cell).floor() as i64);
        let (mut d1, mut d2, mut best) = (f64::MAX, f64::MAX, 0usize);
        for dj in -1..=1 {
            for di in -1..=1 {
                if let Some((idx, sx, sy)) = self.site(ci + di, cj + dj) {
                    let d = (x - sx).hypot(y - sy);
                    if d < d1 {
                        d2 = d1;
                        d1 = d;
                        best = idx;
                    } else if d < d2 {
                        d2 = d;
                    }
                }
            }
        }
        let f = &self.fields[best];
        let phase = (x * f.stripe_dir.0 + y * f.stripe_dir.1) / f.stripe_period;
        let mut v = f.base + f.stripe_amp * (phase * std::f64::consts::TAU).sin();
        v += 0.06 * (self.grain.at(x / 9.0, y / 9.0) - 0.5);

        // hedgerow along Voronoi edges
        if d2 - d1 < 3.0 {
            v = 0.3 * v + 0.12;
        }

        let forest = self.forest.fbm(x / 420.0, y / 420.0, 3);
        if forest > 0.6 {
            let crowns = self.grain.fbm(x / 5.0 + 1000.0, y / 5.0, 2);
            v = 0.12 + 0.18 * crowns;
        }

        let (lx, ly, la, lb) = self.lake;
        let shore = 1.0 + 0.25 * (self.forest.at(x / 60.0 + 500.0, y / 60.0) - 0.5);
        if ((x - lx) / la).powi(2) + ((y - ly) / lb).powi(2) < shore * shore {
            v = 0.06 + 0.02 * self.grain.at(x / 40.0, y / 40.0);
        }

        if forest <= 0.6 {
            if let Some(t) = self.tree(x, y) {
                v = t;
            }
        }
        if let Some(b) = self.building(x, y) {
            v = b;
        }

        for r in &self.roads {
            if (r.normal.0 * x + r.normal.1 * y - r.offset).abs() < r.half_width {
                v = 0.88;
            }
        }
        v.clamp(0.0, 1.0) as f32
    }

    /// Free-standing tree crowns, at most one per lattice cell.
    fn tree(&self, x: f64, y: f64) -> Option<f64> {
        let (ci, cj) = ((x / TREE_CELL_M).floor() as i64, (y / TREE_CELL_M).floor() as i64);
        for dj in -1..=1 {
            for di in -1..=1 {
                let h = hash2(self.objects, ci + di, cj + dj);
                if unit(h) > 0.12 {
                    continue;
                }
                let h2 = hash2(h, 1, 2);
                let cx = (ci + di) as f64 * TREE_CELL_M + unit(h2) * TREE_CELL_M;
                let cy = (cj + dj) as f64 * TREE_CELL_M + unit(hash2(h2, 3, 4)) * TREE_CELL_M;
                let r = 2.5 + 3.0 * unit(hash2(h2, 5, 6));
                let d = (x - cx).hypot(y - cy);
                if d < r {
                    return Some(0.08 + 0.1 * d / r);
                }
            }
        }
        None
    }

    /// Farmsteads: a bright roof and a darker outbuilding, both rectangles.
    fn building(&self, x: f64, y: f64) -> Option<f64> {
        let (ci, cj) = ((x / FARM_CELL_M).floor() as i64, (y / FARM_CELL_M).floor() as i64);
        let h = hash2(self.objects ^ 0xFA53, ci, cj);
        if unit(h) > 0.35 {
            return None;
        }
        let u = |k: i64| unit(hash2(h, k, k + 1));
        let cx = (ci as f64 + 0.2 + 0.6 * u(1)) * FARM_CELL_M;
        let cy = (cj as f64 + 0.2 + 0.6 * u(2)) * FARM_CELL_M;
        let angle = u(3) * std::f64::consts::PI;
        let (s, c) = angle.sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        let (lx, ly) = (c * dx + s * dy, -s * dx + c * dy);
        let (a, b) = (6.0 + 10.0 * u(4), 4.0 + 5.0 * u(5));
        if lx.abs() < a && ly.abs() < b {
            return Some(0.6 + 0.35 * u(6));
        }
        let (ox, oy) = (lx - a - 8.0, ly - b * 0.5);
        if ox.abs() < 5.0 && oy.abs() < 4.0 + 4.0 * u(7) {
            return Some(0.3);
        }
        None
    }

    pub fn rasterize(&self, size_px: usize, mpp: f64) -> GrayImage {
        GrayImage::from_fn(size_px, size_px, |c, r| self.intensity(c as f64 * mpp, r as f64 * mpp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn landscape_is_deterministic_and_varied() {
        let a = Landscape::new(&mut ChaCha8Rng::seed_from_u64(3), 1000.0).rasterize(128, 8.0);
        let b = Landscape::new(&mut ChaCha8Rng::seed_from_u64(3), 1000.0).rasterize(128, 8.0);
        assert_eq!(a, b);
        let mean = a.data.iter().map(|v| *v as f64).sum::<f64>() / a.data.len() as f64;
        let var = a.data.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / a.data.len() as f64;
        assert!(var > 0.01, "landscape too flat: {var}");
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
