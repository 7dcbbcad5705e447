//! Masked area-matching scores and the pose-hypothesis matching function.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ortho::{OrthoImage, ORTHO_HALF_EXTENT_M, ORTHO_SIZE};
use crate::raster::{is_valid, GeoRaster};

/// Fewest valid pixels a score is computed over.
pub const MIN_VALID_PIXELS: usize = 64;
pub const MIN_SCALE: f64 = 0.5;
pub const MAX_SCALE: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("only {0} valid pixels, need {MIN_VALID_PIXELS}")]
    TooFewValidPixels(usize),
    #[error("a masked patch has zero variance")]
    ZeroVariance,
    #[error("map patch has zero mean")]
    ZeroMean,
    #[error("patch shapes differ")]
    ShapeMismatch,
    #[error("hypothesis subimage leaves the map")]
    OutOfMap,
    #[error("map must be 1 m/px, got {0}")]
    UnsupportedResolution(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MetricKind {
    Sad,
    Ssd,
    Cc,
    Ncc,
    Zncc,
    Nzmssd,
    Moravec,
    Nssd,
    Zmssd,
    Zmsad,
    Lsssd,
    Lssad,
}

impl MetricKind {
    pub const ALL: [MetricKind; 12] = [
        MetricKind::Sad,
        MetricKind::Ssd,
        MetricKind::Cc,
        MetricKind::Ncc,
        MetricKind::Zncc,
        MetricKind::Nzmssd,
        MetricKind::Moravec,
        MetricKind::Nssd,
        MetricKind::Zmssd,
        MetricKind::Zmsad,
        MetricKind::Lsssd,
        MetricKind::Lssad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Sad => "SAD",
            MetricKind::Ssd => "SSD",
            MetricKind::Cc => "CC",
            MetricKind::Ncc => "NCC",
            MetricKind::Zncc => "ZNCC",
            MetricKind::Nzmssd => "NZMSSD",
            MetricKind::Moravec => "MORAVEC",
            MetricKind::Nssd => "NSSD",
            MetricKind::Zmssd => "ZMSSD",
            MetricKind::Zmsad => "ZMSAD",
            MetricKind::Lsssd => "LSSSD",
            MetricKind::Lssad => "LSSAD",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, MetricKind::Cc | MetricKind::Ncc | MetricKind::Zncc | MetricKind::Moravec)
    }

    /// Kinds whose value grows with the number of pixels summed.
    pub fn is_sum_based(self) -> bool {
        matches!(
            self,
            MetricKind::Sad | MetricKind::Ssd | MetricKind::Cc | MetricKind::Zmssd | MetricKind::Zmsad | MetricKind::Lsssd | MetricKind::Lssad
        )
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown metric '{s}'"))
    }
}

fn has_spread(centered_sq: f64, raw_sq: f64) -> bool {
    centered_sq > 1e-20 * raw_sq.max(1e-300)
}

/// Score over paired samples that are all valid. `a` is the ortho patch,
/// `b` the map patch. Sums are not normalized by the pixel count.
pub fn score_pairs(kind: MetricKind, a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::ShapeMismatch);
    }
    let n = a.len();
    if n < MIN_VALID_PIXELS {
        return Err(MetricError::TooFewValidPixels(n));
    }
    let pairs = || a.iter().zip(b);
    let nf = n as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / nf, b.iter().sum::<f64>() / nf);
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    let (mut caa, mut cbb, mut cab) = (0.0, 0.0, 0.0);
    for (x, y) in pairs() {
        saa += x * x;
        sbb += y * y;
        sab += x * y;
        let (dx, dy) = (x - ma, y - mb);
        caa += dx * dx;
        cbb += dy * dy;
        cab += dx * dy;
    }
    let need_raw = || if saa > 0.0 && sbb > 0.0 { Ok(()) } else { Err(MetricError::ZeroVariance) };
    let need_centered = || {
        if has_spread(caa, saa) && has_spread(cbb, sbb) {
            Ok(())
        } else {
            Err(MetricError::ZeroVariance)
        }
    };
    let ratio = || if mb.abs() > 1e-300 { Ok(ma / mb) } else { Err(MetricError::ZeroMean) };
    Ok(match kind {
        MetricKind::Sad => pairs().map(|(x, y)| (x - y).abs()).sum(),
        MetricKind::Ssd => pairs().map(|(x, y)| (x - y).powi(2)).sum(),
        MetricKind::Cc => sab,
        MetricKind::Ncc => {
            need_raw()?;
            sab / (saa * sbb).sqrt()
        }
        MetricKind::Zncc => {
            need_centered()?;
            cab / (caa * cbb).sqrt()
        }
        MetricKind::Nzmssd => {
            need_centered()?;
            let (na, nb) = (caa.sqrt(), cbb.sqrt());
            pairs().map(|(x, y)| ((x - ma) / na - (y - mb) / nb).powi(2)).sum()
        }
        MetricKind::Moravec => {
            need_centered()?;
            2.0 * cab / (caa + cbb)
        }
        MetricKind::Nssd => {
            need_raw()?;
            let (na, nb) = (saa.sqrt(), sbb.sqrt());
            pairs().map(|(x, y)| (x / na - y / nb).powi(2)).sum()
        }
        MetricKind::Zmssd => pairs().map(|(x, y)| ((x - ma) - (y - mb)).powi(2)).sum(),
        MetricKind::Zmsad => pairs().map(|(x, y)| ((x - ma) - (y - mb)).abs()).sum(),
        MetricKind::Lsssd => {
            let r = ratio()?;
            pairs().map(|(x, y)| (x - r * y).powi(2)).sum()
        }
        MetricKind::Lssad => {
            let r = ratio()?;
            pairs().map(|(x, y)| (x - r * y).abs()).sum()
        }
    })
}

/// Metric over the pixels where `mask` is set.
pub fn masked_score(kind: MetricKind, a: &[f32], b: &[f32], mask: &[bool]) -> Result<f64, MetricError> {
    if a.len() != b.len() || a.len() != mask.len() {
        return Err(MetricError::ShapeMismatch);
    }
    let (mut xa, mut xb) = (Vec::new(), Vec::new());
    for ((x, y), m) in a.iter().zip(b).zip(mask) {
        if *m {
            xa.push(*x as f64);
            xb.push(*y as f64);
        }
    }
    score_pairs(kind, &xa, &xb)
}

/// Pose hypothesis of the ortho image's center in the map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchHypothesis {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub scale: f64,
}

impl MatchHypothesis {
    /// Clamps `scale` into `[MIN_SCALE, MAX_SCALE]`.
    pub fn new(x: f64, y: f64, theta: f64, scale: f64) -> Self {
        Self {
            x,
            y,
            theta,
            scale: scale.clamp(MIN_SCALE, MAX_SCALE),
        }
    }
}

/// Bounding box of the valid ortho pixels, precomputed once when many
/// hypotheses are scored against the same ortho image.
#[derive(Debug, Clone, Copy)]
pub struct PreparedOrtho<'a> {
    ortho: &'a OrthoImage,
    /// Radius in local meters enclosing every valid pixel center.
    radius: f64,
}

impl<'a> PreparedOrtho<'a> {
    pub fn new(ortho: &'a OrthoImage) -> Self {
        let w = ortho.width();
        let mut radius: f64 = 0.0;
        for (i, _) in ortho.mask.iter().enumerate().filter(|(_, m)| **m) {
            let (x, y) = OrthoImage::grid_to_local((i % w) as f64, (i / w) as f64);
            radius = radius.max(x.hypot(y));
        }
        Self { ortho, radius: radius + 1.0 }
    }

    pub fn ortho(&self) -> &OrthoImage {
        self.ortho
    }

    /// Bilinear intensity at grid coordinates, weights renormalized over the
    /// valid neighbors. `None` when the nearest grid pixel is masked out.
    #[inline]
    fn sample(&self, gu: f64, gv: f64) -> Option<f64> {
        let o = self.ortho;
        let (w, h) = (o.width(), o.height());
        let (nu, nv) = (gu.round(), gv.round());
        if !(nu >= 0.0 && nv >= 0.0 && nu < w as f64 && nv < h as f64) {
            return None;
        }
        if !o.mask[nv as usize * w + nu as usize] {
            return None;
        }
        let (c0, r0) = (gu.floor(), gv.floor());
        let (fu, fv) = (gu - c0, gv - r0);
        let (mut acc, mut wsum) = (0.0, 0.0);
        for (dc, dr, wt) in [(0, 0, (1.0 - fu) * (1.0 - fv)), (1, 0, fu * (1.0 - fv)), (0, 1, (1.0 - fu) * fv), (1, 1, fu * fv)] {
            let (c, r) = (c0 as i64 + dc, r0 as i64 + dr);
            if c < 0 || r < 0 || c >= w as i64 || r >= h as i64 || wt == 0.0 {
                continue;
            }
            let i = r as usize * w + c as usize;
            if o.mask[i] {
                acc += wt * o.pixels.data[i] as f64;
                wsum += wt;
            }
        }
        (wsum > 0.0).then(|| acc / wsum)
    }

    /// Paired (ortho, map) samples for a hypothesis.
    pub fn gather(&self, hyp: &MatchHypothesis, map: &GeoRaster) -> Result<(Vec<f64>, Vec<f64>), MetricError> {
        if (map.meters_per_pixel - 1.0).abs() > 1e-9 {
            return Err(MetricError::UnsupportedResolution(map.meters_per_pixel));
        }
        let half = (ORTHO_SIZE / 2) as i64;
        let (u0, v0) = map.world_to_pixel(hyp.x, hyp.y);
        if !(u0.is_finite() && v0.is_finite()) {
            return Err(MetricError::OutOfMap);
        }
        let (ci, ri) = (u0.round() as i64, v0.round() as i64);
        let (col_lo, row_lo) = (ci - half, ri - half);
        let (col_hi, row_hi) = (col_lo + ORTHO_SIZE as i64, row_lo + ORTHO_SIZE as i64);
        if col_lo < 0 || row_lo < 0 || col_hi > map.width() as i64 || row_hi > map.height() as i64 {
            return Err(MetricError::OutOfMap);
        }
        // only map pixels within the scaled valid radius can overlap
        let reach = (self.radius * hyp.scale).min(ORTHO_HALF_EXTENT_M * 2.0).ceil() as i64;
        let (c_from, c_to) = ((ci - reach).max(col_lo), (ci + reach + 1).min(col_hi));
        let (r_from, r_to) = ((ri - reach).max(row_lo), (ri + reach + 1).min(row_hi));
        let (s, c) = (-hyp.theta).sin_cos();
        let inv_scale = 1.0 / hyp.scale;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for row in r_from..r_to {
            for col in c_from..c_to {
                let (mx, my) = map.pixel_to_world(col as f64, row as f64);
                let (dx, dy) = (mx - hyp.x, my - hyp.y);
                let (qx, qy) = ((c * dx - s * dy) * inv_scale, (s * dx + c * dy) * inv_scale);
                let (gu, gv) = OrthoImage::local_to_grid(qx, qy);
                let Some(va) = self.sample(gu, gv) else { continue };
                let vb = map.image.get(col as usize, row as usize);
                if is_valid(vb) {
                    a.push(va);
                    b.push(vb as f64);
                }
            }
        }
        Ok((a, b))
    }

    pub fn score(&self, hyp: &MatchHypothesis, map: &GeoRaster, kind: MetricKind) -> Result<f64, MetricError> {
        let (a, b) = self.gather(hyp, map)?;
        let v = score_pairs(kind, &a, &b)?;
        Ok(if kind.is_sum_based() { v / a.len() as f64 } else { v })
    }
}

/// `c(x, y, θ, s, Ω, Ω_m, M)`: the ortho image is scaled by `s` and rotated
/// by `θ` about its center, then compared against the map pixels around
/// `(x, y)`. Sum-based kinds are divided by the overlap size.
pub fn match_hypothesis(hyp: &MatchHypothesis, ortho: &OrthoImage, map: &GeoRaster, kind: MetricKind) -> Result<f64, MetricError> {
    PreparedOrtho::new(ortho).score(hyp, map, kind)
}

/// Ortho image with the map-frame pose of its center.
#[derive(Debug, Clone)]
pub struct PosedOrtho {
    pub ortho: OrthoImage,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSeries {
    pub true_scores: Vec<f64>,
    pub random_scores: Vec<f64>,
    /// Hypotheses that raised an error and were left out.
    pub skipped: usize,
}

/// Scores at every true pose plus `n_random` uniform poses over the map
/// interior (uniform heading, unit scale), cycling through the frames.
pub fn score_series(frames: &[PosedOrtho], map: &GeoRaster, kind: MetricKind, n_random: usize, rng_seed: u64) -> ScoreSeries {
    score_series_multi(frames, map, &[kind], n_random, rng_seed).pop().unwrap_or_default()
}

/// Same as [`score_series`] for several kinds at once, sharing the
/// hypotheses and the gathered pixels.
pub fn score_series_multi(frames: &[PosedOrtho], map: &GeoRaster, kinds: &[MetricKind], n_random: usize, rng_seed: u64) -> Vec<ScoreSeries> {
    let mut out = vec![ScoreSeries::default(); kinds.len()];
    if frames.is_empty() {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (x0, y0, x1, y1) = map.bounds();
    let margin = ORTHO_HALF_EXTENT_M + 1.0;
    let mut jobs: Vec<(usize, MatchHypothesis, bool)> = frames
        .iter()
        .enumerate()
        .map(|(i, f)| (i, MatchHypothesis::new(f.x, f.y, f.theta, 1.0), true))
        .collect();
    if x1 - x0 > 2.0 * margin && y1 - y0 > 2.0 * margin {
        for i in 0..n_random {
            let hyp = MatchHypothesis::new(
                rng.gen_range(x0 + margin..x1 - margin),
                rng.gen_range(y0 + margin..y1 - margin),
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                1.0,
            );
            jobs.push((i % frames.len(), hyp, false));
        }
    } else {
        out.iter_mut().for_each(|s| s.skipped += n_random);
    }
    let prepared: Vec<_> = frames.iter().map(|f| PreparedOrtho::new(&f.ortho)).collect();
    let results: Vec<Vec<Result<f64, MetricError>>> = jobs
        .par_iter()
        .map(|(i, hyp, _)| match prepared[*i].gather(hyp, map) {
            Ok((a, b)) => kinds
                .iter()
                .map(|k| score_pairs(*k, &a, &b).map(|v| if k.is_sum_based() { v / a.len() as f64 } else { v }))
                .collect(),
            Err(e) => vec![Err(e); kinds.len()],
        })
        .collect();
    for ((_, _, is_true), per_kind) in jobs.iter().zip(results) {
        for (series, r) in out.iter_mut().zip(per_kind) {
            match r {
                Ok(v) if *is_true => series.true_scores.push(v),
                Ok(v) => series.random_scores.push(v),
                Err(_) => series.skipped += 1,
            }
        }
    }
    out
}

/// Rectangle of hypothesis positions in map meters, sampled every `step`
/// starting from `(x0, y0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridRegion {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub step: f64,
}

impl GridRegion {
    /// `(columns, rows)`; zero when the region is empty or the step is not positive.
    pub fn dims(&self) -> (usize, usize) {
        if !(self.step > 0.0 && self.x1 >= self.x0 && self.y1 >= self.y0) {
            return (0, 0);
        }
        let n = |a: f64, b: f64| ((b - a) / self.step + 1e-9).floor() as usize + 1;
        (n(self.x0, self.x1), n(self.y0, self.y1))
    }

    pub fn position(&self, col: usize, row: usize) -> (f64, f64) {
        (self.x0 + col as f64 * self.step, self.y0 + row as f64 * self.step)
    }
}

/// Scores over a [`GridRegion`], row-major; `NaN` where the hypothesis
/// could not be scored.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ScoreGrid {
    /// Cell holding the best score for `kind`, first in row-major order on ties.
    pub fn best(&self, kind: MetricKind) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in self.values.iter().enumerate() {
            if v.is_nan() {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, b)) if kind.higher_is_better() => *v > b,
                Some((_, b)) => *v < b,
            };
            if better {
                best = Some((i, *v));
            }
        }
        best.map(|(i, v)| (i % self.width, i / self.width, v))
    }
}

/// Match scores of `ortho` over a translation grid at fixed heading and scale.
pub fn score_grid(ortho: &OrthoImage, map: &GeoRaster, kind: MetricKind, region: &GridRegion, theta: f64, scale: f64) -> Result<ScoreGrid, MetricError> {
    let (w, h) = region.dims();
    let inside = |x: f64, y: f64| map.contains_world(x, y);
    let (xe, ye) = region.position(w.max(1) - 1, h.max(1) - 1);
    if w == 0 || h == 0 || !inside(region.x0, region.y0) || !inside(xe, ye) {
        return Err(MetricError::OutOfMap);
    }
    let prepared = PreparedOrtho::new(ortho);
    let values: Vec<f64> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = region.position(i % w, i / w);
            prepared.score(&MatchHypothesis::new(x, y, theta, scale), map, kind).unwrap_or(f64::NAN)
        })
        .collect();
    Ok(ScoreGrid { width: w, height: h, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ortho::ORTHO_SIZE;
    use crate::raster::GrayImage;

    fn patch(seed: u64, n: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(0.05f32..0.95)).collect()
    }

    #[test]
    fn identities() {
        let a = patch(1, 400);
        let m = vec![true; 400];
        let s = |k, b: &[f32]| masked_score(k, &a, b, &m).unwrap();
        assert!((s(MetricKind::Zncc, &a) - 1.0).abs() < 1e-12);
        assert_eq!(s(MetricKind::Sad, &a), 0.0);
        assert_eq!(s(MetricKind::Ssd, &a), 0.0);
        let shifted: Vec<f32> = a.iter().map(|v| v + 0.2).collect();
        assert!((s(MetricKind::Moravec, &shifted) - 1.0).abs() < 1e-6);

        let mean = a.iter().map(|v| *v as f64).sum::<f64>() / 400.0;
        let z: Vec<f32> = a.iter().map(|v| (*v as f64 - mean) as f32).collect();
        let neg: Vec<f32> = z.iter().map(|v| -v).collect();
        assert!((masked_score(MetricKind::Zncc, &z, &neg, &m).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_pixels_and_zero_variance() {
        let a = patch(2, 100);
        let mut m = vec![false; 100];
        m[..63].iter_mut().for_each(|v| *v = true);
        assert_eq!(masked_score(MetricKind::Sad, &a, &a, &m), Err(MetricError::TooFewValidPixels(63)));
        let flat = vec![0.5f32; 100];
        let all = vec![true; 100];
        assert_eq!(masked_score(MetricKind::Zncc, &a, &flat, &all), Err(MetricError::ZeroVariance));
        assert!(masked_score(MetricKind::Ssd, &a, &flat, &all).is_ok());
    }

    #[test]
    fn names_round_trip() {
        for k in MetricKind::ALL {
            assert_eq!(k.name().parse::<MetricKind>().unwrap(), k);
        }
        assert_eq!("moravec".parse::<MetricKind>().unwrap(), MetricKind::Moravec);
        assert!("foo".parse::<MetricKind>().is_err());
    }

    fn textured_map(size: usize) -> GeoRaster {
        let img = GrayImage::from_fn(size, size, |c, r| {
            let (x, y) = (c as f32, r as f32);
            (0.5 + 0.2 * (x * 0.07).sin() * (y * 0.05).cos() + 0.15 * ((x + 2.0 * y) * 0.013).sin() + 0.1 * (x * 0.002 + y * 0.031).cos()).clamp(0.0, 1.0)
        });
        GeoRaster::new(img, 0.0, 0.0, 1.0).unwrap()
    }

    /// Cut an ortho image out of the map centered at `(x0, y0)` with
    /// heading `theta`, valid inside a disc.
    fn cut(map: &GeoRaster, x0: f64, y0: f64, theta: f64, radius: f64) -> OrthoImage {
        let (s, c) = theta.sin_cos();
        let mut pixels = GrayImage::new(ORTHO_SIZE, ORTHO_SIZE);
        let mut mask = vec![false; ORTHO_SIZE * ORTHO_SIZE];
        for row in 0..ORTHO_SIZE {
            for col in 0..ORTHO_SIZE {
                let (qx, qy) = OrthoImage::grid_to_local(col as f64, row as f64);
                if qx.hypot(qy) > radius {
                    continue;
                }
                let (mx, my) = (x0 + c * qx - s * qy, y0 + s * qx + c * qy);
                if let Some(v) = map.sample_world(mx, my) {
                    pixels.set(col, row, v);
                    mask[row * ORTHO_SIZE + col] = true;
                }
            }
        }
        OrthoImage {
            pixels,
            mask,
            center_frame: 0,
            camera_height_above_plane: 92.0,
        }
    }

    #[test]
    fn self_match_is_exact() {
        let map = textured_map(1200);
        let ortho = cut(&map, 600.0, 580.0, 0.0, 150.0);
        let hyp = MatchHypothesis::new(600.0, 580.0, 0.0, 1.0);
        assert!(match_hypothesis(&hyp, &ortho, &map, MetricKind::Sad).unwrap().abs() < 1e-12);
        assert!((match_hypothesis(&hyp, &ortho, &map, MetricKind::Zncc).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_grid_peaks_at_truth() {
        let map = textured_map(1200);
        let ortho = cut(&map, 600.0, 600.0, 0.0, 200.0);
        let best = (0..36)
            .map(|i| {
                let hyp = MatchHypothesis::new(600.0, 600.0, (i as f64 * 10.0).to_radians(), 1.0);
                (i, match_hypothesis(&hyp, &ortho, &map, MetricKind::Zncc).unwrap())
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert_eq!(best.0, 0);
    }

    #[test]
    fn rotation_consistency() {
        let map = textured_map(1200);
        let theta = 0.6;
        // ortho whose content is already the map rotated by theta
        let pre = cut(&map, 600.0, 600.0, theta, 150.0);
        let at_theta = match_hypothesis(&MatchHypothesis::new(600.0, 600.0, theta, 1.0), &pre, &map, MetricKind::Zncc).unwrap();
        let plain = cut(&map, 600.0, 600.0, 0.0, 150.0);
        let at_zero = match_hypothesis(&MatchHypothesis::new(600.0, 600.0, 0.0, 1.0), &plain, &map, MetricKind::Zncc).unwrap();
        assert!((at_theta - at_zero).abs() < 5e-2, "{at_theta} vs {at_zero}");
    }

    #[test]
    fn out_of_map_and_scale_clamp() {
        let map = textured_map(800);
        let ortho = cut(&map, 400.0, 400.0, 0.0, 100.0);
        let far = MatchHypothesis::new(10_400.0, 400.0, 0.0, 1.0);
        assert_eq!(match_hypothesis(&far, &ortho, &map, MetricKind::Sad), Err(MetricError::OutOfMap));
        assert_eq!(MatchHypothesis::new(0.0, 0.0, 0.0, 5.0).scale, MAX_SCALE);
        assert_eq!(MatchHypothesis::new(0.0, 0.0, 0.0, 0.1).scale, MIN_SCALE);
    }

    #[test]
    fn score_series_is_deterministic() {
        let map = textured_map(1200);
        let frames: Vec<_> = [(400.0, 500.0), (700.0, 650.0)]
            .iter()
            .map(|&(x, y)| PosedOrtho {
                ortho: cut(&map, x, y, 0.3, 150.0),
                x,
                y,
                theta: 0.3,
            })
            .collect();
        let a = score_series(&frames, &map, MetricKind::Sad, 20, 5);
        let b = score_series(&frames, &map, MetricKind::Sad, 20, 5);
        assert_eq!(a, b);
        assert_eq!(a.true_scores.len(), 2);
        assert!(a.true_scores.iter().all(|v| *v < 1e-3));
        assert_eq!(a.random_scores.len() + a.skipped, 20);
    }

    #[test]
    fn grid_extremum_at_true_offset_and_matches_brute_force() {
        let map = textured_map(1200);
        let ortho = cut(&map, 610.0, 590.0, 0.3, 150.0);
        let region = GridRegion { x0: 580.0, y0: 560.0, x1: 640.0, y1: 620.0, step: 5.0 };
        assert_eq!(region.dims(), (13, 13));
        for kind in [MetricKind::Zncc, MetricKind::Ssd] {
            let grid = score_grid(&ortho, &map, kind, &region, 0.3, 1.0).unwrap();
            assert_eq!((grid.width, grid.height), (13, 13));
            let (col, row, _) = grid.best(kind).unwrap();
            assert_eq!(region.position(col, row), (610.0, 590.0));

            let mut brute: Option<(usize, usize, f64)> = None;
            for r in 0..13 {
                for c in 0..13 {
                    let (x, y) = region.position(c, r);
                    let v = match_hypothesis(&MatchHypothesis::new(x, y, 0.3, 1.0), &ortho, &map, kind).unwrap();
                    let better = brute.map_or(true, |b| if kind.higher_is_better() { v > b.2 } else { v < b.2 });
                    if better {
                        brute = Some((c, r, v));
                    }
                }
            }
            assert_eq!(brute.map(|b| (b.0, b.1)), Some((col, row)));
        }
    }

    #[test]
    fn grid_outside_map_is_rejected() {
        let map = textured_map(600);
        let ortho = cut(&map, 300.0, 300.0, 0.0, 100.0);
        let region = GridRegion { x0: 500.0, y0: 300.0, x1: 700.0, y1: 320.0, step: 10.0 };
        assert_eq!(score_grid(&ortho, &map, MetricKind::Zncc, &region, 0.0, 1.0), Err(MetricError::OutOfMap));
        let empty = GridRegion { step: 0.0, ..region };
        assert_eq!(empty.dims(), (0, 0));
    }

}
