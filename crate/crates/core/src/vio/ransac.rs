//! Fundamental-matrix RANSAC used only to flag bad correspondences.

use nalgebra::{Matrix3, SMatrix, SymmetricEigen, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::VioError;

/// Success probability used to cut the iteration count once a good
/// consensus set has been seen.
const CONFIDENCE: f64 = 0.999;

fn hartley(points: impl Iterator<Item = Vector2<f64>> + Clone) -> Matrix3<f64> {
    let n = points.clone().count() as f64;
    let c = points.clone().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean_dist = points.map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 1e-12 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// Normalized eight-point estimate of `F` with `x2ᵀ F x1 = 0`, rank 2 enforced.
pub fn fundamental_eight_point(pairs: &[(Vector2<f64>, Vector2<f64>)]) -> Option<Matrix3<f64>> {
    if pairs.len() < 8 {
        return None;
    }
    let t1 = hartley(pairs.iter().map(|p| p.0));
    let t2 = hartley(pairs.iter().map(|p| p.1));
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (a, b) in pairs {
        let p = t1 * Vector3::new(a.x, a.y, 1.0);
        let q = t2 * Vector3::new(b.x, b.y, 1.0);
        let row = SMatrix::<f64, 9, 1>::from_column_slice(&[
            q.x * p.x,
            q.x * p.y,
            q.x,
            q.y * p.x,
            q.y * p.y,
            q.y,
            p.x,
            p.y,
            1.0,
        ]);
        ata += row * row.transpose();
    }
    let eig = SymmetricEigen::new(ata);
    let (imin, _) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    let f = eig.eigenvectors.column(imin);
    let fn_ = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);
    let mut svd = fn_.svd(true, true);
    svd.singular_values[2] = 0.0;
    let f = t2.transpose() * svd.recompose().ok()? * t1;
    let norm = f.norm();
    (norm.is_finite() && norm > 0.0).then(|| f / norm)
}

/// Root mean square of the two point-to-epipolar-line distances, in pixels.
pub fn symmetric_epipolar_distance(f: &Matrix3<f64>, x1: &Vector2<f64>, x2: &Vector2<f64>) -> f64 {
    let (p, q) = (Vector3::new(x1.x, x1.y, 1.0), Vector3::new(x2.x, x2.y, 1.0));
    let l2 = f * p;
    let l1 = f.transpose() * q;
    let e = q.dot(&l2);
    let d2 = e * e / (l2.x * l2.x + l2.y * l2.y).max(1e-300);
    let d1 = e * e / (l1.x * l1.x + l1.y * l1.y).max(1e-300);
    (0.5 * (d1 + d2)).sqrt()
}

/// Flags each correspondence as inlier (`true`) or outlier. The estimated
/// matrix is discarded. `seed` fixes the minimal-sample sequence.
pub fn ransac_reject_outliers(
    pairs: &[(Vector2<f64>, Vector2<f64>)],
    iterations: usize,
    inlier_threshold_px: f64,
    seed: u64,
) -> Result<Vec<bool>, VioError> {
    if pairs.len() < 8 {
        return Err(VioError::TooFewCorrespondences(pairs.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classify = |f: &Matrix3<f64>| -> Vec<bool> {
        pairs
            .iter()
            .map(|(a, b)| symmetric_epipolar_distance(f, a, b) <= inlier_threshold_px)
            .collect()
    };
    let mut best: Vec<bool> = vec![false; pairs.len()];
    let mut best_count = 0;
    let mut budget = iterations;
    let mut it = 0;
    let mut minimal = Vec::with_capacity(8);
    while it < budget {
        it += 1;
        minimal.clear();
        minimal.extend(sample(&mut rng, pairs.len(), 8).into_iter().map(|i| pairs[i]));
        let Some(f) = fundamental_eight_point(&minimal) else { continue };
        let flags = classify(&f);
        let count = flags.iter().filter(|b| **b).count();
        if count > best_count {
            best_count = count;
            best = flags;
            let w = count as f64 / pairs.len() as f64;
            let needed = (1.0 - CONFIDENCE).ln() / (1.0 - w.powi(8)).max(1e-300).ln();
            if needed.is_finite() {
                budget = budget.min(needed.ceil().max(1.0) as usize);
            }
        }
    }
    if best_count < 8 {
        return Err(VioError::NoConsensus(best_count));
    }
    // one refit on the consensus set
    let inliers: Vec<_> = pairs.iter().zip(&best).filter(|(_, b)| **b).map(|(p, _)| *p).collect();
    if let Some(f) = fundamental_eight_point(&inliers) {
        let refit = classify(&f);
        if refit.iter().filter(|b| **b).count() >= best_count {
            return Ok(refit);
        }
    }
    Ok(best)
}
