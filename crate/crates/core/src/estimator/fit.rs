//! Weighted and robust homography fitting from point correspondences.

use nalgebra::{Matrix3, SMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{homography_from_four, Homography, Point};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub src: Point,
    pub tgt: Point,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Irls,
    Ransac,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub method: FitMethod,
    /// Inlier threshold (RANSAC) or Huber delta (IRLS), in pixels.
    pub inlier_px: f64,
    pub max_iter: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { method: FitMethod::Ransac, inlier_px: 1.0, max_iter: 500 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub homography: Homography,
    /// Fraction of usable correspondences within `inlier_px`.
    pub inlier_ratio: f64,
    /// Weighted RMS reprojection error over inliers.
    pub residual: f64,
    pub used: usize,
}

fn reprojection_error(h: &Homography, c: &Correspondence) -> f64 {
    let p = h.project(c.src);
    let e = (p[0] - c.tgt[0]).hypot(p[1] - c.tgt[1]);
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

fn normalizer(points: impl Iterator<Item = Point> + Clone) -> Matrix3<f64> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    let (cx, cy) = (sx / n, sy / n);
    let mean = points.map(|p| (p[0] - cx).hypot(p[1] - cy)).sum::<f64>() / n;
    let s = if mean > 0.0 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// True when the points span less than a line (all collinear or coincident).
fn collinear(points: &[Point]) -> bool {
    let n = points.len() as f64;
    let (cx, cy) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0] / n, b + p[1] / n));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = ((tr * tr / 4.0) - det).max(0.0).sqrt();
    let small = tr / 2.0 - disc;
    tr == 0.0 || small <= 1e-10 * tr
}

/// Weighted algebraic least squares (normalized DLT); `weights[i]` scales
/// row pair `i`. Exactly four correspondences go through the 8×8 solve.
pub fn fit_weighted(corr: &[Correspondence], weights: &[f64]) -> Result<Homography> {
    let active: Vec<(Correspondence, f64)> =
        corr.iter().zip(weights).filter(|(_, &w)| w > 0.0).map(|(c, &w)| (*c, w)).collect();
    if active.len() < 4 {
        return Err(Error::InsufficientCorrespondences { got: active.len() });
    }
    let src: Vec<Point> = active.iter().map(|(c, _)| c.src).collect();
    if collinear(&src) || collinear(&active.iter().map(|(c, _)| c.tgt).collect::<Vec<_>>()) {
        return Err(Error::DegenerateConfiguration);
    }
    if active.len() == 4 {
        let s: [Point; 4] = std::array::from_fn(|i| active[i].0.src);
        let t: [Point; 4] = std::array::from_fn(|i| active[i].0.tgt);
        return homography_from_four(&s, &t, true).map_err(|_| Error::DegenerateConfiguration);
    }
    let ts = normalizer(active.iter().map(|(c, _)| c.src));
    let td = normalizer(active.iter().map(|(c, _)| c.tgt));
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (c, w) in &active {
        let x = ts[(0, 0)] * c.src[0] + ts[(0, 2)];
        let y = ts[(1, 1)] * c.src[1] + ts[(1, 2)];
        let u = td[(0, 0)] * c.tgt[0] + td[(0, 2)];
        let v = td[(1, 1)] * c.tgt[1] + td[(1, 2)];
        let r1 = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u];
        let r2 = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, -v];
        for r in [r1, r2] {
            for i in 0..9 {
                if r[i] == 0.0 {
                    continue;
                }
                for j in 0..9 {
                    ata[(i, j)] += w * r[i] * r[j];
                }
            }
        }
    }
    let eig = SymmetricEigen::new(ata);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
    let h = eig.eigenvectors.column(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().expect("similarity transform is invertible");
    Homography::from_matrix(td_inv * hn * ts).map_err(|_| Error::DegenerateConfiguration)
}

fn weighted_rms(h: &Homography, corr: &[Correspondence], mask: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (c, _) in corr.iter().zip(mask).filter(|(_, &m)| m) {
        let e = reprojection_error(h, c);
        num += c.weight * e * e;
        den += c.weight;
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        0.0
    }
}

fn irls(corr: &[Correspondence], cfg: &FitConfig) -> Result<FitOutcome> {
    let base: Vec<f64> = corr.iter().map(|c| c.weight).collect();
    let mut h = fit_weighted(corr, &base)?;
    let delta = cfg.inlier_px;
    for _ in 0..cfg.max_iter.max(1) {
        let w: Vec<f64> = corr
            .iter()
            .map(|c| {
                let r = reprojection_error(&h, c);
                c.weight * if r <= delta { 1.0 } else { delta / r }
            })
            .collect();
        let next = fit_weighted(corr, &w)?;
        let change = next.max_abs_diff(&h);
        h = next;
        if change < 1e-12 {
            break;
        }
    }
    let inliers: Vec<bool> = corr.iter().map(|c| reprojection_error(&h, c) <= delta).collect();
    let count = inliers.iter().filter(|v| **v).count();
    Ok(FitOutcome {
        homography: h,
        inlier_ratio: count as f64 / corr.len() as f64,
        residual: weighted_rms(&h, corr, &inliers),
        used: corr.len(),
    })
}

const RANSAC_CONFIDENCE: f64 = 0.999;

fn ransac(corr: &[Correspondence], cfg: &FitConfig, seed: u64) -> Result<FitOutcome> {
    let n = corr.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Vec<bool>)> = None;
    let mut needed = cfg.max_iter.max(1);
    let mut iter = 0;
    while iter < needed {
        iter += 1;
        let idx = sample(&mut rng, n, 4);
        let s: [Point; 4] = std::array::from_fn(|i| corr[idx.index(i)].src);
        let t: [Point; 4] = std::array::from_fn(|i| corr[idx.index(i)].tgt);
        let Ok(h) = homography_from_four(&s, &t, true) else { continue };
        let mask: Vec<bool> = corr.iter().map(|c| reprojection_error(&h, c) <= cfg.inlier_px).collect();
        let count = mask.iter().filter(|v| **v).count();
        if best.as_ref().map_or(true, |(b, _)| count > *b) {
            let ratio = count as f64 / n as f64;
            if ratio >= 1.0 {
                needed = iter;
            } else if ratio > 0.0 {
                let k = (1.0 - RANSAC_CONFIDENCE).ln() / (1.0 - ratio.powi(4)).ln();
                needed = needed.min(k.ceil() as usize).max(iter);
            }
            best = Some((count, mask));
        }
    }
    let (_, mut mask) = best.ok_or(Error::DegenerateConfiguration)?;
    let mut h = Homography::identity();
    // refit on inliers, then once more on the inliers of the refit
    for _ in 0..2 {
        let w: Vec<f64> = corr.iter().zip(&mask).map(|(c, &m)| if m { c.weight } else { 0.0 }).collect();
        h = fit_weighted(corr, &w).map_err(|e| match e {
            Error::InsufficientCorrespondences { .. } => Error::DegenerateConfiguration,
            other => other,
        })?;
        let next: Vec<bool> = corr.iter().map(|c| reprojection_error(&h, c) <= cfg.inlier_px).collect();
        if next.iter().filter(|v| **v).count() < 4 {
            break;
        }
        mask = next;
    }
    let count = mask.iter().filter(|v| **v).count();
    Ok(FitOutcome {
        homography: h,
        inlier_ratio: count as f64 / n as f64,
        residual: weighted_rms(&h, corr, &mask),
        used: n,
    })
}

/// Robust homography from correspondences whose weight exceeds `confidence_floor`.
pub fn fit_homography_robust(
    correspondences: &[Correspondence],
    cfg: &FitConfig,
    confidence_floor: f64,
    seed: u64,
) -> Result<FitOutcome> {
    let usable: Vec<Correspondence> = correspondences
        .iter()
        .filter(|c| c.weight > confidence_floor && c.src.iter().chain(&c.tgt).all(|v| v.is_finite()))
        .copied()
        .collect();
    if usable.len() < 4 {
        return Err(Error::InsufficientCorrespondences { got: usable.len() });
    }
    match cfg.method {
        FitMethod::Irls => irls(&usable, cfg),
        FitMethod::Ransac => ransac(&usable, cfg, seed),
    }
}
