//! Modality-invariant feature representations.
//!
//! Two transforms plug into the same [`FeatureTransform`] interface:
//!
//! * [`GradientStructure`]: gradient magnitude soft-binned into 8 unsigned
//!   orientation bins and box-smoothed over 3×3. Unsigned orientation makes
//!   the descriptor blind to contrast polarity, so an intensity-inverted
//!   image yields the same features.
//! * [`CouplingTransform`]: an invertible stack of affine coupling blocks
//!   (see [`coupling`]) whose retained half serves as the feature map.
//!
//! Every level is passed through [`normalize_features`] before it is used
//! for correlation.

pub mod coupling;

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::imaging::{self, build_pyramid, gradient, Image, ValidityMask};

pub use coupling::{
    coupling_forward, coupling_inverse, reconstruction_error, CouplingParams, LatentTexture, ZPolicy,
};

/// Dense C-channel raster, channel-interleaved per position.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || data.len() != channels * width * height {
            return Err(Error::ShapeMismatch(format!(
                "feature data length {} for {channels}x{width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidImage("non-finite feature value".into()));
        }
        Ok(Self { channels, width, height, data })
    }

    pub fn zeros(channels: usize, width: usize, height: usize) -> Self {
        Self { channels, width, height, data: vec![0.0; channels * width * height] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Channel vector at `(x, y)`.
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.width == other.width && self.height == other.height
    }

    /// Backward bilinear warp of every channel; see [`imaging::warp`].
    pub fn warp(&self, h: &crate::geometry::Homography) -> Result<(FeatureMap, ValidityMask)> {
        let (data, valid) =
            imaging::warp_raster(&self.data, self.width, self.height, self.channels, h, self.width, self.height)?;
        Ok((
            FeatureMap { channels: self.channels, width: self.width, height: self.height, data },
            ValidityMask::new(self.width, self.height, valid)?,
        ))
    }
}

/// Features at 1/2, 1/4 and 1/8 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub f1: FeatureMap,
    pub f2: FeatureMap,
    pub f3: FeatureMap,
}

impl FeaturePyramid {
    /// Level by index: 1 → 1/2 scale, 2 → 1/4, 3 → 1/8.
    pub fn level(&self, level: usize) -> Option<&FeatureMap> {
        match level {
            1 => Some(&self.f1),
            2 => Some(&self.f2),
            3 => Some(&self.f3),
            _ => None,
        }
    }
}

/// A per-level feature extractor.
pub trait FeatureTransform: Send + Sync {
    fn name(&self) -> &str;

    fn channels(&self) -> usize;

    /// Raw features for one pyramid level. `level` is the gray image at the
    /// level's resolution and `parent` the image at twice that resolution.
    fn level_features(&self, level: &Image, parent: &Image) -> Result<FeatureMap>;
}

/// Scales every position's channel vector to unit L2 norm; zero vectors stay zero.
pub fn normalize_features(f: &FeatureMap) -> FeatureMap {
    let mut out = f.clone();
    for v in out.data.chunks_exact_mut(f.channels) {
        let norm = v.iter().map(|&a| a as f64 * a as f64).sum::<f64>().sqrt();
        if norm > 0.0 {
            for a in v.iter_mut() {
                *a = (*a as f64 / norm) as f32;
            }
        }
    }
    out
}

/// Builds the three-level pyramid with `transform` and normalizes each level.
pub fn extract_features(img: &Image, transform: &dyn FeatureTransform) -> Result<FeaturePyramid> {
    let gray = img.to_gray();
    let [l1, l2, l3] = build_pyramid(&gray)?;
    let f1 = normalize_features(&transform.level_features(&l1, &gray)?);
    let f2 = normalize_features(&transform.level_features(&l2, &l1)?);
    let f3 = normalize_features(&transform.level_features(&l3, &l2)?);
    Ok(FeaturePyramid { f1, f2, f3 })
}

pub const ORIENTATION_BINS: usize = 8;

/// Soft-binned unsigned gradient orientation histogram, 3×3 box-smoothed.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientStructure;

impl GradientStructure {
    pub fn raw(&self, img: &Image) -> Result<FeatureMap> {
        let gray = img.to_gray();
        let (w, h) = (gray.width(), gray.height());
        let (gx, gy) = gradient(&gray)?;
        let nb = ORIENTATION_BINS;
        let mut binned = vec![0.0f32; w * h * nb];
        let bin_width = PI / nb as f64;
        for (i, (&dx, &dy)) in gx.data().iter().zip(gy.data()).enumerate() {
            let (dx, dy) = (dx as f64, dy as f64);
            let mag = (dx * dx + dy * dy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let theta = dy.atan2(dx).rem_euclid(PI);
            let pos = theta / bin_width - 0.5;
            let lo = pos.floor();
            let frac = pos - lo;
            let lo = (lo as i64).rem_euclid(nb as i64) as usize;
            let hi = (lo + 1) % nb;
            binned[i * nb + lo] += (mag * (1.0 - frac)) as f32;
            binned[i * nb + hi] += (mag * frac) as f32;
        }
        let mut out = vec![0.0f32; w * h * nb];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f64; ORIENTATION_BINS];
                for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        let src = &binned[(yy * w + xx) * nb..(yy * w + xx + 1) * nb];
                        for (a, &s) in acc.iter_mut().zip(src) {
                            *a += s as f64;
                        }
                    }
                }
                let dst = &mut out[(y * w + x) * nb..(y * w + x + 1) * nb];
                for (d, a) in dst.iter_mut().zip(acc) {
                    *d = a as f32;
                }
            }
        }
        FeatureMap::new(nb, w, h, out)
    }
}

impl FeatureTransform for GradientStructure {
    fn name(&self) -> &str {
        "gradient"
    }

    fn channels(&self) -> usize {
        ORIENTATION_BINS
    }

    fn level_features(&self, level: &Image, _parent: &Image) -> Result<FeatureMap> {
        self.raw(level)
    }
}

/// Retained half of the coupling stack applied to the parent level; the 2×2
/// squeeze inside the stack lands it exactly on the level's resolution.
#[derive(Debug, Clone)]
pub struct CouplingTransform {
    params: Arc<CouplingParams>,
}

impl CouplingTransform {
    pub fn new(params: Arc<CouplingParams>) -> Self {
        Self { params }
    }
}

impl FeatureTransform for CouplingTransform {
    fn name(&self) -> &str {
        "coupling"
    }

    fn channels(&self) -> usize {
        self.params.split_channels()
    }

    fn level_features(&self, level: &Image, parent: &Image) -> Result<FeatureMap> {
        let (y, _z) = coupling_forward(parent, &self.params)?;
        if y.width() != level.width() || y.height() != level.height() {
            return Err(Error::ShapeMismatch(format!(
                "coupling output {}x{} does not match level {}x{}",
                y.width(),
                y.height(),
                level.width(),
                level.height()
            )));
        }
        Ok(y)
    }
}

/// Resolves a transform by name. `coupling` needs parameters.
pub fn transform_by_name(name: &str, coupling: Option<Arc<CouplingParams>>) -> Result<Arc<dyn FeatureTransform>> {
    match (name, coupling) {
        ("gradient", _) => Ok(Arc::new(GradientStructure)),
        ("coupling", Some(p)) => Ok(Arc::new(CouplingTransform::new(p))),
        ("coupling", None) => Err(Error::InvalidConfig("the coupling transform needs a parameter file".into())),
        (other, _) => Err(Error::UnknownTransform(other.to_string())),
    }
}

/// Intensity and gradient-structure consistency between two images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Consistency {
    /// Mean absolute intensity difference.
    pub l1: f64,
    /// Mean of `|Δgx| + |Δgy|`.
    pub l_str: f64,
}

/// Both terms averaged over valid pixels (and channels).
pub fn consistency_metrics(a: &Image, b: &Image, mask: Option<&ValidityMask>) -> Result<Consistency> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    if let Some(m) = mask {
        if m.width() != a.width() || m.height() != a.height() {
            return Err(Error::ShapeMismatch("mask does not match images".into()));
        }
    }
    let (gxa, gya) = gradient(a)?;
    let (gxb, gyb) = gradient(b)?;
    let ch = a.channels();
    let (mut l1, mut ls, mut n) = (0.0f64, 0.0f64, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            if mask.is_some_and(|m| !m.get(x, y)) {
                continue;
            }
            for c in 0..ch {
                l1 += (a.get(x, y, c) as f64 - b.get(x, y, c) as f64).abs();
                ls += (gxa.get(x, y, c) as f64 - gxb.get(x, y, c) as f64).abs()
                    + (gya.get(x, y, c) as f64 - gyb.get(x, y, c) as f64).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(Consistency { l1: l1 / n as f64, l_str: ls / n as f64 })
}
