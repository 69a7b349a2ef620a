//! Coarse-to-fine homography estimation.
//!
//! Each pyramid level runs `rounds` rounds of search. A round warps the
//! source features by the current estimate, then runs a horizontal and a
//! vertical line search followed by a dilated grid search. After every
//! search the volume is centred and box-averaged, its shift field becomes a
//! set of weighted correspondences, and a robust homography update fitted
//! to them is composed onto the estimate.

mod fit;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correlation::{search_1d, search_2d, shift_field, Axis, CorrelationVolume, ShiftField};
use crate::error::{Error, Result};
use crate::features::{extract_features, normalize_features, FeatureMap, FeatureTransform};
use crate::geometry::{offsets_from_homography, CornerFrame, CornerOffsets, Homography};
use crate::imaging::{Image, ValidityMask};

pub use fit::{fit_homography_robust, fit_weighted, Correspondence, FitConfig, FitMethod, FitOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Number of pyramid levels used, starting from the coarsest (1..=3).
    pub levels: usize,
    pub rounds: usize,
    pub radius: usize,
    /// Grid dilation per round; the last entry repeats.
    pub dilation_schedule: Vec<usize>,
    pub subpixel: bool,
    pub fit: FitConfig,
    pub confidence_floor: f64,
    pub transform: String,
    /// Parameter sidecar for the coupling transform.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transform_params: Option<std::path::PathBuf>,
    /// Spacing of the grid of positions that become correspondences.
    pub sample_stride: usize,
    /// Half-width of the window over which centred scores are averaged.
    pub aggregate_radius: usize,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            rounds: 2,
            radius: 4,
            dilation_schedule: vec![2, 1],
            subpixel: true,
            fit: FitConfig::default(),
            confidence_floor: 0.003,
            transform: "gradient".into(),
            transform_params: None,
            sample_stride: 2,
            aggregate_radius: 2,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(1..=3).contains(&self.levels) {
            return bad("levels must be 1, 2 or 3");
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.radius == 0 {
            return bad("radius must be at least 1");
        }
        if self.dilation_schedule.is_empty() || self.dilation_schedule.contains(&0) {
            return bad("dilation_schedule must be non-empty with entries >= 1");
        }
        let k = 2 * self.radius + 1;
        let side = (k as f64).sqrt().round() as usize;
        if side * side != k {
            return Err(Error::InvalidRadius(self.radius));
        }
        if !(self.fit.inlier_px > 0.0 && self.fit.inlier_px.is_finite()) {
            return bad("fit.inlier_px must be positive");
        }
        if self.fit.max_iter == 0 {
            return bad("fit.max_iter must be at least 1");
        }
        if !(self.confidence_floor >= 0.0 && self.confidence_floor < 1.0) {
            return bad("confidence_floor must lie in [0, 1)");
        }
        if self.sample_stride == 0 {
            return bad("sample_stride must be at least 1");
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn dilation(&self, round: usize) -> usize {
        self.dilation_schedule[round.min(self.dilation_schedule.len() - 1)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Horizontal,
    Vertical,
    Grid,
}

/// One search-and-fit step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub round: usize,
    pub stage: Stage,
    pub correspondences: usize,
    pub mean_confidence: f64,
    pub inlier_ratio: f64,
    pub residual: f64,
    /// Set when the fit failed and the update was skipped.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDiagnostics {
    /// Pyramid level: 3 is 1/8 scale, 1 is 1/2.
    pub level: usize,
    pub inlier_ratio: f64,
    pub mean_confidence: f64,
    pub residual: f64,
    /// True when no update succeeded and the initial estimate was carried forward.
    pub fell_back: bool,
    pub stages: Vec<StageReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelOutcome {
    pub homography: Homography,
    pub offsets: CornerOffsets,
    pub diagnostics: LevelDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Offsets after levels 3, 2 and 1, full-resolution pixels; `None` for skipped levels.
    pub delta3: Option<CornerOffsets>,
    pub delta2: Option<CornerOffsets>,
    pub delta1: CornerOffsets,
    pub h_full: Homography,
    pub levels: Vec<LevelDiagnostics>,
}

impl RegistrationResult {
    pub fn delta(&self, level: usize) -> Option<&CornerOffsets> {
        match level {
            1 => Some(&self.delta1),
            2 => self.delta2.as_ref(),
            3 => self.delta3.as_ref(),
            _ => None,
        }
    }
}

/// Positions on a `stride` grid, away from the border by `margin`, whose
/// warped source is valid and non-zero.
fn correspondences(
    field: &ShiftField,
    warped: &FeatureMap,
    mask: &ValidityMask,
    stride: usize,
    margin: [usize; 2],
) -> Vec<Correspondence> {
    let mut out = Vec::new();
    let (w, h) = (field.width(), field.height());
    if w <= 2 * margin[0] || h <= 2 * margin[1] {
        return out;
    }
    for y in (margin[1]..h - margin[1]).step_by(stride) {
        for x in (margin[0]..w - margin[0]).step_by(stride) {
            if !mask.get(x, y) || warped.at(x, y).iter().all(|v| *v == 0.0) {
                continue;
            }
            let s = field.shift(x, y);
            let p = [x as f64, y as f64];
            out.push(Correspondence { src: p, tgt: [p[0] + s[0], p[1] + s[1]], weight: field.confidence(x, y) });
        }
    }
    out
}

/// A search as seen by a probe: the raw volume and the shift field derived
/// from it after centring and aggregation. Rounds count from 1.
pub struct StageProbe<'a> {
    pub level: usize,
    pub round: usize,
    pub stage: Stage,
    pub volume: &'a CorrelationVolume,
    pub field: &'a ShiftField,
}

fn stage_seed(base: u64, level: usize, round: usize, stage: Stage) -> u64 {
    let s = match stage {
        Stage::Horizontal => 0,
        Stage::Vertical => 1,
        Stage::Grid => 2,
    };
    base ^ ((level as u64) << 48 | (round as u64) << 32 | s).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn refine_at_level(
    f_src: &FeatureMap,
    f_tgt: &FeatureMap,
    h_init: &Homography,
    cfg: &EstimatorConfig,
    level: usize,
    probe: &mut dyn FnMut(&StageProbe),
) -> Result<LevelOutcome> {
    if !f_src.same_shape(f_tgt) {
        return Err(Error::ShapeMismatch(format!(
            "feature maps {}x{} and {}x{}",
            f_src.width(),
            f_src.height(),
            f_tgt.width(),
            f_tgt.height()
        )));
    }
    h_init.invert()?;
    let frame = CornerFrame::for_image(f_src.width(), f_src.height());
    let mut h = *h_init;
    let mut stages = Vec::new();
    for round in 0..cfg.rounds {
        for stage in [Stage::Horizontal, Stage::Vertical, Stage::Grid] {
            let (warped, mask) = f_src.warp(&h)?;
            let warped = normalize_features(&warped);
            let vol = match stage {
                Stage::Horizontal => search_1d(&warped, f_tgt, cfg.radius, Axis::Horizontal)?,
                Stage::Vertical => search_1d(&warped, f_tgt, cfg.radius, Axis::Vertical)?,
                Stage::Grid => search_2d(&warped, f_tgt, cfg.radius, cfg.dilation(round))?,
            };
            let [rx, ry] = vol.shift_set().reach();
            let margin = [2 * rx + cfg.aggregate_radius, 2 * ry + cfg.aggregate_radius];
            let field = shift_field(&vol.centered().box_filtered(cfg.aggregate_radius), cfg.subpixel);
            probe(&StageProbe { level, round: round + 1, stage, volume: &vol, field: &field });
            let corr = correspondences(&field, &warped, &mask, cfg.sample_stride, margin);
            let usable: Vec<&Correspondence> = corr.iter().filter(|c| c.weight > cfg.confidence_floor).collect();
            let mean_confidence = if usable.is_empty() {
                0.0
            } else {
                usable.iter().map(|c| c.weight).sum::<f64>() / usable.len() as f64
            };
            let mut report = StageReport {
                round,
                stage,
                correspondences: usable.len(),
                mean_confidence,
                inlier_ratio: 0.0,
                residual: 0.0,
                failure: None,
            };
            let fitted = fit_homography_robust(&corr, &cfg.fit, cfg.confidence_floor, stage_seed(cfg.seed, level, round, stage))
                .and_then(|o| {
                    let next = o.homography.compose(&h)?;
                    // an update that sends a corner to infinity is treated as a failed fit
                    offsets_from_homography(&next, &frame)?;
                    Ok((o, next))
                });
            match fitted {
                Ok((o, next)) => {
                    report.inlier_ratio = o.inlier_ratio;
                    report.residual = o.residual;
                    h = next;
                }
                Err(
                    e @ (Error::InsufficientCorrespondences { .. }
                    | Error::DegenerateConfiguration
                    | Error::ProjectiveDegenerate { .. }
                    | Error::SingularMatrix(_)),
                ) => {
                    log::debug!("level {level} round {round} {stage:?}: update skipped: {e}");
                    report.failure = Some(e.to_string());
                }
                Err(e) => return Err(e),
            }
            stages.push(report);
        }
    }
    let ok: Vec<&StageReport> = stages.iter().filter(|s| s.failure.is_none()).collect();
    let fell_back = ok.is_empty();
    let mean = |f: fn(&StageReport) -> f64| {
        if ok.is_empty() {
            0.0
        } else {
            ok.iter().map(|s| f(s)).sum::<f64>() / ok.len() as f64
        }
    };
    let diagnostics = LevelDiagnostics {
        level,
        inlier_ratio: mean(|s| s.inlier_ratio),
        mean_confidence: mean(|s| s.mean_confidence),
        residual: ok.last().map_or(0.0, |s| s.residual),
        fell_back,
        stages,
    };
    let offsets = offsets_from_homography(&h, &frame)?;
    Ok(LevelOutcome { homography: h, offsets, diagnostics })
}

/// Runs the search-and-fit rounds at one level, starting from `h_init`.
/// Offsets are in the level's own pixel units.
pub fn refine_level(
    f_src: &FeatureMap,
    f_tgt: &FeatureMap,
    h_init: &Homography,
    cfg: &EstimatorConfig,
) -> Result<LevelOutcome> {
    cfg.validate()?;
    refine_at_level(f_src, f_tgt, h_init, cfg, 0, &mut |_| {})
}

/// Estimates the homography mapping `src` onto `tgt`.
pub fn register_hierarchical(
    src: &Image,
    tgt: &Image,
    transform: &dyn FeatureTransform,
    cfg: &EstimatorConfig,
) -> Result<RegistrationResult> {
    register_hierarchical_probed(src, tgt, transform, cfg, &mut |_| {})
}

/// [`register_hierarchical`] that reports every search to `probe`.
pub fn register_hierarchical_probed(
    src: &Image,
    tgt: &Image,
    transform: &dyn FeatureTransform,
    cfg: &EstimatorConfig,
    probe: &mut dyn FnMut(&StageProbe),
) -> Result<RegistrationResult> {
    cfg.validate()?;
    if src.width() != tgt.width() || src.height() != tgt.height() {
        return Err(Error::ShapeMismatch(format!(
            "source {}x{} vs target {}x{}",
            src.width(),
            src.height(),
            tgt.width(),
            tgt.height()
        )));
    }
    let ps = extract_features(src, transform)?;
    let pt = extract_features(tgt, transform)?;
    let full = CornerFrame::for_image(src.width(), src.height());
    let mut h = Homography::identity();
    let mut deltas: [Option<CornerOffsets>; 3] = [None, None, None];
    let mut levels = Vec::new();
    for level in (1..=cfg.levels).rev() {
        let fs = ps.level(level).expect("level in 1..=3");
        let ft = pt.level(level).expect("level in 1..=3");
        let out = refine_at_level(fs, ft, &h, cfg, level, probe)?;
        let scale = (1u32 << level) as f64;
        deltas[level - 1] = Some(offsets_from_homography(&out.homography.rescale(scale), &full)?);
        levels.push(out.diagnostics);
        h = if level > 1 { out.homography.rescale(2.0) } else { out.homography };
    }
    let h_full = h.rescale(2.0);
    let [d1, d2, d3] = deltas;
    Ok(RegistrationResult { delta3: d3, delta2: d2, delta1: d1.expect("level 1 always runs"), h_full, levels })
}
