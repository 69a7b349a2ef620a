//! Registration quality metrics over an optional validity mask.
//!
//! Conventions: intensities in `[0, 1]`, RMSE reported on the 0–255 scale,
//! MI from a 256-bin joint histogram in bits, SSIM with an 11×11 Gaussian
//! window (σ = 1.5) averaged over windows lying entirely on valid pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CornerOffsets;
use crate::imaging::{gaussian_kernel, Image, ValidityMask};

pub const MI_BINS: usize = 256;
pub const SSIM_RADIUS: usize = 5;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub ncc: f64,
    pub mi: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ace: Option<f64>,
    /// `‖Δ_gt − Δ_l‖₂` for levels 3, 2, 1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset_errors: Option<[f64; 3]>,
}

struct Pair {
    a: Vec<f64>,
    b: Vec<f64>,
    valid: Vec<bool>,
    width: usize,
    height: usize,
}

fn prepare(registered: &Image, truth: &Image, mask: Option<&ValidityMask>) -> Result<Pair> {
    let (w, h) = (truth.width(), truth.height());
    if registered.width() != w || registered.height() != h {
        return Err(Error::ShapeMismatch(format!(
            "registered {}x{} vs truth {w}x{h}",
            registered.width(),
            registered.height()
        )));
    }
    let valid = match mask {
        Some(m) if m.width() != w || m.height() != h => {
            return Err(Error::ShapeMismatch(format!("mask {}x{} vs image {w}x{h}", m.width(), m.height())))
        }
        Some(m) => m.as_slice().to_vec(),
        None => vec![true; w * h],
    };
    if !valid.iter().any(|v| *v) {
        return Err(Error::EmptyMask);
    }
    let gray = |img: &Image| img.to_gray().data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    Ok(Pair { a: gray(registered), b: gray(truth), valid, width: w, height: h })
}

fn rmse(p: &Pair) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for i in 0..p.a.len() {
        if p.valid[i] {
            let d = p.a[i] - p.b[i];
            s += d * d;
            n += 1.0;
        }
    }
    255.0 * (s / n).sqrt()
}

fn ncc(p: &Pair) -> f64 {
    let idx: Vec<usize> = (0..p.a.len()).filter(|&i| p.valid[i]).collect();
    let n = idx.len() as f64;
    let ma = idx.iter().map(|&i| p.a[i]).sum::<f64>() / n;
    let mb = idx.iter().map(|&i| p.b[i]).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let (da, db) = (p.a[i] - ma, p.b[i] - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    let den = (saa * sbb).sqrt();
    if den > 0.0 {
        (sab / den).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

/// Histogram bin of an intensity: `min(⌊v·256⌋, 255)` after clamping to `[0, 1]`.
pub fn intensity_bin(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * MI_BINS as f64) as usize).min(MI_BINS - 1)
}

fn entropy_bits(counts: &[u64], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum()
}

fn mutual_information(p: &Pair) -> f64 {
    let mut joint = vec![0u64; MI_BINS * MI_BINS];
    let mut ha = vec![0u64; MI_BINS];
    let mut hb = vec![0u64; MI_BINS];
    let mut n = 0u64;
    for i in 0..p.a.len() {
        if p.valid[i] {
            let (x, y) = (intensity_bin(p.a[i]), intensity_bin(p.b[i]));
            joint[x * MI_BINS + y] += 1;
            ha[x] += 1;
            hb[y] += 1;
            n += 1;
        }
    }
    let t = n as f64;
    (entropy_bits(&ha, t) + entropy_bits(&hb, t) - entropy_bits(&joint, t)).max(0.0)
}

/// Marginal entropy in bits under the MI binning.
pub fn entropy(img: &Image, mask: Option<&ValidityMask>) -> Result<f64> {
    let p = prepare(img, img, mask)?;
    let mut h = vec![0u64; MI_BINS];
    let mut n = 0u64;
    for i in 0..p.a.len() {
        if p.valid[i] {
            h[intensity_bin(p.a[i])] += 1;
            n += 1;
        }
    }
    Ok(entropy_bits(&h, n as f64))
}

/// Separable "valid" correlation with `k`: output `(w − 2r) × (h − 2r)`.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = k.len() / 2;
    let (ow, oh) = (w - 2 * r, h - 2 * r);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().enumerate().map(|(t, kv)| kv * src[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(t, kv)| kv * tmp[(y + t) * ow + x]).sum();
        }
    }
    out
}

fn ssim(p: &Pair) -> Result<f64> {
    let r = SSIM_RADIUS;
    let (w, h) = (p.width, p.height);
    if w <= 2 * r || h <= 2 * r {
        return Err(Error::ImageTooSmall { width: w, height: h, min: 2 * r + 1 });
    }
    // summed-area table of invalid pixels decides which windows are usable
    let mut bad = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            bad[(y + 1) * (w + 1) + x + 1] = !p.valid[y * w + x] as u32 + bad[y * (w + 1) + x + 1]
                + bad[(y + 1) * (w + 1) + x]
                - bad[y * (w + 1) + x];
        }
    }
    let k = gaussian_kernel(SSIM_SIGMA, r);
    let prod = |f: &dyn Fn(usize) -> f64| (0..w * h).map(f).collect::<Vec<_>>();
    let mx = filter_valid(&p.a, w, h, &k);
    let my = filter_valid(&p.b, w, h, &k);
    let mxx = filter_valid(&prod(&|i| p.a[i] * p.a[i]), w, h, &k);
    let myy = filter_valid(&prod(&|i| p.b[i] * p.b[i]), w, h, &k);
    let mxy = filter_valid(&prod(&|i| p.a[i] * p.b[i]), w, h, &k);
    let ow = w - 2 * r;
    let (mut sum, mut n) = (0.0, 0u64);
    for y in 0..h - 2 * r {
        for x in 0..ow {
            let (x1, y1) = (x + 2 * r + 1, y + 2 * r + 1);
            let count = bad[y1 * (w + 1) + x1] + bad[y * (w + 1) + x] - bad[y * (w + 1) + x1] - bad[y1 * (w + 1) + x];
            if count > 0 {
                continue;
            }
            let i = y * ow + x;
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((sum / n as f64).clamp(-1.0, 1.0))
}

/// RMSE, NCC, MI and SSIM of `registered` against `truth`, over `mask` when given.
pub fn evaluate_pair(registered: &Image, truth: &Image, mask: Option<&ValidityMask>) -> Result<MetricReport> {
    let p = prepare(registered, truth, mask)?;
    Ok(MetricReport {
        rmse: rmse(&p),
        ncc: ncc(&p),
        mi: mutual_information(&p),
        ssim: ssim(&p)?,
        ace: None,
        offset_errors: None,
    })
}

/// Euclidean norm of the 8-vector of offset differences.
pub fn offset_error(pred: &CornerOffsets, gt: &CornerOffsets) -> f64 {
    pred.0.iter().zip(&gt.0).flat_map(|(p, g)| [p[0] - g[0], p[1] - g[1]]).map(|d| d * d).sum::<f64>().sqrt()
}

/// One evaluated pair, as it appears in tables and CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub report: MetricReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

const COLUMNS: [&str; 7] = ["pair", "rmse", "ncc", "mi", "ssim", "ace", "time_s"];

fn cells(id: &str, r: &MetricReport, seconds: Option<f64>) -> [String; 7] {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    [
        id.to_string(),
        format!("{:.6}", r.rmse),
        format!("{:.6}", r.ncc),
        format!("{:.6}", r.mi),
        format!("{:.6}", r.ssim),
        opt(r.ace),
        opt(seconds),
    ]
}

fn mean_row(rows: &[MetricRow]) -> Option<[String; 7]> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let opt_mean = |f: &dyn Fn(&MetricRow) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let summary = MetricReport {
        rmse: mean(&|r| r.report.rmse),
        ncc: mean(&|r| r.report.ncc),
        mi: mean(&|r| r.report.mi),
        ssim: mean(&|r| r.report.ssim),
        ace: opt_mean(&|r| r.report.ace),
        offset_errors: None,
    };
    Some(cells("mean", &summary, opt_mean(&|r| r.seconds)))
}

/// Header, per-pair rows and the mean row; the time column only when some row is timed.
fn grid(rows: &[MetricRow]) -> Vec<Vec<String>> {
    let keep = if rows.iter().any(|r| r.seconds.is_some()) { 7 } else { 6 };
    let mut lines: Vec<[String; 7]> = vec![COLUMNS.map(String::from)];
    lines.extend(rows.iter().map(|r| cells(&r.id, &r.report, r.seconds)));
    lines.extend(mean_row(rows));
    lines.into_iter().map(|l| l[..keep].to_vec()).collect()
}

/// One CSV row per pair followed by a `mean` row.
pub fn to_csv(rows: &[MetricRow]) -> String {
    grid(rows).iter().map(|l| l.join(",") + "\n").collect()
}

/// Aligned-column text table with a trailing mean row.
pub fn to_table(rows: &[MetricRow]) -> String {
    let lines = grid(rows);
    let widths: Vec<usize> = (0..lines[0].len()).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
    lines
        .iter()
        .map(|l| {
            let row: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            row.join("  ").trim_end().to_string() + "\n"
        })
        .collect()
}
