//! Synthetic misaligned pairs with recorded ground-truth corner offsets.
//!
//! A sample takes a square crop of a co-registered infrared/visible source
//! pair. The visible crop is distorted so that its content is the source
//! region under the perturbed quadrilateral; registering the distorted crop
//! onto the aligned one therefore recovers the recorded offsets.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dlt_from_offsets, CornerFrame, CornerOffsets, Homography, Point};
use crate::imaging::{gaussian_blur, load_image, save_image, warp_to_size, BitDepth, Image};

/// Resampling attempts before a degenerate corner draw is reported.
pub const MAX_RESAMPLES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    /// Top-left pixel of the crop in the source images.
    pub origin: [usize; 2],
    pub size: usize,
    pub rho: f64,
    pub seed: u64,
}

impl SampleSpec {
    fn check(&self, width: usize, height: usize) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) || self.size < 2 {
            return Err(Error::InvalidParams(format!("size {} rho {}", self.size, self.rho)));
        }
        let [x, y] = self.origin;
        let (xf, yf, last) = (x as f64, y as f64, (self.size - 1) as f64);
        let fits = xf - self.rho >= 0.0
            && yf - self.rho >= 0.0
            && xf + last + self.rho <= (width - 1) as f64
            && yf + last + self.rho <= (height - 1) as f64;
        if !fits {
            return Err(Error::CropOutOfBounds { x, y, size: self.size, margin: self.rho, width, height });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub ir: Image,
    pub distorted: Image,
    pub aligned: Image,
    pub gt: CornerOffsets,
    /// Percent of the crop frame covered by the perturbed quadrilateral.
    pub overlap: f64,
}

/// Crop frame of a sample, in crop pixel coordinates.
pub fn crop_frame(size: usize) -> CornerFrame {
    CornerFrame::for_image(size, size)
}

fn quad(gt: &CornerOffsets, frame: &CornerFrame) -> [Point; 4] {
    let [tl, tr, bl, br] = frame.displaced(gt);
    [tl, tr, br, bl]
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segments_cross(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

fn shoelace(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        a[0] * b[1] - b[0] * a[1]
    })
    .sum::<f64>()
        / 2.0
}

/// Clips `subject` against the convex polygon `clip` (counter-clockwise in
/// the y-down frame means positive shoelace area).
fn clip_polygon(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let orient = shoelace(clip).signum();
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let inside = |p: Point| cross(a, b, p) * orient >= 0.0;
        let input = std::mem::take(&mut out);
        if input.is_empty() {
            break;
        }
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (pin, qin) = (inside(p), inside(q));
            if pin {
                out.push(p);
            }
            if pin != qin {
                let (dp, dq) = (cross(a, b, p), cross(a, b, q));
                let t = dp / (dp - dq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Percent of `frame` covered by the quadrilateral its corners form after
/// displacement by `gt`.
pub fn overlap_rate(gt: &CornerOffsets, frame: &CornerFrame) -> Result<f64> {
    let q = quad(gt, frame);
    if segments_cross(q[0], q[1], q[2], q[3]) || segments_cross(q[1], q[2], q[3], q[0]) {
        return Err(Error::DegenerateQuad);
    }
    if shoelace(&q).abs() < 1e-12 || !gt.is_finite() {
        return Err(Error::DegenerateQuad);
    }
    let c = frame.corners();
    let rect = [c[0], c[1], c[3], c[2]];
    let inter = clip_polygon(&q, &rect);
    let area = if inter.len() < 3 { 0.0 } else { shoelace(&inter).abs() };
    Ok(100.0 * area / shoelace(&rect).abs())
}

fn quad_is_convex(q: &[Point; 4]) -> bool {
    let signs: Vec<f64> = (0..4).map(|i| cross(q[i], q[(i + 1) % 4], q[(i + 2) % 4])).collect();
    signs.iter().all(|s| *s > 0.0) || signs.iter().all(|s| *s < 0.0)
}

/// Crops both sources at the sample's crop frame and distorts the visible crop by
/// uniformly drawn corner offsets in `[-ρ, ρ]`.
pub fn synthesize_pair(ir: &Image, vis: &Image, spec: &SampleSpec) -> Result<DatasetSample> {
    if ir.width() != vis.width() || ir.height() != vis.height() {
        return Err(Error::ShapeMismatch(format!(
            "ir {}x{} vs vis {}x{}",
            ir.width(),
            ir.height(),
            vis.width(),
            vis.height()
        )));
    }
    spec.check(vis.width(), vis.height())?;
    let s = spec.size;
    let frame = crop_frame(s);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut drawn = None;
    for _ in 0..MAX_RESAMPLES {
        let gt = if spec.rho == 0.0 {
            CornerOffsets::zero()
        } else {
            CornerOffsets(std::array::from_fn(|_| {
                [rng.gen_range(-spec.rho..=spec.rho), rng.gen_range(-spec.rho..=spec.rho)]
            }))
        };
        if !quad_is_convex(&quad(&gt, &frame)) {
            continue;
        }
        if let Ok(d) = dlt_from_offsets(&gt, &frame) {
            drawn = Some((gt, d));
            break;
        }
    }
    let (gt, d) = drawn.ok_or(Error::DegenerateCorrespondence("corner draw kept failing"))?;
    let [x, y] = spec.origin;
    let to_source = Homography::translation(x as f64, y as f64).compose(&d)?;
    let (distorted, _) = warp_to_size(vis, &to_source.invert()?, s, s)?;
    Ok(DatasetSample {
        ir: ir.crop(x, y, s, s)?,
        distorted,
        aligned: vis.crop(x, y, s, s)?,
        gt,
        overlap: overlap_rate(&gt, &frame)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    /// Paths relative to the manifest's directory.
    pub ir: PathBuf,
    pub vis: PathBuf,
    pub aligned: PathBuf,
    pub offsets: CornerOffsets,
    pub crop: Crop,
    pub seed: u64,
    pub overlap: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub size: usize,
    pub rho: f64,
    pub seed: u64,
    pub requested: usize,
    pub skipped: usize,
    pub mean_overlap: f64,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    /// Reads and validates a manifest: every referenced image must exist and
    /// every offset must lie within `[-ρ, ρ]`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for r in &m.records {
            for p in [&r.ir, &r.vis, &r.aligned] {
                if !dir.join(p).is_file() {
                    return Err(Error::InvalidConfig(format!("manifest entry {} missing {}", r.index, p.display())));
                }
            }
            if r.offsets.max_abs() > m.rho || !r.offsets.is_finite() {
                return Err(Error::InvalidConfig(format!("manifest entry {} offsets exceed rho", r.index)));
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// One-row summary table: name, pair count, size, rho, mean overlap, skipped.
    pub fn summary_table(&self) -> String {
        let head = ["Dataset", "Pairs", "Size", "rho", "Overlap", "Skipped"];
        let row = [
            self.name.clone(),
            self.records.len().to_string(),
            format!("{0}x{0}", self.size),
            format!("{}", self.rho),
            format!("{:.1}%", self.mean_overlap),
            self.skipped.to_string(),
        ];
        let widths: Vec<usize> = head.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
        let line = |cells: &[String]| {
            cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ")
        };
        let head: Vec<String> = head.iter().map(|s| s.to_string()).collect();
        format!("{}\n{}\n", line(&head), line(&row))
    }
}

/// Per-sample seed from the master seed (SplitMix64 finalizer).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Co-registered pairs `ir/<name>.png` + `vis/<name>.png`, sorted by name.
pub fn list_source_pairs(src_dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let ir_dir = src_dir.join("ir");
    let entries = match std::fs::read_dir(&ir_dir) {
        Ok(e) => e,
        Err(_) => return Err(Error::NoSourcePairs(src_dir.to_path_buf())),
    };
    let mut pairs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&ir_dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let vis = src_dir.join("vis").join(name);
        if path.is_file() && vis.is_file() {
            pairs.push((name.to_string(), path, vis));
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoSourcePairs(src_dir.to_path_buf()));
    }
    pairs.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(pairs)
}

/// Saves through a temporary sibling and a rename, so a reader never sees a partial file.
pub fn save_image_atomic(img: &Image, path: &Path) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out.png");
    let tmp = path.with_file_name(format!(".{name}.tmp.png"));
    save_image(img, &tmp, BitDepth::Eight)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Generates `count` samples from the pairs in `src_dir`, cycling through
/// the sources, and writes images plus `manifest.json` under `out_dir`.
pub fn synthesize_set(src_dir: &Path, out_dir: &Path, size: usize, rho: f64, count: usize, seed: u64) -> Result<Manifest> {
    if !(rho >= 0.0 && rho.is_finite()) || size < crate::imaging::PYRAMID_MIN_SIDE {
        return Err(Error::InvalidParams(format!("size {size} rho {rho}")));
    }
    let pairs = list_source_pairs(src_dir)?;
    for sub in ["ir", "vis_distorted", "vis_aligned"] {
        std::fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::io(out_dir.join(sub), e))?;
    }
    let sources: Vec<Result<(Image, Image)>> = pairs
        .par_iter()
        .map(|(_, ir, vis)| Ok((load_image(ir)?, load_image(vis)?)))
        .collect();
    let margin = rho.ceil() as usize;
    let results: Vec<Result<ManifestRecord>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let which = i % pairs.len();
            let (ir, vis) = sources[which].as_ref().map_err(|e| Error::InvalidImage(e.to_string()))?;
            let sample_seed = derive_seed(seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed ^ 0x6f72_6967_696e);
            let mut span = |extent: usize| -> Result<usize> {
                let hi = extent.checked_sub(size + margin).filter(|hi| *hi >= margin);
                let hi = hi.ok_or(Error::CropOutOfBounds {
                    x: margin,
                    y: margin,
                    size,
                    margin: rho,
                    width: vis.width(),
                    height: vis.height(),
                })?;
                Ok(rng.gen_range(margin..=hi))
            };
            let origin = [span(vis.width())?, span(vis.height())?];
            let spec = SampleSpec { origin, size, rho, seed: sample_seed };
            let sample = synthesize_pair(ir, vis, &spec)?;
            let file = PathBuf::from(format!("{i:06}.png"));
            let rec = ManifestRecord {
                index: i,
                ir: Path::new("ir").join(&file),
                vis: Path::new("vis_distorted").join(&file),
                aligned: Path::new("vis_aligned").join(&file),
                offsets: sample.gt,
                crop: Crop { x: origin[0], y: origin[1], size },
                seed: sample_seed,
                overlap: sample.overlap,
                source: pairs[which].0.clone(),
            };
            save_image_atomic(&sample.ir, &out_dir.join(&rec.ir))?;
            save_image_atomic(&sample.distorted, &out_dir.join(&rec.vis))?;
            save_image_atomic(&sample.aligned, &out_dir.join(&rec.aligned))?;
            Ok(rec)
        })
        .collect();
    let mut records = Vec::new();
    let mut skipped = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                log::warn!("sample {i} skipped: {e}");
                skipped += 1;
            }
        }
    }
    let mean_overlap = if records.is_empty() {
        0.0
    } else {
        records.iter().map(|r| r.overlap).sum::<f64>() / records.len() as f64
    };
    let name = out_dir.file_name().and_then(|n| n.to_str()).unwrap_or("dataset").to_string();
    let manifest = Manifest { name, size, rho, seed, requested: count, skipped, mean_overlap, records };
    write_atomic(&out_dir.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;
    log::info!("{} samples written to {}, {} skipped", manifest.records.len(), out_dir.display(), skipped);
    Ok(manifest)
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise on a `cell`-pixel lattice.
fn value_noise(width: usize, height: usize, cell: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gw = (width as f64 / cell).ceil() as usize + 2;
    let gh = (height as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64 / cell, y as f64 / cell);
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (smoothstep(fx - ix as f64), smoothstep(fy - iy as f64));
            let at = |i: usize, j: usize| lattice[j * gw + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

struct Shape {
    center: Point,
    half: [f64; 2],
    angle: f64,
    ellipse: bool,
    vis: f64,
    ir: f64,
}

impl Shape {
    /// Approximate signed distance, negative inside.
    fn distance(&self, p: Point) -> f64 {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        if self.ellipse {
            let r = ((u / self.half[0]).powi(2) + (v / self.half[1]).powi(2)).sqrt();
            (r - 1.0) * self.half[0].min(self.half[1])
        } else {
            (u.abs() - self.half[0]).max(v.abs() - self.half[1])
        }
    }
}

/// A co-registered surrogate infrared/visible scene pair. Both share the
/// same geometry; region intensities and textures differ between them.
pub fn procedural_pair(width: usize, height: usize, seed: u64) -> (Image, Image) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let shapes: Vec<Shape> = (0..18)
        .map(|_| Shape {
            center: [rng.gen_range(0.0..w), rng.gen_range(0.0..h)],
            half: [rng.gen_range(8.0..w / 5.0), rng.gen_range(8.0..h / 5.0)],
            angle: rng.gen_range(0.0..PI),
            ellipse: rng.gen_bool(0.5),
            vis: rng.gen_range(0.1..0.9),
            ir: rng.gen_range(0.1..0.9),
        })
        .collect();
    let fine = value_noise(width, height, 5.0, &mut rng);
    let coarse = value_noise(width, height, 40.0, &mut rng);
    let heat = value_noise(width, height, 24.0, &mut rng);
    let (fa, fb) = (rng.gen_range(0.01..0.03), rng.gen_range(0.01..0.03));
    let mut vis = Vec::with_capacity(width * height);
    let mut ir = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let p = [x as f64, y as f64];
            let mut v = 0.5 + 0.15 * (fa * p[0] + fb * p[1]).sin() + 0.1 * coarse[i];
            let mut t = 0.35 + 0.2 * heat[i];
            for s in &shapes {
                let a = smoothstep(0.5 - s.distance(p) / 2.0);
                v = v * (1.0 - a) + s.vis * a;
                t = t * (1.0 - a) + s.ir * a;
            }
            vis.push((v + 0.12 * fine[i]).clamp(0.0, 1.0) as f32);
            ir.push((t + 0.04 * fine[i]).clamp(0.0, 1.0) as f32);
        }
    }
    let blur = |d: Vec<f32>| gaussian_blur(&Image::new(width, height, 1, d).expect("valid raster"), 1.0).expect("sigma > 0");
    (blur(ir), blur(vis))
}

/// Writes `count` procedural pairs as `ir/scene_NNNN.png` and `vis/scene_NNNN.png`.
pub fn write_procedural_sources(dir: &Path, count: usize, width: usize, height: usize, seed: u64) -> Result<()> {
    for sub in ["ir", "vis"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    (0..count).into_par_iter().try_for_each(|i| {
        let (ir, vis) = procedural_pair(width, height, derive_seed(seed, i as u64));
        let name = format!("scene_{i:04}.png");
        save_image_atomic(&ir, &dir.join("ir").join(&name))?;
        save_image_atomic(&vis, &dir.join("vis").join(&name))
    })
}
