//! Local correlation volumes and the alternating 1D/2D search.
//!
//! A candidate shift `(dx, dy)` compares source position `(x, y)` with target
//! position `(x + dx, y + dy)`; the recovered field is therefore the
//! displacement of source content in the target. Scores are the channel
//! inner product of unit-normalized features. Scaling both vectors by `√C`
//! and dividing by `C` cancels, so the score is bounded by `[-1, 1]`.
//! Channels are always summed in ascending order in f64 and the result
//! rounded once to f32, which keeps every volume bit-identical to the
//! corresponding slice of [`global_correlation_oracle`].

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ShiftLayout {
    Line { axis: Axis, radius: usize },
    Grid { radius: usize, dilation: usize },
    Custom,
}

/// Ordered, duplicate-free list of integer candidate shifts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShiftSet {
    layout: ShiftLayout,
    shifts: Vec<[i32; 2]>,
}

impl ShiftSet {
    pub fn new(shifts: Vec<[i32; 2]>) -> Result<Self> {
        if shifts.is_empty() {
            return Err(Error::EmptyShiftSet);
        }
        for (i, s) in shifts.iter().enumerate() {
            if shifts[..i].contains(s) {
                return Err(Error::ShapeMismatch(format!("duplicate shift {s:?}")));
            }
        }
        Ok(Self { layout: ShiftLayout::Custom, shifts })
    }

    /// `[-r, r]` along one axis, `2r + 1` entries.
    pub fn line(axis: Axis, radius: usize) -> Self {
        let r = radius as i32;
        let shifts = (-r..=r)
            .map(|t| match axis {
                Axis::Horizontal => [t, 0],
                Axis::Vertical => [0, t],
            })
            .collect();
        Self { layout: ShiftLayout::Line { axis, radius }, shifts }
    }

    /// `√(2r+1) × √(2r+1)` grid with spacing `dilation`, row-major.
    pub fn grid(radius: usize, dilation: usize) -> Result<Self> {
        let k = 2 * radius + 1;
        let side = (k as f64).sqrt().round() as usize;
        if side * side != k {
            return Err(Error::InvalidRadius(radius));
        }
        if dilation == 0 {
            return Err(Error::InvalidConfig("dilation must be at least 1".into()));
        }
        let half = (side / 2) as i32;
        let d = dilation as i32;
        let shifts = (-half..=half).flat_map(|j| (-half..=half).map(move |i| [i * d, j * d])).collect();
        Ok(Self { layout: ShiftLayout::Grid { radius, dilation }, shifts })
    }

    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }

    pub fn shifts(&self) -> &[[i32; 2]] {
        &self.shifts
    }

    pub fn layout(&self) -> ShiftLayout {
        self.layout
    }

    fn index_of(&self, s: [i32; 2]) -> Option<usize> {
        self.shifts.iter().position(|&t| t == s)
    }

    /// Grid spacing used for sub-pixel neighbours.
    fn step(&self) -> i32 {
        match self.layout {
            ShiftLayout::Grid { dilation, .. } => dilation as i32,
            _ => 1,
        }
    }

    /// Largest |dx| and |dy| over the set.
    pub fn reach(&self) -> [usize; 2] {
        let rx = self.shifts.iter().map(|s| s[0].unsigned_abs() as usize).max().unwrap_or(0);
        let ry = self.shifts.iter().map(|s| s[1].unsigned_abs() as usize).max().unwrap_or(0);
        [rx, ry]
    }
}

/// `k` scores per position, position-major (`[y][x][k]`).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationVolume {
    width: usize,
    height: usize,
    shifts: ShiftSet,
    scores: Vec<f32>,
}

impl CorrelationVolume {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shift_set(&self) -> &ShiftSet {
        &self.shifts
    }

    pub fn k(&self) -> usize {
        self.shifts.len()
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        let k = self.k();
        let i = (y * self.width + x) * k;
        &self.scores[i..i + k]
    }

    /// Midpoint-centred scores: `½·(V(x, s) + V(x − s, s))`, i.e. the pair
    /// `(x, x + s)` averaged with `(x − s, x)`. For identical inputs the result
    /// is exactly symmetric in `s`. Where `x − s` leaves the map, `V(x, s)` is kept.
    pub fn centered(&self) -> CorrelationVolume {
        let (w, h, k) = (self.width as i64, self.height as i64, self.k());
        let mut scores = self.scores.clone();
        for y in 0..h {
            for x in 0..w {
                for (j, s) in self.shifts.shifts().iter().enumerate() {
                    let (px, py) = (x - s[0] as i64, y - s[1] as i64);
                    if px < 0 || py < 0 || px >= w || py >= h {
                        continue;
                    }
                    let a = self.scores[((y * w + x) as usize) * k + j] as f64;
                    let b = self.scores[((py * w + px) as usize) * k + j] as f64;
                    scores[((y * w + x) as usize) * k + j] = (0.5 * (a + b)) as f32;
                }
            }
        }
        CorrelationVolume { width: self.width, height: self.height, shifts: self.shifts.clone(), scores }
    }

    /// Mean of each candidate's score over a `(2a+1)²` window of positions,
    /// clipped to the map. `a = 0` returns a copy.
    pub fn box_filtered(&self, a: usize) -> CorrelationVolume {
        if a == 0 {
            return self.clone();
        }
        let (w, h, k) = (self.width, self.height, self.k());
        let mut rows = vec![0.0f64; w * h * k];
        for y in 0..h {
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(a), (x + a).min(w - 1));
                let out = &mut rows[(y * w + x) * k..(y * w + x + 1) * k];
                for xx in x0..=x1 {
                    for (o, s) in out.iter_mut().zip(self.at(xx, y)) {
                        *o += *s as f64;
                    }
                }
            }
        }
        let mut scores = vec![0.0f32; w * h * k];
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(a), (y + a).min(h - 1));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(a), (x + a).min(w - 1));
                let n = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                for j in 0..k {
                    let sum: f64 = (y0..=y1).map(|yy| rows[(yy * w + x) * k + j]).sum();
                    scores[(y * w + x) * k + j] = (sum / n) as f32;
                }
            }
        }
        CorrelationVolume { width: w, height: h, shifts: self.shifts.clone(), scores }
    }

    /// True when every candidate target of `(x, y)` lies inside the map.
    pub fn candidates_in_bounds(&self, x: usize, y: usize) -> bool {
        let [rx, ry] = self.shifts.reach();
        x >= rx && y >= ry && x + rx < self.width && y + ry < self.height
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s as f32
}

fn check_pair(src: &FeatureMap, tgt: &FeatureMap) -> Result<()> {
    if !src.same_shape(tgt) {
        return Err(Error::ShapeMismatch(format!(
            "source {}x{}x{} vs target {}x{}x{}",
            src.channels(),
            src.width(),
            src.height(),
            tgt.channels(),
            tgt.width(),
            tgt.height()
        )));
    }
    Ok(())
}

/// Scores every position against each candidate shift; out-of-bounds targets score 0.
pub fn local_correlation(src: &FeatureMap, tgt: &FeatureMap, shifts: &ShiftSet) -> Result<CorrelationVolume> {
    check_pair(src, tgt)?;
    if shifts.is_empty() {
        return Err(Error::EmptyShiftSet);
    }
    let (w, h, k) = (src.width(), src.height(), shifts.len());
    let mut scores = vec![0.0f32; w * h * k];
    scores.par_chunks_mut(w * k).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let a = src.at(x, y);
            for (j, s) in shifts.shifts().iter().enumerate() {
                let (tx, ty) = (x as i64 + s[0] as i64, y as i64 + s[1] as i64);
                if tx < 0 || ty < 0 || tx >= w as i64 || ty >= h as i64 {
                    continue;
                }
                row[x * k + j] = dot(a, tgt.at(tx as usize, ty as usize));
            }
        }
    });
    Ok(CorrelationVolume { width: w, height: h, shifts: shifts.clone(), scores })
}

/// 1D search along `axis` with `2r + 1` candidates.
pub fn search_1d(src: &FeatureMap, tgt: &FeatureMap, radius: usize, axis: Axis) -> Result<CorrelationVolume> {
    local_correlation(src, tgt, &ShiftSet::line(axis, radius))
}

/// Dilated `√(2r+1)²` grid search.
pub fn search_2d(src: &FeatureMap, tgt: &FeatureMap, radius: usize, dilation: usize) -> Result<CorrelationVolume> {
    local_correlation(src, tgt, &ShiftSet::grid(radius, dilation)?)
}

/// Largest input accepted by [`global_correlation_oracle`].
pub const ORACLE_MAX_POSITIONS: usize = 4096;

/// All-pairs correlation: `scores[(ys*W + xs) * W*H + (yt*W + xt)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalVolume {
    pub width: usize,
    pub height: usize,
    pub scores: Vec<f32>,
}

impl GlobalVolume {
    pub fn score(&self, src: (usize, usize), tgt: (usize, usize)) -> f32 {
        let n = self.width * self.height;
        self.scores[(src.1 * self.width + src.0) * n + tgt.1 * self.width + tgt.0]
    }

    /// The local volume this global volume implies for `shifts`.
    pub fn slice(&self, shifts: &ShiftSet) -> Vec<f32> {
        let (w, h) = (self.width as i64, self.height as i64);
        let mut out = Vec::with_capacity(self.width * self.height * shifts.len());
        for y in 0..h {
            for x in 0..w {
                for s in shifts.shifts() {
                    let (tx, ty) = (x + s[0] as i64, y + s[1] as i64);
                    out.push(if tx < 0 || ty < 0 || tx >= w || ty >= h {
                        0.0
                    } else {
                        self.score((x as usize, y as usize), (tx as usize, ty as usize))
                    });
                }
            }
        }
        out
    }
}

/// Brute-force reference: every source position against every target position.
pub fn global_correlation_oracle(src: &FeatureMap, tgt: &FeatureMap) -> Result<GlobalVolume> {
    check_pair(src, tgt)?;
    let n = src.width() * src.height();
    if n > ORACLE_MAX_POSITIONS {
        return Err(Error::InputTooLarge(n));
    }
    let c = src.channels();
    let (a, b) = (src.data(), tgt.data());
    let mut scores = Vec::with_capacity(n * n);
    for p in 0..n {
        for q in 0..n {
            let mut s = 0.0f64;
            for ch in 0..c {
                s += a[p * c + ch] as f64 * b[q * c + ch] as f64;
            }
            scores.push(s as f32);
        }
    }
    Ok(GlobalVolume { width: src.width(), height: src.height(), scores })
}

/// Per-position best shift and a confidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftField {
    width: usize,
    height: usize,
    shifts: Vec<[f64; 2]>,
    confidence: Vec<f64>,
}

impl ShiftField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn shift(&self, x: usize, y: usize) -> [f64; 2] {
        self.shifts[y * self.width + x]
    }

    #[inline]
    pub fn confidence(&self, x: usize, y: usize) -> f64 {
        self.confidence[y * self.width + x]
    }
}

/// `a` ranks strictly before `b`: higher score, then smaller magnitude, then lexicographic.
fn ranks_before(sa: f32, a: [i32; 2], sb: f32, b: [i32; 2]) -> bool {
    if sa != sb {
        return sa > sb;
    }
    let (ma, mb) = (a[0] * a[0] + a[1] * a[1], b[0] * b[0] + b[1] * b[1]);
    if ma != mb {
        return ma < mb;
    }
    a < b
}

/// Vertex offset of the parabola through `(−1, l)`, `(0, c)`, `(1, r)`.
fn parabola_peak(l: f32, c: f32, r: f32) -> f64 {
    let (l, c, r) = (l as f64, c as f64, r as f64);
    let denom = l - 2.0 * c + r;
    if denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
}

/// Argmax per position with a softmax-margin confidence and optional
/// parabolic sub-pixel refinement along each grid axis.
pub fn shift_field(vol: &CorrelationVolume, subpixel: bool) -> ShiftField {
    let set = vol.shift_set();
    let cand = set.shifts();
    let step = set.step();
    let n = vol.width * vol.height;
    let mut shifts = vec![[0.0; 2]; n];
    let mut confidence = vec![0.0; n];
    for p in 0..n {
        let sc = &vol.scores[p * cand.len()..(p + 1) * cand.len()];
        let mut best = 0;
        for j in 1..cand.len() {
            if ranks_before(sc[j], cand[j], sc[best], cand[best]) {
                best = j;
            }
        }
        let mut second: Option<usize> = None;
        for j in 0..cand.len() {
            if j != best && second.map_or(true, |s| ranks_before(sc[j], cand[j], sc[s], cand[s])) {
                second = Some(j);
            }
        }
        let max = sc[best] as f64;
        let z: f64 = sc.iter().map(|&s| (s as f64 - max).exp()).sum();
        let p_best = 1.0 / z;
        let p_second = second.map_or(0.0, |s| (sc[s] as f64 - max).exp() / z);
        confidence[p] = p_best - p_second;

        let b = cand[best];
        let mut out = [b[0] as f64, b[1] as f64];
        if subpixel {
            for axis in 0..2 {
                let mut lo = b;
                let mut hi = b;
                lo[axis] -= step;
                hi[axis] += step;
                if let (Some(l), Some(r)) = (set.index_of(lo), set.index_of(hi)) {
                    out[axis] += parabola_peak(sc[l], sc[best], sc[r]) * step as f64;
                }
            }
        }
        shifts[p] = out;
    }
    ShiftField { width: vol.width, height: vol.height, shifts, confidence }
}

#[derive(Serialize)]
struct VolumeHeader<'a> {
    format: &'static str,
    width: usize,
    height: usize,
    k: usize,
    layout: &'static str,
    shift_set: &'a ShiftSet,
    data_file: String,
}

#[derive(Serialize)]
struct FieldHeader {
    format: &'static str,
    width: usize,
    height: usize,
    layout: &'static str,
    data_file: String,
}

/// Writes `<stem>.corr.json` + `<stem>.corr.f32` and `<stem>.field.json` +
/// `<stem>.field.f32` (little-endian f32).
pub fn write_debug_dump(dir: &Path, stem: &str, vol: &CorrelationVolume, field: &ShiftField) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    let vol_bin = format!("{stem}.corr.f32");
    write(vol_bin.clone(), vol.scores.iter().flat_map(|v| v.to_le_bytes()).collect())?;
    write(
        format!("{stem}.corr.json"),
        to_json(&VolumeHeader {
            format: "irreg-corr-f32le-v1",
            width: vol.width,
            height: vol.height,
            k: vol.k(),
            layout: "[y][x][k]",
            shift_set: &vol.shifts,
            data_file: vol_bin,
        }),
    )?;
    let field_bin = format!("{stem}.field.f32");
    let mut bytes = Vec::with_capacity(field.shifts.len() * 12);
    for (s, c) in field.shifts.iter().zip(&field.confidence) {
        for v in [s[0] as f32, s[1] as f32, *c as f32] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write(field_bin.clone(), bytes)?;
    write(
        format!("{stem}.field.json"),
        to_json(&FieldHeader {
            format: "irreg-field-f32le-v1",
            width: field.width,
            height: field.height,
            layout: "[y][x][dx, dy, confidence]",
            data_file: field_bin,
        }),
    )
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec_pretty(v).expect("headers serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_volume_is_symmetric_for_identical_maps() {
        let a = random_map(5, 12, 10, 40);
        let vol = search_2d(&a, &a, 4, 1).unwrap().centered();
        let set = vol.shift_set().shifts().to_vec();
        for y in 1..9 {
            for x in 1..11 {
                for (j, s) in set.iter().enumerate() {
                    let m = set.iter().position(|t| *t == [-s[0], -s[1]]).unwrap();
                    assert_eq!(vol.at(x, y)[j], vol.at(x, y)[m]);
                }
            }
        }
        let field = shift_field(&vol.box_filtered(1), true);
        for y in 2..8 {
            for x in 2..10 {
                assert_eq!(field.shift(x, y), [0.0, 0.0]);
            }
        }
    }

    #[test]
    fn box_filter_matches_direct_mean() {
        let a = random_map(4, 9, 7, 31);
        let b = random_map(4, 9, 7, 32);
        let vol = search_1d(&a, &b, 2, Axis::Horizontal).unwrap();
        assert_eq!(vol.box_filtered(0), vol);
        let f = vol.box_filtered(1);
        for y in 0..7usize {
            for x in 0..9usize {
                for j in 0..vol.k() {
                    let (mut s, mut n) = (0.0f64, 0.0);
                    for yy in y.saturating_sub(1)..=(y + 1).min(6) {
                        for xx in x.saturating_sub(1)..=(x + 1).min(8) {
                            s += vol.at(xx, yy)[j] as f64;
                            n += 1.0;
                        }
                    }
                    assert!((f.at(x, y)[j] as f64 - s / n).abs() < 1e-6);
                }
            }
        }
    }
    use crate::features::normalize_features;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, w: usize, h: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * w * h).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        normalize_features(&FeatureMap::new(c, w, h, data).unwrap())
    }

    /// `f` translated so that content at `(x, y)` appears at `(x + dx, y + dy)`.
    fn translated(f: &FeatureMap, dx: i64, dy: i64) -> FeatureMap {
        let (c, w, h) = (f.channels(), f.width(), f.height());
        let mut data = vec![0.0; c * w * h];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (sx, sy) = (x - dx, y - dy);
                if sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64 {
                    let i = (y as usize * w + x as usize) * c;
                    data[i..i + c].copy_from_slice(f.at(sx as usize, sy as usize));
                }
            }
        }
        FeatureMap::new(c, w, h, data).unwrap()
    }

    #[test]
    fn shift_sets() {
        let h = ShiftSet::line(Axis::Horizontal, 4);
        assert_eq!(h.len(), 9);
        assert_eq!(h.shifts()[0], [-4, 0]);
        assert_eq!(h.shifts()[8], [4, 0]);
        assert!(ShiftSet::line(Axis::Vertical, 4).shifts().iter().all(|s| s[0] == 0));
        let g = ShiftSet::grid(4, 1).unwrap();
        assert_eq!(g.shifts(), &[[-1, -1], [0, -1], [1, -1], [-1, 0], [0, 0], [1, 0], [-1, 1], [0, 1], [1, 1]]);
        let g2 = ShiftSet::grid(4, 2).unwrap();
        assert!(g2.shifts().iter().all(|s| s.iter().all(|v| [-2, 0, 2].contains(v))));
        assert!(matches!(ShiftSet::grid(3, 1), Err(Error::InvalidRadius(3))));
        assert!(matches!(ShiftSet::new(vec![]), Err(Error::EmptyShiftSet)));
    }

    #[test]
    fn all_ones_scores_one_in_bounds() {
        let f = normalize_features(&FeatureMap::new(4, 6, 5, vec![1.0; 120]).unwrap());
        let vol = search_1d(&f, &f, 2, Axis::Horizontal).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                for (j, s) in vol.shift_set().shifts().iter().enumerate() {
                    let tx = x as i32 + s[0];
                    let expect = if (0..6).contains(&tx) { 1.0 } else { 0.0 };
                    assert!((vol.at(x, y)[j] - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn self_match_is_optimal_and_bounded() {
        let f = random_map(8, 12, 10, 1);
        for vol in [search_1d(&f, &f, 4, Axis::Vertical).unwrap(), search_2d(&f, &f, 4, 2).unwrap()] {
            let zero = vol.shift_set().index_of([0, 0]).unwrap();
            for y in 0..10 {
                for x in 0..12 {
                    let s = vol.at(x, y);
                    assert!((s[zero] - 1.0).abs() < 1e-6);
                    assert!(s.iter().all(|&v| v <= s[zero] + 1e-6 && v >= -1.0 - 1e-6));
                }
            }
            let field = shift_field(&vol, false);
            assert!(field.shifts.iter().all(|s| *s == [0.0, 0.0]));
            let refined = shift_field(&vol, true);
            assert!(refined.shifts.iter().all(|s| s[0].abs() <= 0.5 * 2.0 && s[1].abs() <= 0.5 * 2.0));
        }
    }

    #[test]
    fn local_volumes_are_global_slices() {
        let (a, b) = (random_map(8, 16, 16, 2), random_map(8, 16, 16, 3));
        let g = global_correlation_oracle(&a, &b).unwrap();
        for set in [
            ShiftSet::line(Axis::Horizontal, 4),
            ShiftSet::line(Axis::Vertical, 4),
            ShiftSet::grid(4, 1).unwrap(),
            ShiftSet::grid(4, 2).unwrap(),
        ] {
            let vol = local_correlation(&a, &b, &set).unwrap();
            let slice = g.slice(&set);
            assert!(vol.scores().iter().zip(&slice).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn oracle_hand_example() {
        let a = FeatureMap::new(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8, 1.0, 0.0]).unwrap();
        let b = FeatureMap::new(2, 2, 2, vec![0.0, 1.0, 1.0, 0.0, 0.8, 0.6, 0.6, 0.8]).unwrap();
        let g = global_correlation_oracle(&a, &b).unwrap();
        let want: [[f32; 4]; 4] = [
            [0.0, 1.0, 0.8, 0.6],
            [1.0, 0.0, 0.6, 0.8],
            [0.8, 0.6, 0.96, 0.36 + 0.64],
            [0.0, 1.0, 0.8, 0.6],
        ];
        for p in 0..4 {
            for q in 0..4 {
                assert!((g.scores[p * 4 + q] - want[p][q]).abs() < 1e-6, "({p},{q})");
            }
        }
        let zero = FeatureMap::zeros(2, 2, 2);
        assert!(global_correlation_oracle(&a, &zero).unwrap().scores.iter().all(|&s| s == 0.0));
        let big = FeatureMap::zeros(1, 65, 64);
        assert!(matches!(global_correlation_oracle(&big, &big), Err(Error::InputTooLarge(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (a, b) = (random_map(8, 8, 8, 1), random_map(4, 8, 8, 1));
        assert!(matches!(search_1d(&a, &b, 4, Axis::Horizontal), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn recovers_constructed_horizontal_shift() {
        let src = random_map(8, 24, 20, 4);
        let tgt = translated(&src, 2, 0);
        let field = shift_field(&search_1d(&src, &tgt, 4, Axis::Horizontal).unwrap(), false);
        for y in 0..20 {
            for x in 4..18 {
                assert_eq!(field.shift(x, y), [2.0, 0.0]);
            }
        }
        let tgt_v = translated(&src, 0, -3);
        let field = shift_field(&search_1d(&src, &tgt_v, 4, Axis::Vertical).unwrap(), false);
        for y in 4..16 {
            for x in 0..24 {
                assert_eq!(field.shift(x, y), [0.0, -3.0]);
            }
        }
    }

    #[test]
    fn vertical_search_on_horizontal_pair_stays_at_zero() {
        // content constant along x: a horizontal shift changes nothing, so the
        // vertical search must settle on zero
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f32>> = (0..16).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let data: Vec<f32> = (0..16).flat_map(|y| (0..16).flat_map(|_| rows[y].clone()).collect::<Vec<_>>()).collect();
        let src = normalize_features(&FeatureMap::new(4, 16, 16, data).unwrap());
        let tgt = translated(&src, 2, 0);
        let field = shift_field(&search_1d(&src, &tgt, 4, Axis::Vertical).unwrap(), false);
        for y in 4..12 {
            for x in 2..16 {
                assert_eq!(field.shift(x, y), [0.0, 0.0]);
            }
        }
    }

    #[test]
    fn single_candidate_field() {
        let f = random_map(3, 4, 4, 6);
        let vol = local_correlation(&f, &f, &ShiftSet::new(vec![[1, 0]]).unwrap()).unwrap();
        let field = shift_field(&vol, true);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(field.shift(x, y), [1.0, 0.0]);
                assert_eq!(field.confidence(x, y), 1.0);
            }
        }
    }

    #[test]
    fn ties_prefer_small_then_lexicographic() {
        let f = FeatureMap::zeros(2, 3, 3);
        let vol = search_2d(&f, &f, 4, 1).unwrap();
        let field = shift_field(&vol, false);
        assert_eq!(field.shift(1, 1), [0.0, 0.0]);
        assert_eq!(field.confidence(1, 1), 0.0);
        let set = ShiftSet::new(vec![[1, 0], [0, 1], [-1, 0]]).unwrap();
        let vol = local_correlation(&f, &f, &set).unwrap();
        assert_eq!(shift_field(&vol, false).shift(1, 1), [-1.0, 0.0]);
    }

    #[test]
    fn subpixel_peak_recovers_parabola_vertex() {
        assert!((parabola_peak(0.5, 1.0, 0.5)).abs() < 1e-12);
        // samples of 1 - (t - 0.25)^2 at t = -1, 0, 1
        let f = |t: f64| (1.0 - (t - 0.25) * (t - 0.25)) as f32;
        assert!((parabola_peak(f(-1.0), f(0.0), f(1.0)) - 0.25).abs() < 1e-6);
        assert_eq!(parabola_peak(0.2, 1.0, 1.0), 0.5);
        assert_eq!(parabola_peak(0.0, 1.0, 2.0), 0.0);
    }

    #[test]
    fn debug_dump_writes_raw_and_headers() {
        let f = random_map(4, 8, 6, 7);
        let vol = search_2d(&f, &f, 4, 1).unwrap();
        let field = shift_field(&vol, false);
        let dir = tempfile::tempdir().unwrap();
        write_debug_dump(dir.path(), "l3r1", &vol, &field).unwrap();
        let raw = fs::read(dir.path().join("l3r1.corr.f32")).unwrap();
        assert_eq!(raw.len(), 8 * 6 * 9 * 4);
        let first = f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]);
        assert_eq!(first, vol.scores()[0]);
        let header: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("l3r1.corr.json")).unwrap()).unwrap();
        assert_eq!(header["k"], 9);
        assert_eq!(header["shift_set"]["layout"]["mode"], "grid");
        assert_eq!(fs::read(dir.path().join("l3r1.field.f32")).unwrap().len(), 8 * 6 * 12);
    }

    proptest! {
        #[test]
        fn interior_argmax_follows_target_translation(seed in 0u64..500, dx in -4i64..=4, dy in -1i64..=1) {
            let src = random_map(8, 20, 20, seed);
            let tgt = translated(&src, dx, dy);
            let vol = search_2d(&src, &tgt, 4, 1).unwrap();
            let field = shift_field(&vol, false);
            if dx.abs() <= 1 {
                for y in 3..17 {
                    for x in 3..17 {
                        prop_assert_eq!(field.shift(x, y), [dx as f64, dy as f64]);
                    }
                }
            }
            let hvol = search_1d(&src, &translated(&src, dx, 0), 4, Axis::Horizontal).unwrap();
            let hfield = shift_field(&hvol, false);
            for y in 0..20 {
                for x in 5..15 {
                    prop_assert_eq!(hfield.shift(x, y), [dx as f64, 0.0]);
                }
            }
        }

        #[test]
        fn fields_are_deterministic(seed in 0u64..100) {
            let (a, b) = (random_map(8, 10, 10, seed), random_map(8, 10, 10, seed + 1));
            let v1 = search_2d(&a, &b, 4, 2).unwrap();
            let v2 = search_2d(&a, &b, 4, 2).unwrap();
            prop_assert_eq!(shift_field(&v1, true), shift_field(&v2, true));
        }
    }
}
