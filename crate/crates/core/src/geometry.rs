//! Homography algebra for the 4-point corner parameterization.
//!
//! Corners are always ordered top-left, top-right, bottom-left, bottom-right.
//! Integer pixel coordinates address pixel centers, so the frame of a `W×H`
//! image spans `(0, 0)` to `(W-1, H-1)`.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Smallest admissible projective denominator when mapping frame corners.
pub const W_FLOOR: f64 = 1e-9;
const DET_FLOOR: f64 = 1e-12;
/// Frames wider than this are Hartley-normalized before the DLT solve.
const NORMALIZE_EXTENT: f64 = 64.0;

/// 3×3 projective transform mapping source pixel coordinates to target pixel
/// coordinates, stored with `m[2][2] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self { m: Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0) }
    }

    /// Normalizes `m` so that its bottom-right entry is 1 and checks invertibility.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotNormalizable);
        }
        let scale = m.abs().max();
        if m[(2, 2)].abs() <= scale * 1e-14 {
            return Err(Error::NotNormalizable);
        }
        let m = m / m[(2, 2)];
        let det = m.determinant();
        if det.abs() < DET_FLOOR {
            return Err(Error::SingularMatrix(det.abs()));
        }
        Ok(Self { m })
    }

    pub fn from_rows(rows: [f64; 9]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_row_slice(&rows))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Row-major entries.
    pub fn to_rows(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[(0, 0)], m[(0, 1)], m[(0, 2)],
            m[(1, 0)], m[(1, 1)], m[(1, 2)],
            m[(2, 0)], m[(2, 1)], m[(2, 2)],
        ]
    }

    pub fn determinant(&self) -> f64 {
        self.m.determinant()
    }

    /// Maps `p` through the homography. Points on the line at infinity map to NaN.
    pub fn project(&self, p: Point) -> Point {
        let v = self.m * Vector3::new(p[0], p[1], 1.0);
        [v[0] / v[2], v[1] / v[2]]
    }

    /// Projective denominator of `p`.
    pub fn w(&self, p: Point) -> f64 {
        self.m[(2, 0)] * p[0] + self.m[(2, 1)] * p[1] + self.m[(2, 2)]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        Homography::from_matrix(self.m * other.m)
    }

    pub fn invert(&self) -> Result<Homography> {
        let det = self.m.determinant();
        if det.abs() < DET_FLOOR {
            return Err(Error::SingularMatrix(det.abs()));
        }
        let inv = self.m.try_inverse().ok_or(Error::SingularMatrix(det.abs()))?;
        Homography::from_matrix(inv)
    }

    /// Conjugates by `diag(s, s, 1)` so the transform acts on coordinates scaled by `s`.
    pub fn rescale(&self, s: f64) -> Homography {
        assert!(s > 0.0, "scale factor must be positive");
        let fwd = Matrix3::new(s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, 1.0);
        let back = Matrix3::new(1.0 / s, 0.0, 0.0, 0.0, 1.0 / s, 0.0, 0.0, 0.0, 1.0);
        let m = fwd * self.m * back;
        // The conjugation leaves m[2][2] untouched, so normalization cannot fail.
        Homography { m: m / m[(2, 2)] }
    }

    /// Largest entry-wise difference, used for tolerance checks.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        (self.m - other.m).abs().max()
    }
}

impl From<Homography> for [f64; 9] {
    fn from(h: Homography) -> Self {
        h.to_rows()
    }
}

impl TryFrom<[f64; 9]> for Homography {
    type Error = Error;

    fn try_from(rows: [f64; 9]) -> Result<Self> {
        Homography::from_rows(rows)
    }
}

/// Per-corner `(dx, dy)` displacements in the fixed TL, TR, BL, BR order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CornerOffsets(pub [[f64; 2]; 4]);

impl CornerOffsets {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn uniform(dx: f64, dy: f64) -> Self {
        Self([[dx, dy]; 4])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.map(|[x, y]| [x * s, y * s]))
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// The four reference corners that offsets displace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerFrame {
    corners: [Point; 4],
}

impl CornerFrame {
    pub fn new(corners: [Point; 4]) -> Result<Self> {
        if quad_has_collinear_triple(&corners) {
            return Err(Error::DegenerateFrame);
        }
        Ok(Self { corners })
    }

    /// Pixel-center frame of a `width × height` raster.
    pub fn for_image(width: usize, height: usize) -> Self {
        let (w, h) = ((width.max(2) - 1) as f64, (height.max(2) - 1) as f64);
        Self { corners: [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]] }
    }

    pub fn corners(&self) -> &[Point; 4] {
        &self.corners
    }

    pub fn displaced(&self, offsets: &CornerOffsets) -> [Point; 4] {
        std::array::from_fn(|i| {
            [self.corners[i][0] + offsets.0[i][0], self.corners[i][1] + offsets.0[i][1]]
        })
    }

    fn extent(&self) -> f64 {
        let span = |axis: usize| {
            let vals = self.corners.iter().map(|p| p[axis]);
            vals.clone().fold(f64::NEG_INFINITY, f64::max) - vals.fold(f64::INFINITY, f64::min)
        };
        span(0).max(span(1))
    }
}

fn quad_has_collinear_triple(pts: &[Point; 4]) -> bool {
    let scale = pts
        .iter()
        .flat_map(|a| pts.iter().map(move |b| (a[0] - b[0]).hypot(a[1] - b[1])))
        .fold(0.0, f64::max);
    if scale == 0.0 || !scale.is_finite() {
        return true;
    }
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES.iter().any(|&[a, b, c]| {
        let cross = (pts[b][0] - pts[a][0]) * (pts[c][1] - pts[a][1])
            - (pts[b][1] - pts[a][1]) * (pts[c][0] - pts[a][0]);
        cross.abs() <= 1e-9 * scale * scale
    })
}

fn hartley(pts: &[Point; 4]) -> Matrix3<f64> {
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / 4.0;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / 4.0;
    let mean = pts.iter().map(|p| (p[0] - cx).hypot(p[1] - cy)).sum::<f64>() / 4.0;
    let s = if mean > 0.0 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn apply(t: &Matrix3<f64>, p: Point) -> Point {
    let v = t * Vector3::new(p[0], p[1], 1.0);
    [v[0] / v[2], v[1] / v[2]]
}

/// Exact homography through four correspondences, solved as an 8×8 system
/// with `h33 = 1`.
pub fn homography_from_four(src: &[Point; 4], dst: &[Point; 4], normalize: bool) -> Result<Homography> {
    if quad_has_collinear_triple(src) || quad_has_collinear_triple(dst) {
        return Err(Error::DegenerateCorrespondence("three corners are collinear or coincident"));
    }
    let (ts, td) = if normalize {
        (hartley(src), hartley(dst))
    } else {
        (Matrix3::identity(), Matrix3::identity())
    };
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let [x, y] = apply(&ts, src[i]);
        let [u, v] = apply(&td, dst[i]);
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let sol = a
        .lu()
        .solve(&b)
        .ok_or(Error::DegenerateCorrespondence("singular 8x8 system"))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateCorrespondence("singular 8x8 system"));
    }
    let hn = Matrix3::new(sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0);
    let td_inv = td.try_inverse().expect("similarity transform is invertible");
    Homography::from_matrix(td_inv * hn * ts)
        .map_err(|_| Error::DegenerateCorrespondence("solution is not an invertible homography"))
}

/// Homography taking each frame corner to its displaced counterpart.
pub fn dlt_from_offsets(offsets: &CornerOffsets, frame: &CornerFrame) -> Result<Homography> {
    if !offsets.is_finite() {
        return Err(Error::DegenerateCorrespondence("non-finite offsets"));
    }
    let dst = frame.displaced(offsets);
    homography_from_four(frame.corners(), &dst, frame.extent() > NORMALIZE_EXTENT)
}

pub fn offsets_from_homography(h: &Homography, frame: &CornerFrame) -> Result<CornerOffsets> {
    let mut out = [[0.0; 2]; 4];
    for (i, c) in frame.corners().iter().enumerate() {
        let w = h.w(*c);
        if !(w >= W_FLOOR) {
            return Err(Error::ProjectiveDegenerate { corner: i, w });
        }
        let p = h.project(*c);
        out[i] = [p[0] - c[0], p[1] - c[1]];
    }
    Ok(CornerOffsets(out))
}

/// Mean Euclidean distance between predicted and true displaced corners.
pub fn average_corner_error(pred: &CornerOffsets, gt: &CornerOffsets) -> f64 {
    pred.0
        .iter()
        .zip(gt.0.iter())
        .map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1]))
        .sum::<f64>()
        / 4.0
}

/// Corner error between two homographies measured on `frame`.
pub fn homography_corner_error(a: &Homography, b: &Homography, frame: &CornerFrame) -> Result<f64> {
    Ok(average_corner_error(&offsets_from_homography(a, frame)?, &offsets_from_homography(b, frame)?))
}
