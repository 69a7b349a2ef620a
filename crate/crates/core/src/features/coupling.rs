//! Invertible affine-coupling stack with a conditional split.
//!
//! An image with `C` channels is squeezed 2×2 into `4C` channels at half
//! resolution, passed through `n` coupling blocks, and split 1:1: the first
//! `2C` channels are the retained output `y`, the last `2C` the latent
//! texture `z`. Each block keeps one half `a` and maps the other half as
//! `b ↦ b·exp(s(a)) + t(a)`, alternating halves between blocks, with `s`
//! soft-clamped to `±2` by a scaled `tanh`. `s` and `t`
//! come from a two-stage 3×3 convolutional subnetwork with a `tanh` in
//! between; the map is bijective for every coefficient setting.
//!
//! Parameter files are a flat little-endian `f32` array plus a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::imaging::Image;

/// Split-off latent channels.
pub type LatentTexture = FeatureMap;

/// Coefficients of one block's subnetwork.
#[derive(Debug, Clone, PartialEq)]
struct Block {
    /// `[hidden][half][3][3]`
    w1: Vec<f32>,
    b1: Vec<f32>,
    /// `[2*half][hidden][3][3]`; the first `half` outputs are log-scales.
    w2: Vec<f32>,
    b2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingParams {
    image_channels: usize,
    hidden: usize,
    blocks: Vec<Block>,
}

/// JSON sidecar describing the flat coefficient file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CouplingSidecar {
    pub format: String,
    pub data_file: String,
    pub blocks: usize,
    pub image_channels: usize,
    pub split: [usize; 2],
    pub hidden: usize,
    pub layout: Vec<String>,
    pub coefficient_count: usize,
}

const FORMAT: &str = "irreg-coupling-f32le-v1";
/// Bound on each block's log-scale; keeps scale factors within `e^±2`.
const LOG_SCALE_CLAMP: f64 = 2.0;

impl CouplingParams {
    fn sizes(image_channels: usize, hidden: usize) -> [usize; 4] {
        let half = 2 * image_channels;
        [hidden * half * 9, hidden, 2 * half * hidden * 9, 2 * half]
    }

    fn build(image_channels: usize, blocks: usize, hidden: usize, mut next: impl FnMut() -> f32) -> Self {
        let [n1, nb1, n2, nb2] = Self::sizes(image_channels, hidden);
        let mut take = |n: usize| (0..n).map(|_| next()).collect::<Vec<f32>>();
        let blocks = (0..blocks)
            .map(|_| Block { w1: take(n1), b1: take(nb1), w2: take(n2), b2: take(nb2) })
            .collect();
        Self { image_channels, hidden, blocks }
    }

    /// All-zero coefficients: every block is the identity.
    pub fn zeros(image_channels: usize, blocks: usize, hidden: usize) -> Self {
        Self::build(image_channels, blocks, hidden, || 0.0)
    }

    /// Gaussian coefficients with standard deviation `std`.
    pub fn random(image_channels: usize, blocks: usize, hidden: usize, std: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0f32, std).expect("finite std");
        Self::build(image_channels, blocks, hidden, || dist.sample(&mut rng))
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn image_channels(&self) -> usize {
        self.image_channels
    }

    /// Channels on each side of the split.
    pub fn split_channels(&self) -> usize {
        2 * self.image_channels
    }

    fn flat(&self) -> Vec<f32> {
        self.blocks
            .iter()
            .flat_map(|b| b.w1.iter().chain(&b.b1).chain(&b.w2).chain(&b.b2).copied())
            .collect()
    }

    /// Writes `<path>` (JSON sidecar) and `<path stem>.bin`.
    pub fn save(&self, sidecar_path: &Path) -> Result<()> {
        let bin_path = sidecar_path.with_extension("bin");
        let data_file = bin_path.file_name().and_then(|s| s.to_str()).unwrap_or("params.bin").to_string();
        let flat = self.flat();
        let half = self.split_channels();
        let sidecar = CouplingSidecar {
            format: FORMAT.into(),
            data_file,
            blocks: self.blocks.len(),
            image_channels: self.image_channels,
            split: [half, half],
            hidden: self.hidden,
            layout: vec![
                format!("w1[{}][{}][3][3]", self.hidden, half),
                format!("b1[{}]", self.hidden),
                format!("w2[{}][{}][3][3]", 2 * half, self.hidden),
                format!("b2[{}]", 2 * half),
            ],
            coefficient_count: flat.len(),
        };
        let bytes: Vec<u8> = flat.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))?;
        let json = serde_json::to_string_pretty(&sidecar).map_err(|source| Error::Json { path: sidecar_path.into(), source })?;
        fs::write(sidecar_path, json).map_err(|e| Error::io(sidecar_path, e))
    }

    pub fn load(sidecar_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
        let sc: CouplingSidecar =
            serde_json::from_str(&text).map_err(|source| Error::Json { path: sidecar_path.into(), source })?;
        if sc.format != FORMAT {
            return Err(Error::InvalidParams(format!("unsupported format `{}`", sc.format)));
        }
        if sc.image_channels == 0 || sc.split != [2 * sc.image_channels; 2] {
            return Err(Error::InvalidParams(format!("split {:?} for {} image channels", sc.split, sc.image_channels)));
        }
        let per_block: usize = Self::sizes(sc.image_channels, sc.hidden).iter().sum();
        if sc.coefficient_count != per_block * sc.blocks {
            return Err(Error::InvalidParams(format!(
                "{} coefficients declared, layout needs {}",
                sc.coefficient_count,
                per_block * sc.blocks
            )));
        }
        let bin_path: PathBuf = sidecar_path.parent().unwrap_or(Path::new(".")).join(&sc.data_file);
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        if bytes.len() != 4 * sc.coefficient_count {
            return Err(Error::InvalidParams(format!("{} bytes, expected {}", bytes.len(), 4 * sc.coefficient_count)));
        }
        let mut values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        if values.clone().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite coefficient".into()));
        }
        Ok(Self::build(sc.image_channels, sc.blocks, sc.hidden, || values.next().expect("length checked")))
    }
}

/// Planar tensor `[channels][height][width]` used inside the stack.
struct Planes {
    c: usize,
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Planes {
    fn plane(&self, c: usize) -> &[f64] {
        &self.v[c * self.w * self.h..(c + 1) * self.w * self.h]
    }
}

/// 3×3 zero-padded convolution.
fn conv3x3(input: &Planes, in_ch: std::ops::Range<usize>, weights: &[f32], bias: &[f32], out_c: usize) -> Planes {
    let (w, h) = (input.w, input.h);
    let n_in = in_ch.len();
    let mut v = vec![0.0f64; out_c * w * h];
    for o in 0..out_c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias[o] as f64;
                for (ii, ic) in in_ch.clone().enumerate() {
                    let plane = input.plane(ic);
                    let k = &weights[(o * n_in + ii) * 9..(o * n_in + ii + 1) * 9];
                    for ky in 0..3 {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let xx = x as isize + kx as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            acc += k[ky * 3 + kx] as f64 * plane[yy as usize * w + xx as usize];
                        }
                    }
                }
                v[o * w * h + y * w + x] = acc;
            }
        }
    }
    Planes { c: out_c, w, h, v }
}

/// Log-scales and shifts for the transformed half, conditioned on `cond`.
fn scale_shift(block: &Block, p: &Planes, cond: std::ops::Range<usize>, hidden: usize, half: usize) -> Planes {
    let mut hid = conv3x3(p, cond, &block.w1, &block.b1, hidden);
    for v in hid.v.iter_mut() {
        *v = v.tanh();
    }
    conv3x3(&hid, 0..hidden, &block.w2, &block.b2, 2 * half)
}

/// Soft-clamped log-scale, bounded to `(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)`.
fn log_scale(raw: f64) -> f64 {
    LOG_SCALE_CLAMP * (raw / LOG_SCALE_CLAMP).tanh()
}

fn halves(block_index: usize, half: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    // even blocks transform the second half, odd blocks the first
    if block_index % 2 == 0 {
        (0..half, half..2 * half)
    } else {
        (half..2 * half, 0..half)
    }
}

fn squeeze(x: &Image) -> Result<Planes> {
    let (w, h, c) = (x.width(), x.height(), x.channels());
    if w % 2 != 0 || h % 2 != 0 || w < 2 || h < 2 {
        return Err(Error::ShapeMismatch(format!("coupling input {w}x{h} must have even, nonzero sides")));
    }
    let (ow, oh) = (w / 2, h / 2);
    let mut v = vec![0.0f64; 4 * c * ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                for ch in 0..c {
                    v[((k * c + ch) * oh + oy) * ow + ox] = x.get(2 * ox + dx, 2 * oy + dy, ch) as f64;
                }
            }
        }
    }
    Ok(Planes { c: 4 * c, w: ow, h: oh, v })
}

fn unsqueeze(p: &Planes, c: usize) -> Image {
    let (ow, oh) = (p.w, p.h);
    let (w, h) = (2 * ow, 2 * oh);
    let mut data = vec![0.0f32; w * h * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                for ch in 0..c {
                    data[((2 * oy + dy) * w + 2 * ox + dx) * c + ch] = p.v[((k * c + ch) * oh + oy) * ow + ox] as f32;
                }
            }
        }
    }
    // Non-finite values cannot arise from finite inputs, so build directly.
    Image::new(w, h, c, data).unwrap_or_else(|_| Image::filled(w, h, c, 0.0))
}

fn planes_to_map(p: &Planes, chans: std::ops::Range<usize>) -> FeatureMap {
    let n = chans.len();
    let mut data = vec![0.0f32; n * p.w * p.h];
    for (j, ch) in chans.enumerate() {
        for (i, &v) in p.plane(ch).iter().enumerate() {
            data[i * n + j] = v as f32;
        }
    }
    FeatureMap { channels: n, width: p.w, height: p.h, data }
}

fn check_channels(x: &Image, p: &CouplingParams) -> Result<()> {
    if x.channels() != p.image_channels {
        return Err(Error::ShapeMismatch(format!(
            "image has {} channels, parameters expect {}",
            x.channels(),
            p.image_channels
        )));
    }
    Ok(())
}

/// Forward transfer: returns the retained half `y` and latent texture `z`.
pub fn coupling_forward(x: &Image, p: &CouplingParams) -> Result<(FeatureMap, LatentTexture)> {
    check_channels(x, p)?;
    let mut t = squeeze(x)?;
    let half = p.split_channels();
    let plane = t.w * t.h;
    for (i, block) in p.blocks.iter().enumerate() {
        let (cond, moved) = halves(i, half);
        let st = scale_shift(block, &t, cond, p.hidden, half);
        for (j, ch) in moved.enumerate() {
            for k in 0..plane {
                let s = log_scale(st.v[j * plane + k]);
                let sh = st.v[(half + j) * plane + k];
                let b = &mut t.v[ch * plane + k];
                *b = *b * s.exp() + sh;
            }
        }
    }
    debug_assert_eq!(t.c, 2 * half);
    Ok((planes_to_map(&t, 0..half), planes_to_map(&t, half..2 * half)))
}

/// Reverse transfer; the exact algebraic inverse of [`coupling_forward`].
pub fn coupling_inverse(y: &FeatureMap, z: &LatentTexture, p: &CouplingParams) -> Result<Image> {
    let half = p.split_channels();
    if y.channels != half || z.channels != half || y.width != z.width || y.height != z.height {
        return Err(Error::ShapeMismatch(format!(
            "y {}x{}x{} and z {}x{}x{} do not match a {half}:{half} split",
            y.channels, y.width, y.height, z.channels, z.width, z.height
        )));
    }
    let (w, h) = (y.width, y.height);
    let plane = w * h;
    let mut v = vec![0.0f64; 2 * half * plane];
    for (src, base) in [(y, 0), (z, half)] {
        for k in 0..plane {
            for c in 0..half {
                v[(base + c) * plane + k] = src.data[k * half + c] as f64;
            }
        }
    }
    let mut t = Planes { c: 2 * half, w, h, v };
    for (i, block) in p.blocks.iter().enumerate().rev() {
        let (cond, moved) = halves(i, half);
        let st = scale_shift(block, &t, cond, p.hidden, half);
        for (j, ch) in moved.enumerate() {
            for k in 0..plane {
                let s = log_scale(st.v[j * plane + k]);
                let sh = st.v[(half + j) * plane + k];
                let b = &mut t.v[ch * plane + k];
                *b = (*b - sh) * (-s).exp();
            }
        }
    }
    Ok(unsqueeze(&t, p.image_channels))
}

/// Which latent texture the reverse pass receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZPolicy {
    /// The `z` produced by the forward pass.
    True,
    /// A fresh standard-normal draw from the given seed.
    Sampled { seed: u64 },
}

pub fn sample_latent(like: &LatentTexture, seed: u64) -> LatentTexture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..like.data.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    FeatureMap { data, ..like.clone() }
}

/// Mean absolute difference between `x` and its forward/reverse round trip.
pub fn reconstruction_error(x: &Image, p: &CouplingParams, z_policy: ZPolicy) -> Result<f64> {
    let (y, z) = coupling_forward(x, p)?;
    let z = match z_policy {
        ZPolicy::True => z,
        ZPolicy::Sampled { seed } => sample_latent(&z, seed),
    };
    let back = coupling_inverse(&y, &z, p)?;
    let total: f64 = x.data().iter().zip(back.data()).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum();
    Ok(total / x.data().len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, c, (0..w * h * c).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn identity_coupling_splits_squeezed_channels() {
        let x = random_image(6, 4, 1, 1);
        let p = CouplingParams::zeros(1, 6, 4);
        let (y, z) = coupling_forward(&x, &p).unwrap();
        assert_eq!((y.channels(), y.width(), y.height()), (2, 3, 2));
        for oy in 0..2 {
            for ox in 0..3 {
                // retained: top row of each 2×2 block; latent: bottom row
                assert_eq!(y.at(ox, oy), &[x.get(2 * ox, 2 * oy, 0), x.get(2 * ox + 1, 2 * oy, 0)]);
                assert_eq!(z.at(ox, oy), &[x.get(2 * ox, 2 * oy + 1, 0), x.get(2 * ox + 1, 2 * oy + 1, 0)]);
            }
        }
        assert_eq!(coupling_inverse(&y, &z, &p).unwrap(), x);
    }

    #[test]
    fn random_params_invert_exactly() {
        for seed in 0..10 {
            let x = random_image(16, 12, if seed % 2 == 0 { 1 } else { 3 }, seed);
            let p = CouplingParams::random(x.channels(), 6, 8, 0.1, 100 + seed);
            let (y, z) = coupling_forward(&x, &p).unwrap();
            let back = coupling_inverse(&y, &z, &p).unwrap();
            let worst = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(worst < 1e-5, "worst per-pixel error {worst}");
            assert!(reconstruction_error(&x, &p, ZPolicy::True).unwrap() < 1e-5);
        }
    }

    #[test]
    fn distinct_inputs_map_to_distinct_outputs() {
        let p = CouplingParams::random(1, 6, 8, 0.1, 7);
        for seed in 0..20 {
            let a = random_image(8, 8, 1, seed);
            let mut b = a.clone().into_data();
            b[(seed as usize * 5) % 64] += 1e-3;
            let b = Image::new(8, 8, 1, b).unwrap();
            let (ya, za) = coupling_forward(&a, &p).unwrap();
            let (yb, zb) = coupling_forward(&b, &p).unwrap();
            assert!(ya != yb || za != zb);
        }
    }

    #[test]
    fn sampled_latent_identity_error_is_closed_form() {
        let x = random_image(8, 6, 1, 3);
        let p = CouplingParams::zeros(1, 6, 4);
        let (_, z) = coupling_forward(&x, &p).unwrap();
        let zs = sample_latent(&z, 42);
        let diff: f64 = z.data().iter().zip(zs.data()).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum();
        // z carries half of the squeezed samples, so the per-pixel mean halves
        let expected = diff / x.data().len() as f64;
        let got = reconstruction_error(&x, &p, ZPolicy::Sampled { seed: 42 }).unwrap();
        assert!((got - expected).abs() < 1e-7, "{got} vs {expected}");
    }

    #[test]
    fn sampled_latent_with_random_params_is_well_formed() {
        let x = random_image(8, 8, 3, 4);
        let p = CouplingParams::random(3, 6, 8, 0.1, 5);
        let (y, z) = coupling_forward(&x, &p).unwrap();
        let back = coupling_inverse(&y, &sample_latent(&z, 9), &p).unwrap();
        assert!(back.same_shape(&x));
        let e = reconstruction_error(&x, &p, ZPolicy::Sampled { seed: 9 }).unwrap();
        assert!(e.is_finite() && e >= 0.0);
    }

    #[test]
    fn shape_errors() {
        let p = CouplingParams::zeros(1, 2, 2);
        assert!(matches!(coupling_forward(&random_image(5, 4, 1, 0), &p), Err(Error::ShapeMismatch(_))));
        assert!(matches!(coupling_forward(&random_image(4, 4, 3, 0), &p), Err(Error::ShapeMismatch(_))));
        let (y, _) = coupling_forward(&random_image(4, 4, 1, 0), &p).unwrap();
        let bad_z = FeatureMap::zeros(2, 1, 1);
        assert!(matches!(coupling_inverse(&y, &bad_z, &p), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn params_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inn.json");
        let p = CouplingParams::random(1, 6, 8, 0.1, 11);
        p.save(&path).unwrap();
        assert_eq!(CouplingParams::load(&path).unwrap(), p);
        let sc: CouplingSidecar = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!((sc.blocks, sc.split, sc.data_file.as_str()), (6, [2, 2], "inn.bin"));
        assert_eq!(fs::metadata(dir.path().join("inn.bin")).unwrap().len() as usize, 4 * sc.coefficient_count);
        // truncated data file
        fs::write(dir.path().join("inn.bin"), [0u8; 8]).unwrap();
        assert!(matches!(CouplingParams::load(&path), Err(Error::InvalidParams(_))));
    }
}
