//! Rasters, backward bilinear warping, area pyramids and gradients.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Homography;

/// Sample positions may overshoot the last pixel center by this much and
/// still count as in-bounds (absorbs rounding in `invert(h) * p`).
const EDGE_EPS: f64 = 1e-6;

/// Row-major, channel-interleaved raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("{channels} channels (expected 1 or 3)")));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "data length {} for {width}x{height}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidImage("non-finite sample".into()));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels]).expect("valid shape")
    }

    /// Single-channel image from a per-pixel function.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self::new(width, height, 1, data).expect("valid shape")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Luma (0.299 R + 0.587 G + 0.114 B); gray images are returned unchanged.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) as f32)
            .collect();
        Image { width: self.width, height: self.height, channels: 1, data }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Image { width: self.width, height: self.height, channels: self.channels, data }
    }

    /// Crops a `w × h` window whose top-left pixel is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::ShapeMismatch(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for row in y..y + h {
            let start = (row * self.width + x) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Image { width: w, height: h, channels: c, data })
    }
}

/// Per-pixel flag: true where a warp sampled inside the source bounds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    valid: Vec<bool>,
}

impl ValidityMask {
    pub fn new(width: usize, height: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != width * height {
            return Err(Error::ShapeMismatch(format!("mask length {} for {width}x{height}", valid.len())));
        }
        Ok(Self { width, height, valid })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, valid: vec![true; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.valid
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn and(&self, other: &ValidityMask) -> Result<ValidityMask> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch("mask dimensions differ".into()));
        }
        let valid = self.valid.iter().zip(&other.valid).map(|(a, b)| *a && *b).collect();
        Ok(ValidityMask { width: self.width, height: self.height, valid })
    }

    /// Clears a `border`-pixel band around the edge.
    pub fn eroded_border(&self, border: usize) -> ValidityMask {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                if x < border || y < border || x + border >= self.width || y + border >= self.height {
                    out.valid[y * self.width + x] = false;
                }
            }
        }
        out
    }
}

/// Bilinear lookup into an interleaved raster at a real position.
/// Returns `false` when the position lies outside the pixel-center hull.
#[inline]
pub(crate) fn sample_bilinear(
    data: &[f32],
    width: usize,
    height: usize,
    channels: usize,
    x: f64,
    y: f64,
    out: &mut [f32],
) -> bool {
    let (wmax, hmax) = ((width - 1) as f64, (height - 1) as f64);
    if !(x >= -EDGE_EPS && y >= -EDGE_EPS && x <= wmax + EDGE_EPS && y <= hmax + EDGE_EPS) {
        return false;
    }
    let x = x.clamp(0.0, wmax);
    let y = y.clamp(0.0, hmax);
    let x0 = (x.floor() as usize).min(width.saturating_sub(2));
    let y0 = (y.floor() as usize).min(height.saturating_sub(2));
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let (w00, w10, w01, w11) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy);
    let i00 = (y0 * width + x0) * channels;
    let i10 = (y0 * width + x1) * channels;
    let i01 = (y1 * width + x0) * channels;
    let i11 = (y1 * width + x1) * channels;
    for (c, o) in out.iter_mut().enumerate() {
        let v = w00 * data[i00 + c] as f64
            + w10 * data[i10 + c] as f64
            + w01 * data[i01 + c] as f64
            + w11 * data[i11 + c] as f64;
        *o = v as f32;
    }
    true
}

/// Backward warp of an interleaved raster into an `out_w × out_h` grid.
/// `h` maps source coordinates to output coordinates.
pub(crate) fn warp_raster(
    data: &[f32],
    width: usize,
    height: usize,
    channels: usize,
    h: &Homography,
    out_w: usize,
    out_h: usize,
) -> Result<(Vec<f32>, Vec<bool>)> {
    let inv = h.invert()?;
    let m = *inv.matrix();
    let mut out = vec![0.0f32; out_w * out_h * channels];
    let mut valid = vec![false; out_w * out_h];
    out.par_chunks_mut(out_w * channels)
        .zip(valid.par_chunks_mut(out_w))
        .enumerate()
        .for_each(|(y, (row, vrow))| {
            let yf = y as f64;
            for x in 0..out_w {
                let xf = x as f64;
                let w = m[(2, 0)] * xf + m[(2, 1)] * yf + m[(2, 2)];
                if w.abs() < 1e-12 {
                    continue;
                }
                let sx = (m[(0, 0)] * xf + m[(0, 1)] * yf + m[(0, 2)]) / w;
                let sy = (m[(1, 0)] * xf + m[(1, 1)] * yf + m[(1, 2)]) / w;
                let px = &mut row[x * channels..(x + 1) * channels];
                vrow[x] = w > 0.0 && sample_bilinear(data, width, height, channels, sx, sy, px);
            }
        });
    Ok((out, valid))
}

/// Backward warp: output pixel `p` takes the bilinear value of `img` at
/// `invert(h)·p`; pixels mapping outside the source are zero and masked out.
pub fn warp(img: &Image, h: &Homography) -> Result<(Image, ValidityMask)> {
    warp_to_size(img, h, img.width, img.height)
}

/// [`warp`] into an output grid of a different size.
pub fn warp_to_size(img: &Image, h: &Homography, out_w: usize, out_h: usize) -> Result<(Image, ValidityMask)> {
    let (data, valid) = warp_raster(&img.data, img.width, img.height, img.channels, h, out_w, out_h)?;
    Ok((
        Image { width: out_w, height: out_h, channels: img.channels, data },
        ValidityMask { width: out_w, height: out_h, valid },
    ))
}

/// 2×2 area-mean reduction of an interleaved raster. Edge blocks of odd-sized
/// inputs average only the pixels they contain.
pub(crate) fn downsample_raster(data: &[f32], width: usize, height: usize, channels: usize) -> (Vec<f32>, usize, usize) {
    let (ow, oh) = (width.div_ceil(2), height.div_ceil(2));
    let mut out = vec![0.0f32; ow * oh * channels];
    out.par_chunks_mut(ow * channels).enumerate().for_each(|(oy, row)| {
        let ys = [2 * oy, (2 * oy + 1).min(height - 1)];
        let ny = if 2 * oy + 1 < height { 2 } else { 1 };
        for ox in 0..ow {
            let xs = [2 * ox, (2 * ox + 1).min(width - 1)];
            let nx = if 2 * ox + 1 < width { 2 } else { 1 };
            for c in 0..channels {
                // f64 sums of up to four f32 values are exact, so constants survive unchanged.
                let mut s = 0.0f64;
                for &y in &ys[..ny] {
                    for &x in &xs[..nx] {
                        s += data[(y * width + x) * channels + c] as f64;
                    }
                }
                row[ox * channels + c] = (s / (nx * ny) as f64) as f32;
            }
        }
    });
    (out, ow, oh)
}

pub fn downsample(img: &Image) -> Result<Image> {
    if img.width < 2 || img.height < 2 {
        return Err(Error::ImageTooSmall { width: img.width, height: img.height, min: 2 });
    }
    let (data, w, h) = downsample_raster(&img.data, img.width, img.height, img.channels);
    Ok(Image { width: w, height: h, channels: img.channels, data })
}

/// Smallest side accepted by [`build_pyramid`] (keeps the 1/8 level ≥ 8 px).
pub const PYRAMID_MIN_SIDE: usize = 64;

/// Levels at 1/2, 1/4 and 1/8 scale, in that order.
pub fn build_pyramid(img: &Image) -> Result<[Image; 3]> {
    if img.width.min(img.height) < PYRAMID_MIN_SIDE {
        return Err(Error::ImageTooSmall { width: img.width, height: img.height, min: PYRAMID_MIN_SIDE });
    }
    let l1 = downsample(img)?;
    let l2 = downsample(&l1)?;
    let l3 = downsample(&l2)?;
    Ok([l1, l2, l3])
}

/// Normalized Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with radius `ceil(3σ)`; borders are clamped.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParams(format!("blur sigma {sigma}")));
    }
    let k = gaussian_kernel(sigma, (3.0 * sigma).ceil() as usize);
    let r = (k.len() / 2) as i64;
    let (w, h, ch) = (img.width as i64, img.height as i64, img.channels);
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0f64;
                    for (t, kv) in k.iter().enumerate() {
                        let d = t as i64 - r;
                        let (sx, sy) = if horizontal {
                            ((x + d).clamp(0, w - 1), y)
                        } else {
                            (x, (y + d).clamp(0, h - 1))
                        };
                        acc += kv * src[(sy * w + sx) as usize * ch + c] as f64;
                    }
                    out[(y * w + x) as usize * ch + c] = acc as f32;
                }
            }
        }
        out
    };
    let data = pass(&pass(&img.data, true), false);
    Ok(Image { width: img.width, height: img.height, channels: img.channels, data })
}

/// Central differences in the interior, one-sided differences on the border.
pub fn gradient(img: &Image) -> Result<(Image, Image)> {
    let (w, h, ch) = (img.width, img.height, img.channels);
    if w < 2 || h < 2 {
        return Err(Error::ImageTooSmall { width: w, height: h, min: 2 });
    }
    let at = |x: usize, y: usize, c: usize| img.data[(y * w + x) * ch + c];
    let mut gx = vec![0.0f32; img.data.len()];
    let mut gy = vec![0.0f32; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let i = (y * w + x) * ch + c;
                gx[i] = if x == 0 {
                    at(1, y, c) - at(0, y, c)
                } else if x == w - 1 {
                    at(w - 1, y, c) - at(w - 2, y, c)
                } else {
                    (at(x + 1, y, c) - at(x - 1, y, c)) * 0.5
                };
                gy[i] = if y == 0 {
                    at(x, 1, c) - at(x, 0, c)
                } else if y == h - 1 {
                    at(x, h - 1, c) - at(x, h - 2, c)
                } else {
                    (at(x, y + 1, c) - at(x, y - 1, c)) * 0.5
                };
            }
        }
    }
    Ok((
        Image { width: w, height: h, channels: ch, data: gx },
        Image { width: w, height: h, channels: ch, data: gy },
    ))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|source| Error::Codec { path: path.into(), source })?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let (channels, data): (usize, Vec<f32>) = match dynimg {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()),
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_) => {
            (1, dynimg.into_luma16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())
        }
        other => (3, other.into_rgb16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()),
    };
    Image::new(w, h, channels, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// Writes PNG (or PGM/PPM when the extension says so). Values are clamped to [0, 1].
/// 16-bit output is gray only.
pub fn save_image(img: &Image, path: &Path, depth: BitDepth) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    let q8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let q16 = |v: f32| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    let res = match (img.channels, depth) {
        (1, BitDepth::Eight) => {
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, img.data.iter().map(|&v| q8(v)).collect::<Vec<_>>())
                .expect("buffer size")
                .save(path)
        }
        (1, BitDepth::Sixteen) => {
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, img.data.iter().map(|&v| q16(v)).collect::<Vec<_>>())
                .expect("buffer size")
                .save(path)
        }
        (_, BitDepth::Eight) => {
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, img.data.iter().map(|&v| q8(v)).collect::<Vec<_>>())
                .expect("buffer size")
                .save(path)
        }
        (_, BitDepth::Sixteen) => {
            return Err(Error::InvalidImage("16-bit output is supported for gray images only".into()))
        }
    };
    res.map_err(|source| Error::Codec { path: path.into(), source })
}
