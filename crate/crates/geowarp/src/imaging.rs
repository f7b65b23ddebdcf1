//! Intensity images, depth maps, pixel masks and the differentiable
//! bilinear sampler.
//!
//! Intensities are normalized to `[0, 1]` at ingestion; every loss constant
//! downstream is defined against that range. Buffers are immutable values:
//! all operations here are pure and safe to call concurrently.

use crate::error::{Error, Result};

/// Luminance weights for RGB → grayscale conversion.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Dense row-major intensity image, 1 or 3 channels, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, channel-interleaved: `data[(y * width + x) * channels + c]`.
    pub data: Vec<f64>,
}

impl ImageBuffer {
    /// Validated constructor: checks shape and that every intensity is a
    /// finite value in `[0, 1]`.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!(
                "channels must be 1 or 3 (got {channels})"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "image data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidInput(format!(
                "intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Single-channel image of zeros.
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    /// Single-channel image built from a per-pixel function; values are
    /// clamped into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self { width, height, channels: 1, data }
    }

    #[inline]
    pub fn pixel_index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Converts a 3-channel image to luminance with the fixed weights
/// `0.299 R + 0.587 G + 0.114 B`.
pub fn to_grayscale(img: &ImageBuffer) -> Result<ImageBuffer> {
    if img.channels != 3 {
        return Err(Error::InvalidInput(format!(
            "to_grayscale expects 3 channels (got {})",
            img.channels
        )));
    }
    let mut data = Vec::with_capacity(img.width * img.height);
    for px in img.data.chunks_exact(3) {
        let v = LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2];
        data.push(v.clamp(0.0, 1.0));
    }
    Ok(ImageBuffer { width: img.width, height: img.height, channels: 1, data })
}

/// Dense-or-sparse metric depth with per-pixel validity.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// Row-major depth in meters; meaningful only where `valid` is set.
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// Validated constructor. Entries flagged valid but holding a
    /// non-positive or non-finite depth are invalidated, so the invariant
    /// `valid[i] ⇒ depth[i] > 0 ∧ finite` always holds.
    pub fn new(width: usize, height: usize, depth: Vec<f64>, mut valid: Vec<bool>) -> Result<Self> {
        if depth.len() != width * height || valid.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "depth/validity length {}/{} does not match {width}x{height}",
                depth.len(),
                valid.len()
            )));
        }
        for (v, d) in valid.iter_mut().zip(depth.iter()) {
            if *v && (!d.is_finite() || *d <= 0.0) {
                *v = false;
            }
        }
        Ok(Self { width, height, depth, valid })
    }

    /// Fully valid constant-depth map.
    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self {
            width,
            height,
            depth: vec![depth; width * height],
            valid: vec![depth.is_finite() && depth > 0.0; width * height],
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Boolean keep/discard mask aligned with an image.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    pub width: usize,
    pub height: usize,
    pub keep: Vec<bool>,
}

impl PixelMask {
    pub fn new(width: usize, height: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "mask length {} does not match {width}x{height}",
                keep.len()
            )));
        }
        Ok(Self { width, height, keep })
    }

    pub fn all(width: usize, height: usize) -> Self {
        Self { width, height, keep: vec![true; width * height] }
    }

    pub fn none(width: usize, height: usize) -> Self {
        Self { width, height, keep: vec![false; width * height] }
    }

    /// Keeps only pixels at least `margin` pixels away from every image
    /// border. With a hard-validity photometric sum, admitting border pixels
    /// lets an optimizer "improve" by pushing them out of view; an interior
    /// margin wider than the expected warp displacement removes those
    /// discontinuities from the optimization region.
    pub fn interior(width: usize, height: usize, margin: usize) -> Self {
        let mut keep = vec![false; width * height];
        if 2 * margin < width && 2 * margin < height {
            for y in margin..height - margin {
                for x in margin..width - margin {
                    keep[y * width + x] = true;
                }
            }
        }
        Self { width, height, keep }
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }
}

/// Elementwise conjunction of two masks.
pub fn mask_and(a: &PixelMask, b: &PixelMask) -> Result<PixelMask> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch(format!(
            "mask shapes {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let keep = a.keep.iter().zip(&b.keep).map(|(x, y)| *x && *y).collect();
    Ok(PixelMask { width: a.width, height: a.height, keep })
}

/// A bilinear sample: per-channel value and analytic spatial derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub channels: usize,
    pub value: [f64; 3],
    /// d value / d u (horizontal pixel coordinate), per channel.
    pub ddx: [f64; 3],
    /// d value / d v (vertical pixel coordinate), per channel.
    pub ddy: [f64; 3],
}

/// Bilinear interpolation at a continuous pixel coordinate, with the
/// analytic gradient of the interpolant.
///
/// Returns `None` when the 2x2 support does not lie inside the image
/// (out-of-bounds is a flagged result, never clamped). Coordinates exactly
/// on the right/bottom edge sample the last cell at its far corner, so
/// integer coordinates reproduce pixel values exactly everywhere.
pub fn bilinear_sample(img: &ImageBuffer, u: f64, v: f64) -> Option<Sample> {
    let (w, h) = (img.width, img.height);
    if w < 2 || h < 2 {
        return None;
    }
    let (max_u, max_v) = ((w - 1) as f64, (h - 1) as f64);
    if !(u >= 0.0 && u <= max_u && v >= 0.0 && v <= max_v) {
        return None;
    }
    let x0 = (u.floor() as usize).min(w - 2);
    let y0 = (v.floor() as usize).min(h - 2);
    let fu = u - x0 as f64;
    let fv = v - y0 as f64;

    let c = img.channels;
    let base00 = (y0 * w + x0) * c;
    let base10 = base00 + c;
    let base01 = base00 + w * c;
    let base11 = base01 + c;

    let mut out = Sample { channels: c, value: [0.0; 3], ddx: [0.0; 3], ddy: [0.0; 3] };
    for ch in 0..c {
        let p00 = img.data[base00 + ch];
        let p10 = img.data[base10 + ch];
        let p01 = img.data[base01 + ch];
        let p11 = img.data[base11 + ch];
        out.value[ch] = (1.0 - fu) * (1.0 - fv) * p00
            + fu * (1.0 - fv) * p10
            + (1.0 - fu) * fv * p01
            + fu * fv * p11;
        out.ddx[ch] = (1.0 - fv) * (p10 - p00) + fv * (p11 - p01);
        out.ddy[ch] = (1.0 - fu) * (p01 - p00) + fu * (p11 - p10);
    }
    Some(out)
}

/// Masked global image statistics: means, population variances and
/// covariance of two single-channel images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimStats {
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x2: f64,
    pub sigma_y2: f64,
    pub sigma_xy: f64,
    pub count: usize,
}

/// Computes [`SsimStats`] over the masked pixels of `a` and `b`.
///
/// Population convention (divide by N). Requires single-channel inputs of
/// matching shape and at least two masked pixels.
pub fn image_stats(a: &ImageBuffer, b: &ImageBuffer, mask: &PixelMask) -> Result<SsimStats> {
    if a.channels != 1 || b.channels != 1 {
        return Err(Error::InvalidInput(
            "image_stats expects single-channel images".into(),
        ));
    }
    if !a.same_shape(b) || a.width != mask.width || a.height != mask.height {
        return Err(Error::DimensionMismatch(format!(
            "image_stats shapes {}x{}, {}x{}, mask {}x{}",
            a.width, a.height, b.width, b.height, mask.width, mask.height
        )));
    }
    let mut n = 0usize;
    let (mut sa, mut sb) = (0.0f64, 0.0f64);
    for i in 0..a.data.len() {
        if mask.keep[i] {
            n += 1;
            sa += a.data[i];
            sb += b.data[i];
        }
    }
    if n < 2 {
        return Err(Error::DegenerateStatistics);
    }
    let inv_n = 1.0 / n as f64;
    let mu_x = sa * inv_n;
    let mu_y = sb * inv_n;
    // Second pass over centered values keeps the moments accurate.
    let (mut vxx, mut vyy, mut vxy) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..a.data.len() {
        if mask.keep[i] {
            let da = a.data[i] - mu_x;
            let db = b.data[i] - mu_y;
            vxx += da * da;
            vyy += db * db;
            vxy += da * db;
        }
    }
    Ok(SsimStats {
        mu_x,
        mu_y,
        sigma_x2: vxx * inv_n,
        sigma_y2: vyy * inv_n,
        sigma_xy: vxy * inv_n,
        count: n,
    })
}
