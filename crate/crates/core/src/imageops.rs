//! Raster implementations of the augmentation operations.
//!
//! Images are three planar channels of `f32` in `[0, 1]`. Geometric operations
//! resample with bilinear interpolation around the image centre and fill
//! out-of-bounds samples with mid grey. Equalize, posterize and solarize decide
//! on the 8-bit quantization `round(v * 255)`; everything else stays in float.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Fill value for samples that fall outside the source image.
pub const WARP_FILL: f32 = 0.5;

#[derive(Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Image({}x{})", self.width, self.height)
    }
}

impl Image {
    /// Builds an image from planar `[C, H, W]` data.
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("image dimensions must be positive"));
        }
        if data.len() != CHANNELS * width * height {
            return Err(Error::shape(format!(
                "expected {} values for a {width}x{height} image, got {}",
                CHANNELS * width * height,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Image {
            width,
            height,
            data: vec![value; CHANNELS * width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * width * height);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image {
            width,
            height,
            data,
        }
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

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let idx = (c * self.height + y) * self.width + x;
        self.data[idx] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image contains NaN or infinite pixels".into()));
        }
        Ok(())
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// ITU-R 601-2 luma, the grey level used by the colour enhancers.
    fn luma(&self) -> Vec<f32> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((&r, &g), &b)| (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) as f32)
            .collect()
    }
}

/// 8-bit code of a float pixel.
#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum OpId {
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    AutoContrast,
    Invert,
    Solarize,
    Posterize,
    Contrast,
    Color,
    Brightness,
    Sharpness,
    Cutout,
    Equalize,
    HorizontalFlip,
    RandomResizeCrop,
}

impl OpId {
    /// The fifteen operations eligible for policy search.
    pub const SEARCHABLE: [OpId; 15] = [
        OpId::ShearX,
        OpId::ShearY,
        OpId::TranslateX,
        OpId::TranslateY,
        OpId::Rotate,
        OpId::AutoContrast,
        OpId::Invert,
        OpId::Solarize,
        OpId::Posterize,
        OpId::Contrast,
        OpId::Color,
        OpId::Brightness,
        OpId::Sharpness,
        OpId::Cutout,
        OpId::Equalize,
    ];

    pub const ALL: [OpId; 17] = [
        OpId::ShearX,
        OpId::ShearY,
        OpId::TranslateX,
        OpId::TranslateY,
        OpId::Rotate,
        OpId::AutoContrast,
        OpId::Invert,
        OpId::Solarize,
        OpId::Posterize,
        OpId::Contrast,
        OpId::Color,
        OpId::Brightness,
        OpId::Sharpness,
        OpId::Cutout,
        OpId::Equalize,
        OpId::HorizontalFlip,
        OpId::RandomResizeCrop,
    ];

    pub fn is_searchable(self) -> bool {
        !matches!(self, OpId::HorizontalFlip | OpId::RandomResizeCrop)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpId::ShearX => "shearX",
            OpId::ShearY => "shearY",
            OpId::TranslateX => "translateX",
            OpId::TranslateY => "translateY",
            OpId::Rotate => "rotate",
            OpId::AutoContrast => "autoContrast",
            OpId::Invert => "invert",
            OpId::Solarize => "solarize",
            OpId::Posterize => "posterize",
            OpId::Contrast => "contrast",
            OpId::Color => "color",
            OpId::Brightness => "brightness",
            OpId::Sharpness => "sharpness",
            OpId::Cutout => "cutout",
            OpId::Equalize => "equalize",
            OpId::HorizontalFlip => "horizontalFlip",
            OpId::RandomResizeCrop => "randomResizeCrop",
        }
    }

    pub fn range(self) -> MagnitudeRange {
        let (min, max) = match self {
            OpId::ShearX | OpId::ShearY => (-0.3, 0.3),
            OpId::TranslateX | OpId::TranslateY => (-0.45, 0.45),
            OpId::Rotate => (-30.0, 30.0),
            OpId::AutoContrast | OpId::Invert | OpId::Equalize | OpId::HorizontalFlip => (0.0, 1.0),
            OpId::Solarize => (0.0, 256.0),
            OpId::Posterize => (4.0, 8.0),
            OpId::Contrast | OpId::Color | OpId::Brightness | OpId::Sharpness => (0.1, 1.9),
            OpId::Cutout => (0.0, 0.2),
            // lower bound of the sampled area fraction; the upper bound is 1
            OpId::RandomResizeCrop => (0.2, 1.0),
        };
        MagnitudeRange { op: self, min, max }
    }

    fn integer_valued(self) -> bool {
        matches!(self, OpId::Solarize | OpId::Posterize)
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpId::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::parse("op", format!("unknown operation {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagnitudeRange {
    pub op: OpId,
    pub min: f64,
    pub max: f64,
}

impl MagnitudeRange {
    pub fn contains(&self, param: f64) -> bool {
        let slack = 1e-9 * (self.max - self.min).abs().max(1.0);
        param >= self.min - slack && param <= self.max + slack
    }
}

/// Maps a unit magnitude onto the operation's parameter range.
pub fn magnitude_to_param(op: OpId, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!(
            "magnitude {lambda} for {op} is outside [0, 1]"
        )));
    }
    let r = op.range();
    let v = r.min + lambda * (r.max - r.min);
    Ok(if op.integer_valued() { v.round() } else { v })
}

/// Unit magnitude for RandAugment's discrete level in `1..=30`.
pub fn discrete_to_unit(level: u32) -> Result<f64> {
    if !(1..=30).contains(&level) {
        return Err(Error::contract(format!(
            "discrete magnitude {level} outside 1..=30"
        )));
    }
    Ok((level - 1) as f64 / 29.0)
}

/// Applies one operation at a mapped parameter value. Only cutout and
/// random-resize-crop consume randomness.
pub fn apply_transform<R: Rng + ?Sized>(img: &Image, op: OpId, param: f64, rng: &mut R) -> Result<Image> {
    img.check_finite()?;
    if !param.is_finite() || !op.range().contains(param) {
        return Err(Error::contract(format!(
            "parameter {param} outside the range of {op}"
        )));
    }
    let out = match op {
        OpId::ShearX => warp(img, [1.0, param, 0.0, 1.0], (0.0, 0.0)),
        OpId::ShearY => warp(img, [1.0, 0.0, param, 1.0], (0.0, 0.0)),
        OpId::TranslateX => warp(img, [1.0, 0.0, 0.0, 1.0], (param * img.width as f64, 0.0)),
        OpId::TranslateY => warp(img, [1.0, 0.0, 0.0, 1.0], (0.0, param * img.height as f64)),
        OpId::Rotate => {
            let (s, c) = param.to_radians().sin_cos();
            // output -> source map of a counter-clockwise rotation with y pointing down
            warp(img, [c, -s, s, c], (0.0, 0.0))
        }
        OpId::AutoContrast => auto_contrast(img),
        OpId::Invert => img.map(|v| 1.0 - v),
        OpId::Solarize => solarize(img, param as u32),
        OpId::Posterize => posterize(img, param as u32),
        OpId::Contrast => {
            let luma = img.luma();
            let mean = (luma.iter().map(|&v| v as f64).sum::<f64>() / luma.len() as f64) as f32;
            blend_with(img, param as f32, |_, _| mean)
        }
        OpId::Color => {
            let luma = img.luma();
            blend_with(img, param as f32, |_, i| luma[i])
        }
        OpId::Brightness => blend_with(img, param as f32, |_, _| 0.0),
        OpId::Sharpness => {
            let smooth = smoothed(img);
            blend_with(img, param as f32, |c, i| smooth.plane(c)[i])
        }
        OpId::Cutout => cutout(img, param, 0.0, rng),
        OpId::Equalize => equalize(img),
        OpId::HorizontalFlip => horizontal_flip(img),
        OpId::RandomResizeCrop => random_resize_crop(img, rng, (param, 1.0), (img.height, img.width))?,
    };
    Ok(out)
}

/// Bilinear inverse warp around the image centre. `m` is the row-major 2x2
/// matrix taking centred output coordinates to centred source coordinates;
/// `shift` is the displacement of content in pixels.
fn warp(img: &Image, m: [f64; 4], shift: (f64, f64)) -> Image {
    let (w, h) = (img.width, img.height);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = Image::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx - shift.0;
            let dy = y as f64 + 0.5 - cy - shift.1;
            let sx = m[0] * dx + m[1] * dy + cx;
            let sy = m[2] * dx + m[3] * dy + cy;
            for c in 0..CHANNELS {
                out.set(c, y, x, bilinear(img, c, sx - 0.5, sy - 0.5, Some(WARP_FILL)));
            }
        }
    }
    out
}

/// Samples channel `c` at pixel-index coordinates `(u, v)`. Out-of-range
/// neighbours take `fill`, or are clamped to the border when `fill` is `None`.
fn bilinear(img: &Image, c: usize, u: f64, v: f64, fill: Option<f32>) -> f32 {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let plane = img.plane(c);
    let (w, h) = (img.width as i64, img.height as i64);
    let at = |x: i64, y: i64| -> f64 {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            plane[(y * w + x) as usize] as f64
        } else {
            match fill {
                Some(f) => f as f64,
                None => plane[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize] as f64,
            }
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    let v = top * (1.0 - fy) + bottom * fy;
    (v as f32).clamp(0.0, 1.0)
}

fn auto_contrast(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..CHANNELS {
        let plane = out.plane_mut(c);
        let (lo, hi) = plane
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi > lo {
            let span = hi - lo;
            for v in plane.iter_mut() {
                *v = ((*v - lo) / span).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn solarize(img: &Image, threshold: u32) -> Image {
    img.map(|v| if quantize(v) as u32 >= threshold { 1.0 - v } else { v })
}

/// Clears the low `8 - bits` bits of every 8-bit code. The removed amount is
/// subtracted from the float value, so 8 bits is the identity.
fn posterize(img: &Image, bits: u32) -> Image {
    let mask: u8 = if bits >= 8 { 0xFF } else { !(0xFFu8 >> bits) };
    img.map(|v| {
        let q = quantize(v);
        let dropped = (q - (q & mask)) as f32 / 255.0;
        (v - dropped).clamp(0.0, 1.0)
    })
}

/// `degenerate * (1 - factor) + original * factor`, clamped to `[0, 1]`.
fn blend_with(img: &Image, factor: f32, degenerate: impl Fn(usize, usize) -> f32) -> Image {
    let n = img.width * img.height;
    let mut out = img.clone();
    for c in 0..CHANNELS {
        let plane = out.plane_mut(c);
        for (i, v) in plane.iter_mut().enumerate() {
            let d = degenerate(c, i);
            *v = (d * (1.0 - factor) + *v * factor).clamp(0.0, 1.0);
        }
    }
    debug_assert_eq!(out.data.len(), CHANNELS * n);
    out
}

/// 3x3 smoothing kernel `[[1,1,1],[1,5,1],[1,1,1]] / 13`; border pixels keep
/// their original value.
fn smoothed(img: &Image) -> Image {
    let (w, h) = (img.width, img.height);
    let mut out = img.clone();
    if w < 3 || h < 3 {
        return out;
    }
    for c in 0..CHANNELS {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut acc = 4.0 * img.get(c, y, x) as f64;
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += img.get(c, y + dy - 1, x + dx - 1) as f64;
                    }
                }
                out.set(c, y, x, (acc / 13.0) as f32);
            }
        }
    }
    out
}

/// Zero-fills (or `fill`-fills) a square of side `round(fraction * min(H, W))`
/// centred on a uniformly drawn pixel, clipped at the borders.
pub fn cutout<R: Rng + ?Sized>(img: &Image, fraction: f64, fill: f32, rng: &mut R) -> Image {
    let side = (fraction * img.width.min(img.height) as f64).round() as usize;
    let cx = rng.random_range(0..img.width);
    let cy = rng.random_range(0..img.height);
    let mut out = img.clone();
    if side == 0 {
        return out;
    }
    let x0 = cx.saturating_sub(side / 2);
    let y0 = cy.saturating_sub(side / 2);
    let x1 = (cx + side - side / 2).min(img.width);
    let y1 = (cy + side - side / 2).min(img.height);
    for c in 0..CHANNELS {
        for y in y0..y1 {
            for x in x0..x1 {
                out.set(c, y, x, fill);
            }
        }
    }
    out
}

/// Per-channel histogram equalization on 8-bit codes, with the same lookup
/// construction as PIL's `ImageOps.equalize`.
fn equalize(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..CHANNELS {
        let plane = out.plane_mut(c);
        let mut hist = [0usize; 256];
        for &v in plane.iter() {
            hist[quantize(v) as usize] += 1;
        }
        let last = hist.iter().rev().find(|&&n| n > 0).copied().unwrap_or(0);
        let step = (plane.len() - last) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for (i, entry) in lut.iter_mut().enumerate() {
            *entry = (n / step).min(255) as u8;
            n += hist[i];
        }
        for v in plane.iter_mut() {
            *v = lut[quantize(*v) as usize] as f32 / 255.0;
        }
    }
    out
}

pub fn horizontal_flip(img: &Image) -> Image {
    let mut out = img.clone();
    let w = img.width;
    for row in out.data.chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Crops a window covering an area fraction drawn uniformly from
/// `scale_range`, keeping the source aspect ratio, and resizes it to
/// `out_size = (H, W)` with bilinear interpolation.
pub fn random_resize_crop<R: Rng + ?Sized>(
    img: &Image,
    rng: &mut R,
    scale_range: (f64, f64),
    out_size: (usize, usize),
) -> Result<Image> {
    let (lo, hi) = scale_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::contract(format!(
            "scale range ({lo}, {hi}) must satisfy 0 < min <= max <= 1"
        )));
    }
    if out_size.0 == 0 || out_size.1 == 0 {
        return Err(Error::contract("output size must be positive"));
    }
    img.check_finite()?;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let side = scale.sqrt();
    let cw = ((img.width as f64 * side).round() as usize).clamp(1, img.width);
    let ch = ((img.height as f64 * side).round() as usize).clamp(1, img.height);
    let x0 = rng.random_range(0..=img.width - cw);
    let y0 = rng.random_range(0..=img.height - ch);
    let (oh, ow) = out_size;
    let sx = cw as f64 / ow as f64;
    let sy = ch as f64 / oh as f64;
    let mut out = Image::filled(ow, oh, 0.0);
    for y in 0..oh {
        for x in 0..ow {
            let u = x0 as f64 + (x as f64 + 0.5) * sx - 0.5;
            let v = y0 as f64 + (y as f64 + 0.5) * sy - 0.5;
            for c in 0..CHANNELS {
                out.set(c, y, x, bilinear(img, c, u, v, None));
            }
        }
    }
    Ok(out)
}
