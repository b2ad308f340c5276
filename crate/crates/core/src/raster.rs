//! Depth rasters, color images and binary masks, with their file formats.
//!
//! Depth rasters use the `DPT1` layout: ASCII magic, little-endian `u32`
//! width and height, then row-major little-endian `f32` values with invalid
//! pixels stored as quiet NaN. Color images export as 8-bit binary PPM and
//! masks as 8-bit binary PGM.

use std::fs;
use std::io::Read;
use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};

pub const DPT1_MAGIC: &[u8; 4] = b"DPT1";

/// Metric depth per pixel with an explicit validity mask.
#[derive(Debug, Clone)]
pub struct DepthRaster {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthRaster {
    /// All-invalid raster.
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![f64::NAN; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Builds a raster from optional depths; `None`, non-finite and
    /// non-positive entries become invalid.
    pub fn from_options(width: usize, height: usize, values: Vec<Option<f64>>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::InvalidRaster(format!(
                "{} values for a {width}x{height} raster",
                values.len()
            )));
        }
        let mut r = Self::empty(width, height);
        for (i, v) in values.into_iter().enumerate() {
            if let Some(d) = v {
                r.set(i % width, i / width, d);
            }
        }
        Ok(r)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Sets a pixel; values that are not finite and positive mark it invalid.
    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        let i = y * self.width + x;
        if d.is_finite() && d > 0.0 {
            self.values[i] = d;
            self.valid[i] = true;
        } else {
            self.values[i] = f64::NAN;
            self.valid[i] = false;
        }
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        self.values[i] = f64::NAN;
        self.valid[i] = false;
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.values[i])
    }

    pub fn get_index(&self, i: usize) -> Option<f64> {
        self.valid[i].then(|| self.values[i])
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Raw values; invalid entries are NaN.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    /// Applies `a * d + b` to every valid pixel; results that stop being
    /// positive become invalid.
    pub fn affine(&self, a: f64, b: f64) -> DepthRaster {
        let mut out = DepthRaster::empty(self.width, self.height);
        for i in 0..self.values.len() {
            if self.valid[i] {
                out.set(i % self.width, i / self.width, a * self.values[i] + b);
            }
        }
        out
    }

    /// Copy keeping only pixels set in `mask`.
    pub fn masked(&self, mask: &Mask) -> Result<DepthRaster> {
        if mask.dims() != self.dims() {
            return Err(Error::SizeMismatch {
                expected: self.dims(),
                got: mask.dims(),
            });
        }
        let mut out = self.clone();
        for (i, keep) in mask.values.iter().enumerate() {
            if !keep {
                out.values[i] = f64::NAN;
                out.valid[i] = false;
            }
        }
        Ok(out)
    }

    /// Bilinear sample at a continuous pixel position, returning the value and
    /// its gradient with respect to `(u, v)`. Every pixel carrying non-zero
    /// weight must be inside the raster and valid.
    pub fn sample_bilinear(&self, pixel: &Vector2<f64>) -> Option<(f64, Vector2<f64>)> {
        let (u, v) = (pixel.x, pixel.y);
        if !(u >= 0.0 && v >= 0.0) || !u.is_finite() || !v.is_finite() {
            return None;
        }
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        if x0 >= self.width || y0 >= self.height {
            return None;
        }
        let fetch = |x: usize, y: usize, w: f64| -> Option<f64> {
            if w == 0.0 {
                return Some(0.0);
            }
            if x >= self.width || y >= self.height {
                return None;
            }
            self.get(x, y)
        };
        let d00 = fetch(x0, y0, (1.0 - fx) * (1.0 - fy))?;
        let d10 = fetch(x0 + 1, y0, fx * (1.0 - fy))?;
        let d01 = fetch(x0, y0 + 1, (1.0 - fx) * fy)?;
        let d11 = fetch(x0 + 1, y0 + 1, fx * fy)?;
        let value = d00 * (1.0 - fx) * (1.0 - fy) + d10 * fx * (1.0 - fy) + d01 * (1.0 - fx) * fy + d11 * fx * fy;
        let du = (d10 - d00) * (1.0 - fy) + (d11 - d01) * fy;
        let dv = (d01 - d00) * (1.0 - fx) + (d11 - d10) * fx;
        Some((value, Vector2::new(du, dv)))
    }

    /// Serializes to the `DPT1` byte layout.
    pub fn to_dpt1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        out.extend_from_slice(DPT1_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for (v, ok) in self.values.iter().zip(&self.valid) {
            let f = if *ok { *v as f32 } else { f32::NAN };
            out.extend_from_slice(&f.to_le_bytes());
        }
        out
    }

    pub fn from_dpt1_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[0..4] != DPT1_MAGIC {
            return Err(Error::InvalidRaster("missing DPT1 magic".into()));
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let expected = 12 + 4 * width * height;
        if bytes.len() != expected {
            return Err(Error::InvalidRaster(format!(
                "DPT1 payload is {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let mut r = DepthRaster::empty(width, height);
        for (i, chunk) in bytes[12..].chunks_exact(4).enumerate() {
            let f = f32::from_le_bytes(chunk.try_into().unwrap());
            if f.is_finite() && f > 0.0 {
                r.values[i] = f as f64;
                r.valid[i] = true;
            }
        }
        Ok(r)
    }

    pub fn write_dpt1(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_dpt1_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_dpt1(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_dpt1_bytes(&bytes)
    }

    /// Rounds valid values to `f32` precision, the precision of the file format.
    pub fn quantized(&self) -> DepthRaster {
        let mut out = self.clone();
        for (v, ok) in out.values.iter_mut().zip(&out.valid) {
            if *ok {
                *v = *v as f32 as f64;
            }
        }
        out
    }
}

impl PartialEq for DepthRaster {
    /// Equal when sizes, validity and every valid value match; invalid
    /// payloads are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.dims() == other.dims()
            && self.valid == other.valid
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.valid)
                .all(|((a, b), ok)| !ok || a == b)
    }
}

/// RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Vector3<f64>>,
}

impl ColorImage {
    pub fn black(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![Vector3::zeros(); width * height],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> Vector3<f64> {
        self.pixels[y * self.width + x]
    }

    /// Rec. 601 luma.
    pub fn luminance(&self) -> Vec<f64> {
        self.pixels
            .iter()
            .map(|c| 0.299 * c.x + 0.587 * c.y + 0.114 * c.z)
            .collect()
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for c in &self.pixels {
            for v in c.iter() {
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self> {
        let (w, h, data) = parse_netpbm(bytes, b"P6", 3)?;
        let pixels = data
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0))
            .collect();
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm_bytes(&bytes)
    }

    /// Rounds every channel to the 8-bit grid of the PPM format.
    pub fn quantized(&self) -> ColorImage {
        let mut out = self.clone();
        for c in out.pixels.iter_mut() {
            for v in c.iter_mut() {
                *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
        out
    }
}

/// Per-pixel boolean mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.values[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn invert(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| !v).collect(),
        }
    }

    /// Whether the nearest pixel to a continuous position is set.
    pub fn contains_pixel(&self, pixel: &Vector2<f64>) -> bool {
        let x = pixel.x.round();
        let y = pixel.y.round();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return false;
        }
        self.get(x as usize, y as usize)
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|&v| if v { 255u8 } else { 0u8 }));
        out
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self> {
        let (w, h, data) = parse_netpbm(bytes, b"P5", 1)?;
        Ok(Self {
            width: w,
            height: h,
            values: data.iter().map(|&v| v >= 128).collect(),
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm_bytes(&bytes)
    }
}

fn parse_netpbm<'a>(bytes: &'a [u8], magic: &[u8], channels: usize) -> Result<(usize, usize, &'a [u8])> {
    let bad = |m: &str| Error::InvalidRaster(format!("netpbm: {m}"));
    if !bytes.starts_with(magic) {
        return Err(bad("wrong magic"));
    }
    let mut cursor = std::io::Cursor::new(&bytes[magic.len()..]);
    let mut fields = Vec::new();
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    while fields.len() < 3 {
        cursor.read_exact(&mut byte).map_err(|_| bad("truncated header"))?;
        if byte[0].is_ascii_whitespace() {
            if !token.is_empty() {
                let s = String::from_utf8(std::mem::take(&mut token)).map_err(|_| bad("header"))?;
                fields.push(s.parse::<usize>().map_err(|_| bad("header number"))?);
            }
        } else {
            token.push(byte[0]);
        }
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let start = magic.len() + cursor.position() as usize;
    let data = &bytes[start..];
    if data.len() != w * h * channels {
        return Err(bad("payload size"));
    }
    Ok((w, h, data))
}
