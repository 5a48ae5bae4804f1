//! Linear RGB rasters and their on-disk form.
//!
//! Pixels are stored as three planes (R, G, B), each row-major. Values are
//! linear camera RGB; noisy observations may be negative and are never
//! clipped here.
//!
//! Files are 16-bit PNGs at a fixed scale, `value = round(clip(x, 0, 1) *
//! 65535)`, plus an optional JSON sidecar next to the PNG (`foo.png` ->
//! `foo.json`) carrying render, noise and homography metadata.

use std::fs;
use std::path::{Path, PathBuf};

use ::image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{Gamma, RenderParams};
use crate::tensor::{Float, Tensor};

pub const CHANNELS: usize = 3;

/// Spatial granularity required by the network encoder (five 2x poolings).
pub const NETWORK_MULTIPLE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl LinearImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        let p = height * width;
        let mut data = Vec::with_capacity(3 * p);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, p));
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Builds an image from three row-major planes laid out back to back.
    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions(format!("{height}x{width}")));
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::mismatch(format!(
                "expected {} values for {height}x{width}x3, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from interleaved `[r, g, b, r, g, b, ...]` rows.
    pub fn from_interleaved(height: usize, width: usize, rgb: &[f32]) -> Result<Self> {
        if rgb.len() != CHANNELS * height * width {
            return Err(Error::mismatch(format!(
                "expected {} interleaved values, got {}",
                CHANNELS * height * width,
                rgb.len()
            )));
        }
        let mut img = Self::zeros(height, width);
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                img.data[c * height * width + i] = v;
            }
        }
        Ok(img)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut img = Self::zeros(height, width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    img.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_planar(self) -> Vec<f32> {
        self.data
    }

    pub fn to_interleaved(&self) -> Vec<f32> {
        let p = self.height * self.width;
        let mut out = Vec::with_capacity(3 * p);
        for i in 0..p {
            for c in 0..CHANNELS {
                out.push(self.data[c * p + i]);
            }
        }
        out
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.height * self.width;
        &mut self.data[c * p..(c + 1) * p]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &LinearImage, mut f: impl FnMut(f32, f32) -> f32) -> Result<Self> {
        self.ensure_same_dims(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_dims(&self, other: &LinearImage) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::mismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Checks the size contract of the prediction network.
    pub fn ensure_network_dims(&self) -> Result<()> {
        check_network_dims(self.height, self.width)
    }

    /// Crops the `height x width` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::InvalidDimensions(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, |c, y, x| {
            self.get(c, top + y, left + x)
        }))
    }

    pub fn center_crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height || width > self.width {
            return Err(Error::InvalidDimensions(format!(
                "crop {height}x{width} larger than {}x{}",
                self.height, self.width
            )));
        }
        self.crop(
            (self.height - height) / 2,
            (self.width - width) / 2,
            height,
            width,
        )
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, CHANNELS, self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
    }

    /// Reads batch item `n` of a three-channel tensor.
    pub fn from_tensor<T: Float>(t: &Tensor<T>, n: usize) -> Result<Self> {
        if t.channels() != CHANNELS {
            return Err(Error::mismatch(format!(
                "expected 3 channels, got {}",
                t.channels()
            )));
        }
        Self::from_planar(
            t.height(),
            t.width(),
            t.item(n).iter().map(|v| v.as_f64() as f32).collect(),
        )
    }
}

pub fn check_network_dims(height: usize, width: usize) -> Result<()> {
    if height < NETWORK_MULTIPLE
        || width < NETWORK_MULTIPLE
        || height % NETWORK_MULTIPLE != 0
        || width % NETWORK_MULTIPLE != 0
    {
        return Err(Error::InvalidDimensions(format!(
            "{height}x{width}: height and width must be positive multiples of {NETWORK_MULTIPLE}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// Metadata stored in the JSON sidecar of an image file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub gain: f64,
    /// Row-major 3x3 color matrix.
    pub color_matrix: [f64; 9],
    pub gamma: Gamma,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_s: Option<f64>,
    /// Row-major 3x3 homography.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homography: Option<[f64; 9]>,
}

impl Default for ImageMeta {
    fn default() -> Self {
        Self::from_render(&RenderParams::default())
    }
}

impl ImageMeta {
    pub fn from_render(rp: &RenderParams) -> Self {
        let mut color_matrix = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                color_matrix[r * 3 + c] = rp.color_matrix[r][c];
            }
        }
        Self {
            gain: rp.gain,
            color_matrix,
            gamma: rp.gamma,
            sigma_r: None,
            sigma_s: None,
            homography: None,
        }
    }

    pub fn render_params(&self) -> RenderParams {
        let mut m = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = self.color_matrix[r * 3 + c];
            }
        }
        RenderParams {
            gain: self.gain,
            color_matrix: m,
            gamma: self.gamma,
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Quantizes one linear value to the fixed 16-bit file scale.
#[inline]
pub fn quantize16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes `img` as an RGB PNG. With `meta`, also writes the sidecar.
pub fn save_image(
    path: impl AsRef<Path>,
    img: &LinearImage,
    bit_depth: BitDepth,
    meta: Option<&ImageMeta>,
) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = img.dims();
    let interleaved = img.to_interleaved();
    match bit_depth {
        BitDepth::Sixteen => {
            let raw: Vec<u16> = interleaved.iter().map(|&v| quantize16(v)).collect();
            let buf = ImageBuffer::<Rgb<u16>, _>::from_raw(w as u32, h as u32, raw)
                .expect("buffer length matches dimensions");
            buf.save(path)?;
        }
        BitDepth::Eight => {
            let raw: Vec<u8> = interleaved
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, raw)
                .expect("buffer length matches dimensions");
            buf.save(path)?;
        }
    }
    if let Some(meta) = meta {
        fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    }
    Ok(())
}

/// Reads a PNG back into linear values in `[0, 1]`.
///
/// A missing sidecar yields default metadata (gain 1, identity color
/// matrix, sRGB gamma) and logs a warning.
pub fn load_image(path: impl AsRef<Path>) -> Result<(LinearImage, ImageMeta)> {
    let path = path.as_ref();
    let decoded = ::image::open(path)?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let rgb = decoded.to_rgb16();
    let values: Vec<f32> = rgb.as_raw().iter().map(|&v| v as f32 / 65535.0).collect();
    let img = LinearImage::from_interleaved(h, w, &values)?;
    let sidecar = sidecar_path(path);
    let meta = if sidecar.exists() {
        serde_json::from_str(&fs::read_to_string(&sidecar)?)?
    } else {
        log::warn!(
            "no sidecar for {}; using gain 1, identity color matrix, sRGB gamma",
            path.display()
        );
        ImageMeta::default()
    };
    Ok((img, meta))
}
