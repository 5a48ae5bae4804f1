//! Mapping from linear camera RGB to display sRGB: gain, 3x3 color
//! transform, clip to `[0, 1]`, then a gamma curve.

use serde::{Deserialize, Serialize};

use crate::image::LinearImage;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gamma {
    #[default]
    Srgb,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub gain: f64,
    pub color_matrix: [[f64; 3]; 3],
    pub gamma: Gamma,
}

pub const IDENTITY3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            gain: 1.0,
            color_matrix: IDENTITY3,
            gamma: Gamma::Srgb,
        }
    }
}

impl RenderParams {
    pub fn with_gain(gain: f64) -> Self {
        Self {
            gain,
            ..Self::default()
        }
    }

    /// `gain * color_matrix`, the linear part of the mapping.
    pub fn linear_map(&self) -> [[f64; 3]; 3] {
        let mut m = self.color_matrix;
        for row in &mut m {
            for v in row {
                *v *= self.gain;
            }
        }
        m
    }
}

/// Standard sRGB transfer function on `[0, 1]`.
#[inline]
pub fn srgb_encode(v: f64) -> f64 {
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Derivative of [`srgb_encode`].
#[inline]
pub fn srgb_encode_derivative(v: f64) -> f64 {
    if v <= 0.0031308 {
        12.92
    } else {
        1.055 / 2.4 * v.powf(1.0 / 2.4 - 1.0)
    }
}

impl Gamma {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Gamma::Srgb => srgb_encode(v),
            Gamma::Linear => v,
        }
    }

    #[inline]
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Gamma::Srgb => srgb_encode_derivative(v),
            Gamma::Linear => 1.0,
        }
    }
}

/// Renders `img` for display. Output values lie in `[0, 1]`.
pub fn render_srgb(img: &LinearImage, rp: &RenderParams) -> LinearImage {
    let m = rp.linear_map();
    let (h, w) = img.dims();
    let p = h * w;
    let src = img.data();
    let mut out = vec![0.0f32; 3 * p];
    for i in 0..p {
        let px = [src[i] as f64, src[p + i] as f64, src[2 * p + i] as f64];
        for (r, row) in m.iter().enumerate() {
            let v = row[0] * px[0] + row[1] * px[1] + row[2] * px[2];
            out[r * p + i] = rp.gamma.apply(v.clamp(0.0, 1.0)) as f32;
        }
    }
    LinearImage::from_planar(h, w, out).expect("same dimensions")
}
