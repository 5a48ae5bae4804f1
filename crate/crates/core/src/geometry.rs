//! Planar homographies, inverse warping and displacement statistics.
//!
//! Pixel centres sit at integer coordinates; `x` is the column and `y` the
//! row. A homography maps reference coordinates to warped coordinates, and
//! [`warp_image`] produces `out[n] = img[h^-1(n)]`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LinearImage;

const SINGULAR_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    /// Row-major, normalised so that the bottom-right entry is 1.
    matrix: [f64; 9],
    /// Camera rotation about x, y, z in degrees.
    pub rotation_degrees: [f64; 3],
    pub scale: f64,
    pub translation_px: [f64; 2],
}

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

/// Pinhole intrinsics for a camera whose horizontal field of view spans
/// 90 degrees: focal length `width / 2`, principal point at the centre.
pub fn intrinsics_90deg(height: usize, width: usize) -> Matrix3<f64> {
    let f = width as f64 / 2.0;
    let (cx, cy) = image_center(height, width);
    Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0)
}

pub fn image_center(height: usize, width: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

fn rotation(degrees: [f64; 3]) -> Matrix3<f64> {
    let [ax, ay, az] = degrees.map(f64::to_radians);
    let rx = Matrix3::new(
        1.0,
        0.0,
        0.0,
        0.0,
        ax.cos(),
        -ax.sin(),
        0.0,
        ax.sin(),
        ax.cos(),
    );
    let ry = Matrix3::new(
        ay.cos(),
        0.0,
        ay.sin(),
        0.0,
        1.0,
        0.0,
        -ay.sin(),
        0.0,
        ay.cos(),
    );
    let rz = Matrix3::new(
        az.cos(),
        -az.sin(),
        0.0,
        az.sin(),
        az.cos(),
        0.0,
        0.0,
        0.0,
        1.0,
    );
    rz * ry * rx
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            matrix: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            rotation_degrees: [0.0; 3],
            scale: 1.0,
            translation_px: [0.0; 2],
        }
    }

    /// `T * S * (K R K^-1)`: camera rotation, then scaling about the image
    /// centre, then translation.
    pub fn from_params(
        rotation_degrees: [f64; 3],
        scale: f64,
        translation_px: [f64; 2],
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let k = intrinsics_90deg(height, width);
        let k_inv = k.try_inverse().ok_or(Error::DegenerateHomography)?;
        let (cx, cy) = image_center(height, width);
        let s = Matrix3::new(
            scale,
            0.0,
            cx * (1.0 - scale),
            0.0,
            scale,
            cy * (1.0 - scale),
            0.0,
            0.0,
            1.0,
        );
        let t = Matrix3::new(
            1.0,
            0.0,
            translation_px[0],
            0.0,
            1.0,
            translation_px[1],
            0.0,
            0.0,
            1.0,
        );
        let m = t * s * (k * rotation(rotation_degrees) * k_inv);
        let mut h = Self::from_matrix(m)?;
        h.rotation_degrees = rotation_degrees;
        h.scale = scale;
        h.translation_px = translation_px;
        Ok(h)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            matrix: [1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0],
            rotation_degrees: [0.0; 3],
            scale: 1.0,
            translation_px: [tx, ty],
        }
    }

    /// Wraps an arbitrary matrix; provenance fields are left at identity.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let last = m[(2, 2)];
        if last.abs() < SINGULAR_EPS || m.determinant().abs() < SINGULAR_EPS {
            return Err(Error::DegenerateHomography);
        }
        let m = m / last;
        let mut matrix = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                matrix[r * 3 + c] = m[(r, c)];
            }
        }
        Ok(Self {
            matrix,
            ..Self::identity()
        })
    }

    pub fn from_row_major(m: [f64; 9]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_row_slice(&m))
    }

    pub fn row_major(&self) -> [f64; 9] {
        self.matrix
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.matrix)
    }

    pub fn is_identity(&self) -> bool {
        self.matrix == Self::identity().matrix
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .matrix()
            .try_inverse()
            .ok_or(Error::DegenerateHomography)?;
        Self::from_matrix(inv)
    }

    /// `self` after `first`, i.e. `n -> self(first(n))`.
    pub fn compose(&self, first: &Homography) -> Result<Self> {
        Self::from_matrix(self.matrix() * first.matrix())
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.matrix;
        let w = m[6] * x + m[7] * y + m[8];
        (
            (m[0] * x + m[1] * y + m[2]) / w,
            (m[3] * x + m[4] * y + m[5]) / w,
        )
    }

    pub fn apply_vec(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.matrix() * p
    }
}

/// Inverse-warps `img` by `h` with bilinear sampling. Samples outside the
/// source replicate the nearest edge pixel.
pub fn warp_image(img: &LinearImage, h: &Homography) -> Result<LinearImage> {
    let inv = h.inverse()?;
    let (height, width) = img.dims();
    let mut out = LinearImage::zeros(height, width);
    let max_x = (width - 1) as f64;
    let max_y = (height - 1) as f64;
    for y in 0..height {
        for x in 0..width {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            let sx = if sx.is_finite() { sx.clamp(0.0, max_x) } else { 0.0 };
            let sy = if sy.is_finite() { sy.clamp(0.0, max_y) } else { 0.0 };
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let y1 = (y0 + 1).min(height - 1);
            let fx = (sx - x0 as f64) as f32;
            let fy = (sy - y0 as f64) as f32;
            for c in 0..3 {
                let a = img.get(c, y0, x0);
                let b = img.get(c, y0, x1);
                let top = a + (b - a) * fx;
                let d = img.get(c, y1, x0);
                let e = img.get(c, y1, x1);
                let bottom = d + (e - d) * fx;
                out.set(c, y, x, top + (bottom - top) * fy);
            }
        }
    }
    Ok(out)
}

/// Mean over all pixels of the Manhattan distance `|h(n) - n|_1`.
pub fn mean_displacement(h: &Homography, height: usize, width: usize) -> f64 {
    assert!(height > 0 && width > 0);
    let mut total = 0.0;
    for y in 0..height {
        for x in 0..width {
            let (u, v) = h.apply(x as f64, y as f64);
            total += (u - x as f64).abs() + (v - y as f64).abs();
        }
    }
    total / (height * width) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn smooth_image(h: usize, w: usize) -> LinearImage {
        LinearImage::from_fn(h, w, |c, y, x| {
            let (y, x) = (y as f32, x as f32);
            0.5 + 0.2 * (0.07 * x + 0.05 * y + c as f32).sin() + 0.1 * (0.04 * x * 0.5 - 0.06 * y).cos()
        })
    }

    #[test]
    fn identity_warp_is_bit_exact() {
        let img = LinearImage::from_fn(9, 13, |c, y, x| ((c * 31 + y * 7 + x * 3) % 17) as f32 * 0.37 - 1.1);
        let out = warp_image(&img, &Homography::identity()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn identity_params_give_identity_matrix() {
        let h = Homography::from_params([0.0; 3], 1.0, [0.0, 0.0], 440, 440).unwrap();
        let m = h.row_major();
        let id = Homography::identity().row_major();
        for (a, b) in m.iter().zip(id.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_survives_any_warp() {
        let img = LinearImage::filled(16, 16, [0.3, 0.6, 0.9]);
        let h = Homography::from_params([0.4, -0.3, 0.5], 1.02, [1.5, -2.0], 16, 16).unwrap();
        let out = warp_image(&img, &h).unwrap();
        for c in 0..3 {
            for &v in out.plane(c) {
                assert!((v - [0.3, 0.6, 0.9][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn integer_shift_moves_columns() {
        let img = LinearImage::from_fn(8, 8, |c, y, x| (c * 64 + y * 8 + x) as f32 / 200.0);
        let out = warp_image(&img, &Homography::translation(1.0, 0.0)).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 1..8 {
                    assert_eq!(out.get(c, y, x), img.get(c, y, x - 1));
                }
                // Edge replication at the uncovered column.
                assert_eq!(out.get(c, y, 0), img.get(c, y, 0));
            }
        }
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let m = Matrix3::new(1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(
            Homography::from_matrix(m),
            Err(Error::DegenerateHomography)
        ));
    }

    #[test]
    fn displacement_of_simple_maps() {
        assert_eq!(mean_displacement(&Homography::identity(), 10, 20), 0.0);
        for (h, w) in [(8, 8), (33, 17), (440, 440)] {
            let d = mean_displacement(&Homography::translation(2.0, 0.0), h, w);
            assert!((d - 2.0).abs() < 1e-12);
            let d = mean_displacement(&Homography::translation(0.0, 2.0), h, w);
            assert!((d - 2.0).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn composition_matches_sequential_warps(
            r in prop::array::uniform3(-0.4f64..0.4),
            s in 0.985f64..1.015,
            t in prop::array::uniform2(-2.0f64..2.0),
            r2 in prop::array::uniform3(-0.4f64..0.4),
            t2 in prop::array::uniform2(-2.0f64..2.0),
        ) {
            let (hh, ww) = (64, 64);
            let img = smooth_image(hh, ww);
            let h = Homography::from_params(r, s, t, hh, ww).unwrap();
            let g = Homography::from_params(r2, 1.0, t2, hh, ww).unwrap();
            let seq = warp_image(&warp_image(&img, &h).unwrap(), &g).unwrap();
            let direct = warp_image(&img, &g.compose(&h).unwrap()).unwrap();
            let margin = 12;
            for c in 0..3 {
                for y in margin..hh - margin {
                    for x in margin..ww - margin {
                        prop_assert!((seq.get(c, y, x) - direct.get(c, y, x)).abs() <= 0.01);
                    }
                }
            }
        }

        #[test]
        fn inverse_roundtrips_points(
            r in prop::array::uniform3(-0.5f64..0.5),
            s in 0.98f64..1.02,
            t in prop::array::uniform2(-2.0f64..2.0),
            px in 0.0f64..440.0,
            py in 0.0f64..440.0,
        ) {
            let h = Homography::from_params(r, s, t, 440, 440).unwrap();
            let (u, v) = h.apply(px, py);
            let (x, y) = h.inverse().unwrap().apply(u, v);
            prop_assert!((x - px).abs() < 1e-8 && (y - py).abs() < 1e-8);
        }
    }
}
