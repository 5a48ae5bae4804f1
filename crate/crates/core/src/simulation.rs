//! Synthetic low-light flash/no-flash captures.
//!
//! A sample is built from a well-lit ambient image and a flash-only image of
//! the same scene: the ambient image is dimmed, the flash image adds twice
//! the flash-only light on top, the non-reference frame is warped by a small
//! homography, and both frames receive heteroscedastic Gaussian noise with
//! variance `sigma_r^2 + sigma_s^2 x`.

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{Archive, Array};
use crate::error::{Error, Result};
use crate::geometry::{mean_displacement, warp_image, Homography};
use crate::image::{check_network_dims, load_image, LinearImage};
use crate::render::RenderParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub sigma_r: f64,
    pub sigma_s: f64,
}

impl NoiseParams {
    pub fn new(sigma_r: f64, sigma_s: f64) -> Result<Self> {
        if !(sigma_r > 0.0) || !(sigma_s >= 0.0) || !sigma_r.is_finite() || !sigma_s.is_finite() {
            return Err(Error::Config(format!(
                "noise parameters need sigma_r > 0 and sigma_s >= 0, got {sigma_r}, {sigma_s}"
            )));
        }
        Ok(Self { sigma_r, sigma_s })
    }

    pub fn from_log10(log_sigma_r: f64, log_sigma_s: f64) -> Result<Self> {
        Self::new(10f64.powf(log_sigma_r), 10f64.powf(log_sigma_s))
    }

    /// Standard deviation of the noise at intensity `x`.
    pub fn stddev(&self, x: f64) -> f64 {
        (self.sigma_r * self.sigma_r + self.sigma_s * self.sigma_s * x.max(0.0)).sqrt()
    }
}

/// Which frame the output is aligned to; the other frame carries the warp.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reference {
    #[default]
    NoFlash,
    Flash,
}

impl Reference {
    pub fn as_str(self) -> &'static str {
        match self {
            Reference::NoFlash => "noflash",
            Reference::Flash => "flash",
        }
    }
}

impl std::str::FromStr for Reference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noflash" => Ok(Reference::NoFlash),
            "flash" => Ok(Reference::Flash),
            _ => Err(Error::Config(format!("reference must be `noflash` or `flash`, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub x_f: LinearImage,
    pub x_nf: LinearImage,
    pub noise_map_f: LinearImage,
    pub noise_map_nf: LinearImage,
    pub y: LinearImage,
    pub render: RenderParams,
    pub noise: NoiseParams,
    pub homography: Homography,
    pub reference: Reference,
    pub dim_factor: f64,
}

/// Scalar metadata of a [`SamplePair`], stored next to the pixel arrays.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct SampleMeta {
    render: RenderParams,
    noise: NoiseParams,
    homography: Homography,
    reference: Reference,
    dim_factor: f64,
}

impl SamplePair {
    pub fn dims(&self) -> (usize, usize) {
        self.y.dims()
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        let (h, w) = self.dims();
        for (name, img) in self.images() {
            a.insert(name, Array::f32(vec![3, h, w], img.data().to_vec()))?;
        }
        let meta = SampleMeta {
            render: self.render.clone(),
            noise: self.noise,
            homography: self.homography.clone(),
            reference: self.reference,
            dim_factor: self.dim_factor,
        };
        a.insert("meta", Array::bytes(serde_json::to_vec(&meta)?))?;
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let img = |name: &str| -> Result<LinearImage> {
            let (shape, data) = a.f32(name)?;
            match *shape {
                [3, h, w] => LinearImage::from_planar(h, w, data.to_vec()),
                _ => Err(Error::Format(format!("`{name}` has shape {shape:?}, expected [3, H, W]"))),
            }
        };
        let meta: SampleMeta = serde_json::from_slice(a.bytes("meta")?)?;
        Ok(Self {
            x_f: img("x_f")?,
            x_nf: img("x_nf")?,
            noise_map_f: img("noise_map_f")?,
            noise_map_nf: img("noise_map_nf")?,
            y: img("y")?,
            render: meta.render,
            noise: meta.noise,
            homography: meta.homography,
            reference: meta.reference,
            dim_factor: meta.dim_factor,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    fn images(&self) -> [(&'static str, &LinearImage); 5] {
        [
            ("x_f", &self.x_f),
            ("x_nf", &self.x_nf),
            ("noise_map_f", &self.noise_map_f),
            ("noise_map_nf", &self.noise_map_nf),
            ("y", &self.y),
        ]
    }

    /// Checks the structural invariants of a sample; returns the first
    /// violation found.
    pub fn validate(&self) -> Result<()> {
        for (name, img) in self.images() {
            self.y.ensure_same_dims(img)?;
            if !img.is_finite() {
                return Err(Error::Config(format!("`{name}` contains non-finite values")));
            }
        }
        check_network_dims(self.y.height(), self.y.width())?;
        if self.y.min_value() < 0.0 {
            return Err(Error::Config("ground truth has negative values".into()));
        }
        let floor = self.noise.sigma_r as f32 * (1.0 - 1e-6);
        for (name, map) in [("noise_map_f", &self.noise_map_f), ("noise_map_nf", &self.noise_map_nf)] {
            if map.min_value() < floor {
                return Err(Error::Config(format!("`{name}` falls below sigma_r")));
            }
        }
        if !(self.dim_factor >= 1.0) {
            return Err(Error::Config(format!("dim factor {} is below 1", self.dim_factor)));
        }
        if (self.render.gain - self.dim_factor).abs() > 1e-9 * self.dim_factor {
            return Err(Error::Config("render gain differs from the dim factor".into()));
        }
        Ok(())
    }
}

/// Master seed and sample index to an independent stream.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

struct Shape {
    ellipse: bool,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Shape {
    fn random(rng: &mut impl Rng, h: f64, w: f64, scale: (f64, f64)) -> Self {
        Self {
            ellipse: rng.random_bool(0.5),
            cy: rng.random_range(0.0..h),
            cx: rng.random_range(0.0..w),
            ry: rng.random_range(scale.0..scale.1) * h,
            rx: rng.random_range(scale.0..scale.1) * w,
            angle: rng.random_range(0.0..std::f64::consts::PI),
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        if self.ellipse {
            u * u + v * v <= 1.0
        } else {
            u.abs() <= 1.0 && v.abs() <= 1.0
        }
    }
}

/// Sum of a few oriented sinusoids, roughly in `[-1, 1]`.
struct Waves {
    parts: Vec<(f64, f64, f64, f64)>,
}

impl Waves {
    fn random(rng: &mut impl Rng, count: usize, freq: (f64, f64)) -> Self {
        let parts = (0..count)
            .map(|_| {
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                let f = rng.random_range(freq.0..freq.1);
                (f * theta.cos(), f * theta.sin(), rng.random_range(0.0..std::f64::consts::TAU), 1.0)
            })
            .collect::<Vec<_>>();
        Self { parts }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        let n = self.parts.len() as f64;
        self.parts.iter().map(|&(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin()).sum::<f64>() / n.sqrt()
    }
}

/// Procedural ambient and flash-only renderings of one random scene.
///
/// Both share an albedo made of smooth color gradients, textured shapes and
/// fine texture everywhere. The ambient image multiplies it by a colored
/// low-frequency shading field; the flash-only image by a centred falloff
/// with hard cast shadows. Deterministic in `seed`; values in `[0, 1]`.
pub fn generate_scene(seed: u64, height: usize, width: usize) -> Result<(LinearImage, LinearImage)> {
    check_network_dims(height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);

    let base: [[f64; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.15..0.75)));
    let n_shapes = rng.random_range(6..14);
    let shapes: Vec<(Shape, [f64; 3], Waves)> = (0..n_shapes)
        .map(|_| {
            let s = Shape::random(&mut rng, h, w, (0.06, 0.3));
            let color = std::array::from_fn(|_| rng.random_range(0.1..0.85));
            let tex = Waves::random(&mut rng, 2, (0.4, 1.4));
            (s, color, tex)
        })
        .collect();
    let fine = Waves::random(&mut rng, 4, (0.5, 1.6));
    let grain_seed = rng.next_u64();

    let shade = Waves::random(&mut rng, 2, (0.004, 0.02));
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.55..1.0));
    let shade_amp = rng.random_range(0.1..0.3);

    let (fy, fx) = (rng.random_range(0.3..0.7) * h, rng.random_range(0.3..0.7) * w);
    let radius = rng.random_range(0.5..1.0) * h.max(w);
    let flash_gain = rng.random_range(0.75..1.0);
    let n_shadows = rng.random_range(1..4);
    let shadow_shift = (rng.random_range(-0.06..0.06) * h, rng.random_range(-0.06..0.06) * w);
    let casters: Vec<usize> = (0..n_shadows).map(|_| rng.random_range(0..shapes.len())).collect();
    let shadow_level = rng.random_range(0.15..0.35);

    let mut grain_rng = ChaCha8Rng::seed_from_u64(grain_seed);
    let grain: Vec<f64> = (0..height * width).map(|_| grain_rng.random_range(-1.0..1.0)).collect();

    let mut ambient = LinearImage::zeros(height, width);
    let mut flash = LinearImage::zeros(height, width);
    for yi in 0..height {
        for xi in 0..width {
            let (y, x) = (yi as f64, xi as f64);
            let (u, v) = (y / h, x / w);
            let mut albedo: [f64; 3] = std::array::from_fn(|c| base[0][c] * (1.0 - u) * (1.0 - v) + base[1][c] * u + base[2][c] * v * (1.0 - u));
            for (s, color, tex) in &shapes {
                if s.contains(y, x) {
                    let t = 1.0 + 0.25 * tex.at(y, x);
                    albedo = color.map(|c| c * t);
                }
            }
            let texture = 1.0 + 0.18 * fine.at(y, x) + 0.06 * grain[yi * width + xi];
            let albedo = albedo.map(|a| (a * texture).clamp(0.02, 0.95));

            let s = 1.0 - shade_amp + shade_amp * shade.at(y, x).clamp(-1.0, 1.0);
            let r2 = ((y - fy).powi(2) + (x - fx).powi(2)) / (radius * radius);
            let mut fl = flash_gain / (1.0 + 2.0 * r2);
            if casters.iter().any(|&i| {
                let (sh, _, _) = &shapes[i];
                !sh.contains(y, x) && sh.contains(y - shadow_shift.0, x - shadow_shift.1)
            }) {
                fl *= shadow_level;
            }
            for c in 0..3 {
                ambient.set(c, yi, xi, (albedo[c] * s * tint[c]).clamp(0.0, 1.0) as f32);
                flash.set(c, yi, xi, (albedo[c] * fl).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok((ambient, flash))
}

/// `clean_nf = ambient / dim`, `clean_f = 2 flash_only + clean_nf`.
pub fn compose_pair(ambient: &LinearImage, flash_only: &LinearImage, dim_factor: f64) -> Result<(LinearImage, LinearImage)> {
    ambient.ensure_same_dims(flash_only)?;
    if !(dim_factor >= 1.0) {
        return Err(Error::Config(format!("dim factor must be >= 1, got {dim_factor}")));
    }
    let inv = (1.0 / dim_factor) as f32;
    let clean_nf = ambient.map(|v| v * inv);
    let clean_f = flash_only.zip_map(&clean_nf, |f, a| 2.0 * f + a)?;
    Ok((clean_nf, clean_f))
}

/// Ranges for random homographies. `scaled` shrinks or grows all of them
/// together, which the misalignment sweep uses to target a displacement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomographyRanges {
    /// Half-width of the uniform rotation range per axis, in degrees.
    pub rotation_deg: f64,
    /// Maximum relative deviation of the scale from 1.
    pub scale_delta: f64,
    /// Maximum translation per axis in pixels.
    pub translation_px: f64,
}

impl Default for HomographyRanges {
    fn default() -> Self {
        Self {
            rotation_deg: 0.5,
            scale_delta: 0.02,
            translation_px: 2.0,
        }
    }
}

/// Unit-range variates behind one random homography.
#[derive(Clone, Copy, Debug)]
pub struct HomographyDraw {
    rotation: [f64; 3],
    scale: f64,
    translation: [f64; 2],
}

impl HomographyDraw {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let rotation = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
        let scale = rng.random_range(-1.0..=1.0);
        let translation = std::array::from_fn(|_| {
            let mag: f64 = rng.random_range(0.0..=1.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        });
        Self {
            rotation,
            scale,
            translation,
        }
    }

    pub fn homography(&self, ranges: &HomographyRanges, lambda: f64, height: usize, width: usize) -> Result<Homography> {
        Homography::from_params(
            self.rotation.map(|r| r * ranges.rotation_deg * lambda),
            1.0 + self.scale * ranges.scale_delta * lambda,
            self.translation.map(|t| t * ranges.translation_px * lambda),
            height,
            width,
        )
    }
}

pub fn sample_homography(rng: &mut impl Rng, ranges: &HomographyRanges, height: usize, width: usize) -> Result<Homography> {
    HomographyDraw::sample(rng).homography(ranges, 1.0, height, width)
}

/// Draws homographies with the given ranges scaled so that the mean
/// displacement equals `target` (bisection on the common scale, 0.5%
/// tolerance). Draws that cannot reach the target within a 100x scale are
/// redrawn.
pub fn sample_homography_with_displacement(
    rng: &mut impl Rng,
    ranges: &HomographyRanges,
    target: f64,
    height: usize,
    width: usize,
) -> Result<Homography> {
    if target <= 0.0 {
        return Ok(Homography::identity());
    }
    loop {
        let draw = HomographyDraw::sample(rng);
        let disp = |l: f64| -> Result<f64> { Ok(mean_displacement(&draw.homography(ranges, l, height, width)?, height, width)) };
        let mut hi = 1.0;
        while disp(hi)? < target && hi < 100.0 {
            hi *= 2.0;
        }
        if disp(hi)? < target {
            continue;
        }
        let mut lo = 0.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let d = disp(mid)?;
            if (d - target).abs() <= 0.005 * target {
                return draw.homography(ranges, mid, height, width);
            }
            if d < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        return draw.homography(ranges, 0.5 * (lo + hi), height, width);
    }
}

/// Adds independent Gaussian noise of variance `sigma_r^2 + sigma_s^2 x`.
/// The result is not clipped.
pub fn add_noise(img: &LinearImage, np: &NoiseParams, rng: &mut impl Rng) -> Result<LinearImage> {
    let (h, w) = img.dims();
    for c in 0..3 {
        for (i, &v) in img.plane(c).iter().enumerate() {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::NegativeInput {
                    value: v,
                    channel: c,
                    row: i / w,
                    col: i % w,
                });
            }
        }
    }
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let out = img.map(|v| {
        let z: f64 = std_normal.sample(rng);
        (v as f64 + np.stddev(v as f64) * z) as f32
    });
    debug_assert_eq!(out.dims(), (h, w));
    Ok(out)
}

/// `sqrt(sigma_r^2 + sigma_s^2 max(0, x))` of the observed, noisy image.
pub fn noise_stddev_map(noisy: &LinearImage, np: &NoiseParams) -> LinearImage {
    noisy.map(|v| np.stddev(v as f64) as f32)
}

/// Builds one training or evaluation sample from a clean scene pair.
pub fn make_sample(
    ambient: &LinearImage,
    flash_only: &LinearImage,
    dim_factor: f64,
    np: &NoiseParams,
    h: &Homography,
    reference: Reference,
    rng: &mut impl Rng,
) -> Result<SamplePair> {
    let (clean_nf, clean_f) = compose_pair(ambient, flash_only, dim_factor)?;
    let (obs_nf, obs_f) = match reference {
        Reference::NoFlash => (clean_nf.clone(), warp_image(&clean_f, h)?),
        Reference::Flash => (warp_image(&clean_nf, h)?, clean_f),
    };
    let x_nf = add_noise(&obs_nf, np, rng)?;
    let x_f = add_noise(&obs_f, np, rng)?;
    Ok(SamplePair {
        noise_map_f: noise_stddev_map(&x_f, np),
        noise_map_nf: noise_stddev_map(&x_nf, np),
        x_f,
        x_nf,
        y: clean_nf,
        render: RenderParams::with_gain(dim_factor),
        noise: *np,
        homography: h.clone(),
        reference,
        dim_factor,
    })
}

/// Simulation settings; unknown keys are rejected when parsing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dim_range: [f64; 2],
    pub log10_sigma_r: [f64; 2],
    pub log10_sigma_s: [f64; 2],
    pub homography: HomographyRanges,
    pub reference: Reference,
    pub crop_size: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dim_range: [2.0, 50.0],
            log10_sigma_r: [-3.0, -2.0],
            log10_sigma_s: [-4.0, -2.6],
            homography: HomographyRanges::default(),
            reference: Reference::NoFlash,
            crop_size: 448,
        }
    }
}

/// Conditions drawn for one sample.
#[derive(Clone, Debug)]
pub struct Conditions {
    pub dim_factor: f64,
    pub noise: NoiseParams,
    pub homography: Homography,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let [dlo, dhi] = self.dim_range;
        if !(dlo >= 1.0 && dhi >= dlo) {
            return Err(Error::Config(format!("dim_range must satisfy 1 <= lo <= hi, got {:?}", self.dim_range)));
        }
        for (name, r) in [("log10_sigma_r", self.log10_sigma_r), ("log10_sigma_s", self.log10_sigma_s)] {
            if !(r[0] <= r[1]) || !r[1].is_finite() {
                return Err(Error::Config(format!("{name} must satisfy lo <= hi, got {r:?}")));
            }
        }
        check_network_dims(self.crop_size, self.crop_size)
    }

    /// Dim factor log-uniform in `dim_range`, noise levels uniform in log10.
    pub fn sample_conditions(&self, rng: &mut impl Rng) -> Result<Conditions> {
        let uniform = |rng: &mut dyn RngCore, r: [f64; 2]| if r[1] > r[0] { rng.random_range(r[0]..=r[1]) } else { r[0] };
        let [dlo, dhi] = self.dim_range;
        let dim_factor = uniform(rng, [dlo.ln(), dhi.ln()]).exp();
        let noise = NoiseParams::from_log10(uniform(rng, self.log10_sigma_r), uniform(rng, self.log10_sigma_s))?;
        let homography = sample_homography(rng, &self.homography, self.crop_size, self.crop_size)?;
        Ok(Conditions {
            dim_factor,
            noise,
            homography,
        })
    }

    /// Procedural sample `index` of the stream seeded by `seed`.
    pub fn generate(&self, seed: u64, index: u64) -> Result<SamplePair> {
        let mut rng = sample_rng(seed, index);
        let scene_seed = rng.next_u64();
        let (ambient, flash) = generate_scene(scene_seed, self.crop_size, self.crop_size)?;
        let cond = self.sample_conditions(&mut rng)?;
        make_sample(&ambient, &flash, cond.dim_factor, &cond.noise, &cond.homography, self.reference, &mut rng)
    }

    /// Like [`SimConfig::generate`] but on a user-supplied scene pair, centre
    /// cropped to `crop_size`.
    pub fn generate_from_pair(&self, ambient: &LinearImage, flash_only: &LinearImage, seed: u64, index: u64) -> Result<SamplePair> {
        let mut rng = sample_rng(seed, index);
        let _ = rng.next_u64();
        let a = ambient.center_crop(self.crop_size, self.crop_size)?;
        let f = flash_only.center_crop(self.crop_size, self.crop_size)?;
        let cond = self.sample_conditions(&mut rng)?;
        make_sample(&a, &f, cond.dim_factor, &cond.noise, &cond.homography, self.reference, &mut rng)
    }
}

/// Scene directories of `root/{split}`, each holding `ambient.png` and
/// `flash_only.png`, sorted by name.
pub fn list_dataset(root: impl AsRef<Path>, split: &str) -> Result<Vec<PathBuf>> {
    let dir = root.as_ref().join(split);
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir)? {
        let p = entry?.path();
        if p.join("ambient.png").is_file() && p.join("flash_only.png").is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_scene(dir: impl AsRef<Path>) -> Result<(LinearImage, LinearImage)> {
    let dir = dir.as_ref();
    let (a, _) = load_image(dir.join("ambient.png"))?;
    let (f, _) = load_image(dir.join("flash_only.png"))?;
    a.ensure_same_dims(&f)?;
    Ok((a, f))
}
