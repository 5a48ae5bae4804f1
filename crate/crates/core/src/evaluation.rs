//! Evaluation protocol: dimming sweeps, misalignment curves, method tables
//! and the two-column ablation runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mean_displacement, Homography};
use crate::image::LinearImage;
use crate::metrics::{psnr, ssim};
use crate::network::{predict, ModelWeights, NetworkConfig, Variant};
use crate::render::render_srgb;
use crate::simulation::{
    generate_scene, make_sample, sample_homography, sample_homography_with_displacement, HomographyRanges,
    NoiseParams, Reference, SamplePair, SimConfig,
};
use crate::training::{train_cached, TrainConfig, TrainData, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub dim_factors: Vec<f64>,
    pub log10_sigma_r: f64,
    pub log10_sigma_s: f64,
    pub n_images: usize,
    pub crop_size: usize,
    /// Target mean displacements (px) of the misalignment curve.
    pub displacement_bins: Vec<f64>,
    /// Dim factor used for the misalignment curve.
    pub misalignment_dim: f64,
    pub homography: HomographyRanges,
    pub reference: Reference,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            dim_factors: vec![100.0, 50.0, 25.0, 12.5],
            log10_sigma_r: -2.6,
            log10_sigma_s: -3.6,
            n_images: 64,
            crop_size: 128,
            displacement_bins: vec![0.0, 2.0, 5.0, 10.0, 15.0, 20.0],
            misalignment_dim: 50.0,
            homography: HomographyRanges::default(),
            reference: Reference::NoFlash,
            seed: 1_000_003,
        }
    }
}

/// Anything that maps a sample to a linear estimate of its ground truth.
pub trait Denoiser: Sync {
    fn name(&self) -> String;
    fn denoise(&self, sample: &SamplePair) -> Result<LinearImage>;
}

impl Denoiser for ModelWeights {
    fn name(&self) -> String {
        self.config.variant.as_str().to_string()
    }

    fn denoise(&self, sample: &SamplePair) -> Result<LinearImage> {
        predict(self, sample)
    }
}

/// A model under a display name.
pub struct Named<'a, D: ?Sized>(pub String, pub &'a D);

impl<D: Denoiser + ?Sized> Denoiser for Named<'_, D> {
    fn name(&self) -> String {
        self.0.clone()
    }

    fn denoise(&self, sample: &SamplePair) -> Result<LinearImage> {
        self.1.denoise(sample)
    }
}

/// Returns the ground truth.
pub struct Oracle;

impl Denoiser for Oracle {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn denoise(&self, sample: &SamplePair) -> Result<LinearImage> {
        Ok(sample.y.clone())
    }
}

/// Returns the noisy no-flash input.
pub struct NoisyInput;

impl Denoiser for NoisyInput {
    fn name(&self) -> String {
        "noisy_input".into()
    }

    fn denoise(&self, sample: &SamplePair) -> Result<LinearImage> {
        Ok(sample.x_nf.clone())
    }
}

const TAG_SCENE: u64 = 1;
const TAG_HOMOGRAPHY: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_BIN: u64 = 4;

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        crate::image::check_network_dims(self.crop_size, self.crop_size)?;
        if self.n_images == 0 || self.dim_factors.iter().any(|&d| !(d >= 1.0)) {
            return Err(Error::Config("need n_images >= 1 and dim factors >= 1".into()));
        }
        if self.displacement_bins.iter().any(|&t| !(t >= 0.0)) {
            return Err(Error::Config("displacement bins must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn noise(&self) -> Result<NoiseParams> {
        NoiseParams::from_log10(self.log10_sigma_r, self.log10_sigma_s)
    }

    /// Independent stream per (purpose, condition, image).
    fn rng(&self, tag: u64, condition: usize, image: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (tag << 56) ^ ((condition as u64) << 40));
        rng.set_stream(image as u64);
        rng
    }

    fn scene(&self, image: usize) -> Result<(LinearImage, LinearImage)> {
        let seed = rand::RngCore::next_u64(&mut self.rng(TAG_SCENE, 0, image));
        generate_scene(seed, self.crop_size, self.crop_size)
    }

    fn build(&self, image: usize, dim: f64, h: &Homography, noise_condition: usize) -> Result<SamplePair> {
        let (ambient, flash) = self.scene(image)?;
        let mut rng = self.rng(TAG_NOISE, noise_condition, image);
        make_sample(&ambient, &flash, dim, &self.noise()?, h, self.reference, &mut rng)
    }

    /// Image `image` of the dimming sweep at `dim_factors[dim_index]`; the
    /// homography is shared across dim factors.
    pub fn sweep_sample(&self, image: usize, dim_index: usize) -> Result<SamplePair> {
        let s = self.crop_size;
        let h = sample_homography(&mut self.rng(TAG_HOMOGRAPHY, 0, image), &self.homography, s, s)?;
        self.build(image, self.dim_factors[dim_index], &h, dim_index)
    }

    /// Image `image` of displacement bin `bin`.
    pub fn misalignment_sample(&self, image: usize, bin: usize) -> Result<SamplePair> {
        let s = self.crop_size;
        let target = self.displacement_bins[bin];
        let mut rng = self.rng(TAG_BIN, bin, image);
        let h = sample_homography_with_displacement(&mut rng, &self.homography, target, s, s)?;
        self.build(image, self.misalignment_dim, &h, 1000 + bin)
    }
}

/// PSNR and SSIM of the rendered estimate against the rendered ground truth.
pub fn score(pred: &LinearImage, sample: &SamplePair) -> Result<(f64, f64)> {
    let p = render_srgb(pred, &sample.render);
    let t = render_srgb(&sample.y, &sample.render);
    Ok((psnr(&p, &t)?, ssim(&p, &t)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dim_factor: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub target: f64,
    /// Mean over images of the achieved mean displacement.
    pub achieved: f64,
    pub psnr: f64,
}

fn mean_scores<F>(n: usize, f: F) -> Result<(f64, f64)>
where
    F: Fn(usize) -> Result<(f64, f64)> + Sync + Send,
{
    let scores: Vec<(f64, f64)> = (0..n).into_par_iter().map(f).collect::<Result<_>>()?;
    let (p, s) = scores.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok((p / n as f64, s / n as f64))
}

/// Mean PSNR/SSIM per dim factor.
pub fn eval_sweep(model: &(impl Denoiser + ?Sized), protocol: &EvalProtocol) -> Result<Vec<SweepRow>> {
    protocol.validate()?;
    (0..protocol.dim_factors.len())
        .map(|di| {
            let (p, s) = mean_scores(protocol.n_images, |i| {
                let sample = protocol.sweep_sample(i, di)?;
                score(&model.denoise(&sample)?, &sample)
            })?;
            Ok(SweepRow {
                dim_factor: protocol.dim_factors[di],
                psnr: p,
                ssim: s,
            })
        })
        .collect()
}

/// PSNR against the mean displacement of the misalignment.
pub fn eval_misalignment(model: &(impl Denoiser + ?Sized), protocol: &EvalProtocol) -> Result<Vec<CurvePoint>> {
    protocol.validate()?;
    let s = protocol.crop_size;
    (0..protocol.displacement_bins.len())
        .map(|bin| {
            let (p, achieved) = mean_scores(protocol.n_images, |i| {
                let sample = protocol.misalignment_sample(i, bin)?;
                let (p, _) = score(&model.denoise(&sample)?, &sample)?;
                Ok((p, mean_displacement(&sample.homography, s, s)))
            })?;
            Ok(CurvePoint {
                target: protocol.displacement_bins[bin],
                achieved,
                psnr: p,
            })
        })
        .collect()
}

/// One sweep per method, same protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dim_factors: Vec<f64>,
    pub methods: Vec<(String, Vec<SweepRow>)>,
}

pub fn compare_methods(models: &[&dyn Denoiser], protocol: &EvalProtocol) -> Result<Comparison> {
    let methods = models
        .iter()
        .map(|m| Ok((m.name(), eval_sweep(*m, protocol)?)))
        .collect::<Result<_>>()?;
    Ok(Comparison {
        dim_factors: protocol.dim_factors.clone(),
        methods,
    })
}

impl Comparison {
    pub fn row(&self, method: &str) -> Option<&[SweepRow]> {
        self.methods.iter().find(|(n, _)| n == method).map(|(_, r)| r.as_slice())
    }

    fn best(&self, col: usize, ssim: bool) -> f64 {
        self.methods
            .iter()
            .map(|(_, r)| if ssim { r[col].ssim } else { r[col].psnr })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Markdown table, best value per column in bold.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Method |");
        for d in &self.dim_factors {
            let _ = write!(s, " PSNR {d}x | SSIM {d}x |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|---:|".repeat(self.dim_factors.len()));
        s.push('\n');
        for (name, rows) in &self.methods {
            let _ = write!(s, "| {name} |");
            for (c, r) in rows.iter().enumerate() {
                for (v, is_ssim, prec) in [(r.psnr, false, 2), (r.ssim, true, 4)] {
                    let cell = format!("{v:.prec$}");
                    if v == self.best(c, is_ssim) && self.methods.len() > 1 {
                        let _ = write!(s, " **{cell}** |");
                    } else {
                        let _ = write!(s, " {cell} |");
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,dim_factor,psnr,ssim\n");
        for (name, rows) in &self.methods {
            for r in rows {
                let _ = writeln!(s, "{name},{},{},{}", r.dim_factor, r.psnr, r.ssim);
            }
        }
        s
    }
}

pub fn curve_csv(curves: &[(String, Vec<CurvePoint>)]) -> String {
    let mut s = String::from("method,target_displacement,achieved_displacement,psnr\n");
    for (name, pts) in curves {
        for p in pts {
            let _ = writeln!(s, "{name},{},{},{}", p.target, p.achieved, p.psnr);
        }
    }
    s
}

/// Rendered `[x_nf | x_f | output | ground truth]` strip.
pub fn triptych(sample: &SamplePair, output: &LinearImage) -> Result<LinearImage> {
    let panels = [&sample.x_nf, &sample.x_f, output, &sample.y].map(|img| render_srgb(img, &sample.render));
    let (h, w) = sample.dims();
    Ok(LinearImage::from_fn(h, 4 * w, |c, y, x| panels[x / w].get(c, y, x % w)))
}

/// Writes `table.csv`, `table.md`, `table.json`, `curve.csv` (when curves
/// are given) and one triptych PNG per method for the first
/// `n_triptychs` images of the dim-50 (or first) column.
pub fn write_results(
    dir: impl AsRef<Path>,
    comparison: &Comparison,
    curves: &[(String, Vec<CurvePoint>)],
    models: &[&dyn Denoiser],
    protocol: &EvalProtocol,
    n_triptychs: usize,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("table.csv"), comparison.to_csv())?;
    fs::write(dir.join("table.md"), comparison.to_markdown())?;
    fs::write(dir.join("table.json"), serde_json::to_string_pretty(comparison)?)?;
    if !curves.is_empty() {
        fs::write(dir.join("curve.csv"), curve_csv(curves))?;
    }
    let di = protocol.dim_factors.iter().position(|&d| d == 50.0).unwrap_or(0);
    for i in 0..n_triptychs.min(protocol.n_images) {
        let sample = protocol.sweep_sample(i, di)?;
        for m in models {
            let t = triptych(&sample, &m.denoise(&sample)?)?;
            let path = dir.join(format!("triptych_{}_{i:03}.png", m.name()));
            crate::image::save_image(path, &t, crate::image::BitDepth::Eight, None)?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// With and without the coarse `B_j` kernels.
    BasisB,
    /// No-flash and flash geometric reference.
    Reference,
}

/// Two trained models of one ablation and their sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ablation: Ablation,
    pub columns: [String; 2],
    pub dim_factors: Vec<f64>,
    pub psnr: [Vec<f64>; 2],
    pub ssim: [Vec<f64>; 2],
}

impl AblationReport {
    pub fn to_markdown(&self) -> String {
        let mut s = format!("| Dim factor | {} | {} |\n|---:|---:|---:|\n", self.columns[0], self.columns[1]);
        for (i, d) in self.dim_factors.iter().enumerate() {
            let _ = writeln!(
                s,
                "| {d} | {:.2} dB / {:.4} | {:.2} dB / {:.4} |",
                self.psnr[0][i], self.ssim[0][i], self.psnr[1][i], self.ssim[1][i]
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("column,dim_factor,psnr,ssim\n");
        for k in 0..2 {
            for (i, d) in self.dim_factors.iter().enumerate() {
                let _ = writeln!(s, "{},{d},{},{}", self.columns[k], self.psnr[k][i], self.ssim[k][i]);
            }
        }
        s
    }
}

/// Trains both settings of `ablation` from the same seed and data stream and
/// evaluates each under its own reference frame.
pub fn run_ablation(
    ablation: Ablation,
    net: &NetworkConfig,
    tc: &TrainConfig,
    sim: &SimConfig,
    protocol: &EvalProtocol,
) -> Result<AblationReport> {
    let settings: [(String, NetworkConfig, Reference); 2] = match ablation {
        Ablation::BasisB => [
            ("with B".into(), NetworkConfig { use_b: true, ..net.clone() }, net.reference),
            ("without B".into(), NetworkConfig { use_b: false, ..net.clone() }, net.reference),
        ],
        Ablation::Reference => [
            ("no-flash reference".into(), NetworkConfig { reference: Reference::NoFlash, ..net.clone() }, Reference::NoFlash),
            ("flash reference".into(), NetworkConfig { reference: Reference::Flash, ..net.clone() }, Reference::Flash),
        ],
    };
    let mut psnrs = Vec::new();
    let mut ssims = Vec::new();
    for (_, cfg, reference) in &settings {
        let weights = ModelWeights::init(cfg, tc.seed)?;
        let data = TrainData::Procedural {
            sim: SimConfig { reference: *reference, ..sim.clone() },
            seed: tc.seed,
        };
        let mut trainer = Trainer::new(weights, tc.clone())?;
        trainer.run(&data, &[])?;
        let p = EvalProtocol { reference: *reference, ..protocol.clone() };
        let rows = eval_sweep(trainer.weights(), &p)?;
        psnrs.push(rows.iter().map(|r| r.psnr).collect::<Vec<_>>());
        ssims.push(rows.iter().map(|r| r.ssim).collect::<Vec<_>>());
    }
    let [a, b] = settings.map(|s| s.0);
    Ok(AblationReport {
        ablation,
        columns: [a, b],
        dim_factors: protocol.dim_factors.clone(),
        psnr: [psnrs[0].clone(), psnrs[1].clone()],
        ssim: [ssims[0].clone(), ssims[1].clone()],
    })
}

/// Several variants trained on the same procedural stream from the same
/// seed, then compared on the fixed protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Experiment {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub protocol: EvalProtocol,
    pub variants: Vec<Variant>,
    pub val_images: usize,
    pub val_seed: u64,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            network: NetworkConfig::desk(),
            train: TrainConfig {
                max_steps: 20_000,
                val_interval: 500,
                checkpoint_interval: 1000,
                ..TrainConfig::default()
            },
            sim: SimConfig {
                crop_size: 128,
                ..SimConfig::default()
            },
            protocol: EvalProtocol::default(),
            variants: vec![Variant::Ours, Variant::SingleImage, Variant::DirectPrediction],
            val_images: 8,
            val_seed: 7919,
        }
    }
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.sim.validate()?;
        self.protocol.validate()
    }

    pub fn validation_set(&self) -> Result<Vec<SamplePair>> {
        (0..self.val_images as u64).map(|i| self.sim.generate(self.val_seed, i)).collect()
    }

    /// Trains one variant under `dir/<variant>`, reusing or resuming any
    /// checkpoints already there.
    pub fn train_variant(&self, dir: impl AsRef<Path>, variant: Variant) -> Result<ModelWeights> {
        self.validate()?;
        let cfg = self.network.clone().with_variant(variant);
        let init = ModelWeights::init(&cfg, self.train.seed)?;
        let data = TrainData::Procedural {
            sim: SimConfig { reference: cfg.reference, ..self.sim.clone() },
            seed: self.train.seed,
        };
        train_cached(dir.as_ref().join(variant.as_str()), init, &self.train, &data, &self.validation_set()?)
    }

    pub fn train_all(&self, dir: impl AsRef<Path>) -> Result<Vec<(Variant, ModelWeights)>> {
        self.variants.iter().map(|&v| Ok((v, self.train_variant(dir.as_ref(), v)?))).collect()
    }
}
