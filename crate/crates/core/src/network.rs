//! Encoder with a global basis decoder and a per-pixel decoder, plus the
//! single-image, direct-prediction and per-pixel-kernel baselines.
//!
//! Widths follow the reference architecture scaled by `base_channels`
//! (`b`): encoder levels `b, 2b, 4b, 8b, 16b` with a bottleneck at `H/32`.
//! The global decoder starts from a globally pooled code and works on tiny
//! grids of side `ceil((K+1)/8)`, `ceil((K+1)/4)`, `ceil((K+1)/2)`, `K+1`,
//! ending with a 2x2 valid convolution to `K x K`; its skip inputs are
//! globally pooled encoder features replicated over the grid. The per-pixel
//! decoder upsamples bilinearly and concatenates the matching encoder level.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{check_network_dims, LinearImage};
use crate::kernel::{KernelBasis, PredictionFields};
use crate::nn::{Graph, Var};
use crate::simulation::{Reference, SamplePair};
use crate::tensor::{Float, Tensor};

/// Side of the per-pixel kernels of the kernel-prediction baseline.
pub const KPN_KERNEL: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Ours,
    SingleImage,
    DirectPrediction,
    Kpn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ours, Variant::SingleImage, Variant::DirectPrediction, Variant::Kpn];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::SingleImage => "single_image",
            Variant::DirectPrediction => "direct_prediction",
            Variant::Kpn => "kpn",
        }
    }

    fn has_global_decoder(self) -> bool {
        matches!(self, Variant::Ours | Variant::SingleImage)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub j: usize,
    pub k: usize,
    pub d: usize,
    pub base_channels: usize,
    pub variant: Variant,
    pub reference: Reference,
    /// Coarse kernel terms on or off.
    pub use_b: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl NetworkConfig {
    pub fn full() -> Self {
        Self {
            j: 90,
            k: 15,
            d: 4,
            base_channels: 64,
            variant: Variant::Ours,
            reference: Reference::NoFlash,
            use_b: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            j: 8,
            k: 5,
            d: 2,
            base_channels: 16,
            ..Self::full()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.j == 0 || self.base_channels == 0 || self.d == 0 || self.k % 2 == 0 {
            return Err(Error::Config(format!(
                "need J >= 1, odd K, d >= 1 and base_channels >= 1 (J={}, K={}, d={}, base={})",
                self.j, self.k, self.d, self.base_channels
            )));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        match self.variant {
            Variant::SingleImage => 6,
            _ => 12,
        }
    }

    /// Channels of the per-pixel head.
    pub fn pixel_head_channels(&self) -> usize {
        match self.variant {
            Variant::Ours => self.j + 3,
            Variant::SingleImage => self.j,
            Variant::DirectPrediction => 3,
            Variant::Kpn => 6 * KPN_KERNEL * KPN_KERNEL,
        }
    }

    /// Grid sides of the global decoder levels 5, 4, 3, 2.
    fn global_sides(&self) -> [usize; 4] {
        let s2 = self.k + 1;
        let s3 = s2.div_ceil(2);
        let s4 = s3.div_ceil(2);
        [s4.div_ceil(2), s4, s3, s2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum HeadKind {
    Hidden,
    Basis,
    Pixel,
}

#[derive(Clone, Debug)]
struct ConvSpec {
    name: &'static str,
    cin: usize,
    cout: usize,
    size: usize,
    head: HeadKind,
}

fn conv(name: &'static str, cin: usize, cout: usize) -> ConvSpec {
    ConvSpec {
        name,
        cin,
        cout,
        size: 3,
        head: HeadKind::Hidden,
    }
}

/// Every convolution of the model in a fixed order.
fn layer_specs(cfg: &NetworkConfig) -> Vec<ConvSpec> {
    let b = cfg.base_channels;
    let mut s = vec![
        conv("enc0", cfg.input_channels(), b),
        conv("enc1a", b, b),
        conv("enc1b", b, b),
        conv("enc2a", b, 2 * b),
        conv("enc2b", 2 * b, 2 * b),
        conv("enc3a", 2 * b, 4 * b),
        conv("enc3b", 4 * b, 4 * b),
        conv("enc4a", 4 * b, 8 * b),
        conv("enc4b", 8 * b, 8 * b),
        conv("enc5a", 8 * b, 16 * b),
        conv("enc5b", 16 * b, 16 * b),
        conv("encf", 16 * b, 16 * b),
        conv("encout", 16 * b, 16 * b),
    ];
    if cfg.variant.has_global_decoder() {
        s.extend([
            conv("gdec5a", 16 * b, 8 * b),
            conv("gdec5b", 8 * b + 16 * b, 8 * b),
            conv("gdec5c", 8 * b, 8 * b),
            conv("gdec4a", 8 * b, 4 * b),
            conv("gdec4b", 4 * b + 8 * b, 4 * b),
            conv("gdec4c", 4 * b, 4 * b),
            conv("gdec3a", 4 * b, 4 * b),
            conv("gdec3b", 4 * b + 4 * b, 4 * b),
            conv("gdec3c", 4 * b, 4 * b),
            conv("gdec2a", 4 * b, 2 * b),
            conv("gdec2b", 2 * b + 2 * b, 2 * b),
            conv("gdec2c", 2 * b, 2 * b),
            ConvSpec {
                size: 2,
                ..conv("gdecfa", 2 * b, 2 * b)
            },
            conv("gdecfb", 2 * b, 2 * b),
            ConvSpec {
                head: HeadKind::Basis,
                ..conv("basis", 2 * b, 6 * cfg.j)
            },
        ]);
    }
    s.extend([
        conv("pdec5a", 16 * b, 8 * b),
        conv("pdec5b", 8 * b + 16 * b, 8 * b),
        conv("pdec5c", 8 * b, 8 * b),
        conv("pdec4a", 8 * b, 4 * b),
        conv("pdec4b", 4 * b + 8 * b, 4 * b),
        conv("pdec4c", 4 * b, 4 * b),
        conv("pdec3a", 4 * b, 2 * b),
        conv("pdec3b", 2 * b + 4 * b, 2 * b),
        conv("pdec3c", 2 * b, 2 * b),
        conv("pdec2a", 2 * b, b),
        conv("pdec2b", b + 2 * b, b),
        conv("pdec2c", b, b),
        conv("pdec1a", b, b),
        conv("pdec1b", b + b, b),
        conv("pdec1c", b, b),
        conv("pdecf0", b, b),
        conv("pdecf1", b, b),
        ConvSpec {
            head: HeadKind::Pixel,
            ..conv("pixel", b, cfg.pixel_head_channels())
        },
    ]);
    s
}

/// Named parameters of one model, `<layer>.weight` and `<layer>.bias`, in
/// layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: NetworkConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

/// Scale applied to the uniform range of output-head weights at init.
const HEAD_WEIGHT_SCALE: f64 = 0.1;

impl ModelWeights {
    /// Deterministic initialization: weights uniform in
    /// `+-sqrt(6 / fan_in)` (heads scaled down), biases set so the untrained
    /// model already acts as a normalized box filter on the no-flash image.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for spec in layer_specs(config) {
            let fan_in = spec.cin * spec.size * spec.size;
            let mut bound = (6.0 / fan_in as f64).sqrt();
            if spec.head != HeadKind::Hidden {
                bound *= HEAD_WEIGHT_SCALE;
            }
            let n = spec.cout * fan_in;
            let w: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
            names.push(format!("{}.weight", spec.name));
            tensors.push(Tensor::from_vec([spec.cout, spec.cin, spec.size, spec.size], w));
            names.push(format!("{}.bias", spec.name));
            tensors.push(Tensor::from_vec([1, spec.cout, 1, 1], head_bias(config, spec.head, spec.cout)));
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    /// Replaces parameters from `(name, shape, values)` triples; every
    /// parameter must be supplied with its exact shape.
    pub fn from_named(config: &NetworkConfig, named: Vec<(String, Vec<usize>, Vec<f32>)>) -> Result<Self> {
        let mut w = Self::init(config, 0)?;
        let mut seen = vec![false; w.names.len()];
        for (name, shape, data) in named {
            let i = w
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter `{name}`")))?;
            if shape != w.tensors[i].shape().to_vec() || data.len() != w.tensors[i].len() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {shape:?}, expected {:?}",
                    w.tensors[i].shape()
                )));
            }
            w.tensors[i] = Tensor::from_vec(w.tensors[i].shape(), data);
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("missing parameter `{}`", w.names[i])));
        }
        Ok(w)
    }
}

/// Constant factors on the tap-valued heads, so that raw head outputs are
/// of order one while the taps they encode sum to about one.
fn basis_output_scale(cfg: &NetworkConfig) -> f64 {
    1.0 / (cfg.j * cfg.k * cfg.k) as f64
}

const KPN_OUTPUT_SCALE: f64 = 1.0 / (KPN_KERNEL * KPN_KERNEL) as f64;

fn head_bias(cfg: &NetworkConfig, head: HeadKind, cout: usize) -> Vec<f32> {
    let mut b = vec![0.0f32; cout];
    match (head, cfg.variant) {
        // A-terms start as a box filter, B-terms at zero.
        (HeadKind::Basis, _) => b[..3 * cfg.j].fill(1.0),
        (HeadKind::Pixel, Variant::Ours | Variant::SingleImage) => b.fill(1.0),
        (HeadKind::Pixel, Variant::Kpn) => b[..3 * KPN_KERNEL * KPN_KERNEL].fill(1.0),
        _ => {}
    }
    b
}

/// `[x_nf, x_f, noise_map_nf, noise_map_f]` (12 channels) or
/// `[x_nf, noise_map_nf]` for the single-image variant, as `[1, C, H, W]`.
pub fn build_input<T: Float>(sample: &SamplePair, variant: Variant) -> Tensor<T> {
    let (h, w) = sample.dims();
    let parts: Vec<&LinearImage> = match variant {
        Variant::SingleImage => vec![&sample.x_nf, &sample.noise_map_nf],
        _ => vec![&sample.x_nf, &sample.x_f, &sample.noise_map_nf, &sample.noise_map_f],
    };
    let data = parts.iter().flat_map(|img| img.data().iter().map(|&v| T::of(v as f64))).collect();
    Tensor::from_vec([1, 3 * parts.len(), h, w], data)
}

/// Graph handles of one forward pass.
pub struct Outputs {
    /// `[N, 3, H, W]` linear prediction.
    pub output: Var,
    /// `[N, 6J, K, K]` basis head (basis variants).
    pub basis: Option<Var>,
    pub coeffs: Option<Var>,
    pub scale_map: Option<Var>,
    /// Filtered no-flash image before the scale map.
    pub filtered: Option<Var>,
}

/// Parameters placed on a graph, in [`ModelWeights`] order.
pub struct ParamVars {
    vars: Vec<Var>,
    index: std::collections::HashMap<String, usize>,
}

impl ParamVars {
    pub fn new<T: Float>(g: &mut Graph<T>, weights: &ModelWeights, trainable: bool) -> Self {
        let mut vars = Vec::with_capacity(weights.tensors.len());
        let mut index = std::collections::HashMap::new();
        for (i, (name, t)) in weights.names.iter().zip(&weights.tensors).enumerate() {
            let v = t.cast::<T>();
            vars.push(if trainable { g.param(v) } else { g.input(v) });
            index.insert(name.clone(), i);
        }
        Self { vars, index }
    }

    /// Same as [`ParamVars::new`] for parameters already in precision `T`.
    pub fn from_tensors<T: Float>(g: &mut Graph<T>, weights: &ModelWeights, tensors: &[Tensor<T>]) -> Self {
        let mut vars = Vec::with_capacity(tensors.len());
        let mut index = std::collections::HashMap::new();
        for (i, (name, t)) in weights.names.iter().zip(tensors).enumerate() {
            vars.push(g.param(t.clone()));
            index.insert(name.clone(), i);
        }
        Self { vars, index }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn layer(&self, name: &str) -> (Var, Var) {
        let w = self.index[&format!("{name}.weight")];
        let b = self.index[&format!("{name}.bias")];
        (self.vars[w], self.vars[b])
    }
}

struct Builder<'a, T> {
    g: &'a mut Graph<T>,
    p: &'a ParamVars,
}

impl<T: Float> Builder<'_, T> {
    fn conv(&mut self, name: &str, x: Var) -> Var {
        let (w, b) = self.p.layer(name);
        let k = self.g.value(w).height();
        self.g.conv2d(x, w, b, if k == 3 { 1 } else { 0 })
    }

    fn conv_relu(&mut self, name: &str, x: Var) -> Var {
        let y = self.conv(name, x);
        self.g.relu(y)
    }

    fn cat(&mut self, a: Var, b: Var) -> Var {
        self.g.concat(&[a, b])
    }
}

/// Builds the forward pass for a batch. `input` holds the encoder input,
/// `x_nf` and `x_f` the observed images (`[N, 3, H, W]`).
pub fn build_forward<T: Float>(
    g: &mut Graph<T>,
    params: &ParamVars,
    cfg: &NetworkConfig,
    input: Var,
    x_nf: &Tensor<T>,
    x_f: &Tensor<T>,
) -> Result<Outputs> {
    let [_, c, h, w] = g.value(input).shape();
    check_network_dims(h, w)?;
    if c != cfg.input_channels() {
        return Err(Error::mismatch(format!(
            "variant {} expects {} input channels, got {c}",
            cfg.variant.as_str(),
            cfg.input_channels()
        )));
    }
    let mut bld = Builder { g, p: params };

    let e0 = bld.conv_relu("enc0", input);
    let e1a = bld.conv_relu("enc1a", e0);
    let e1b = bld.conv_relu("enc1b", e1a);
    let mut skips = vec![e1b];
    let mut x = e1b;
    for (a, b) in [("enc2a", "enc2b"), ("enc3a", "enc3b"), ("enc4a", "enc4b"), ("enc5a", "enc5b")] {
        let p = bld.g.max_pool2(x);
        let ya = bld.conv_relu(a, p);
        x = bld.conv_relu(b, ya);
        skips.push(x);
    }
    let p5 = bld.g.max_pool2(x);
    let ef = bld.conv_relu("encf", p5);
    let eout = bld.conv_relu("encout", ef);
    let [e1b, e2b, e3b, e4b, e5b] = [skips[0], skips[1], skips[2], skips[3], skips[4]];

    let basis = if cfg.variant.has_global_decoder() {
        let sides = cfg.global_sides();
        let levels = [
            ("gdec5a", "gdec5b", "gdec5c", e5b),
            ("gdec4a", "gdec4b", "gdec4c", e4b),
            ("gdec3a", "gdec3b", "gdec3c", e3b),
            ("gdec2a", "gdec2b", "gdec2c", e2b),
        ];
        let mut y = bld.g.global_pool_replicate(eout, sides[0], sides[0]);
        for (i, (a, b, c, skip)) in levels.into_iter().enumerate() {
            let s = sides[i];
            if i > 0 {
                y = bld.g.resize(y, s, s);
            }
            let ya = bld.conv_relu(a, y);
            let pooled = bld.g.global_pool_replicate(skip, s, s);
            let cat = bld.cat(ya, pooled);
            let yb = bld.conv_relu(b, cat);
            y = bld.conv_relu(c, yb);
        }
        let fa = bld.conv_relu("gdecfa", y);
        let fb = bld.conv_relu("gdecfb", fa);
        let raw = bld.conv("basis", fb);
        Some(bld.g.scale(raw, basis_output_scale(cfg)))
    } else {
        None
    };

    let levels = [
        ("pdec5a", "pdec5b", "pdec5c", e5b),
        ("pdec4a", "pdec4b", "pdec4c", e4b),
        ("pdec3a", "pdec3b", "pdec3c", e3b),
        ("pdec2a", "pdec2b", "pdec2c", e2b),
        ("pdec1a", "pdec1b", "pdec1c", e1b),
    ];
    let mut y = eout;
    for (a, b, c, skip) in levels {
        let [_, _, sh, sw] = bld.g.value(skip).shape();
        let up = bld.g.resize(y, sh, sw);
        let ya = bld.conv_relu(a, up);
        let cat = bld.cat(ya, skip);
        let yb = bld.conv_relu(b, cat);
        y = bld.conv_relu(c, yb);
    }
    let f0 = bld.conv_relu("pdecf0", y);
    let f1 = bld.conv_relu("pdecf1", f0);
    let head = bld.conv("pixel", f1);

    let g = bld.g;
    let out = match cfg.variant {
        Variant::Ours => {
            let coeffs = g.slice_channels(head, 0, cfg.j);
            let scale = g.slice_channels(head, cfg.j, 3);
            let basis = basis.expect("basis head");
            let filtered = g.basis_filter(x_nf.clone(), basis, coeffs, cfg.d, cfg.use_b);
            let output = g.mul(filtered, scale);
            Outputs {
                output,
                basis: Some(basis),
                coeffs: Some(coeffs),
                scale_map: Some(scale),
                filtered: Some(filtered),
            }
        }
        Variant::SingleImage => {
            let basis = basis.expect("basis head");
            let output = g.basis_filter(x_nf.clone(), basis, head, cfg.d, cfg.use_b);
            Outputs {
                output,
                basis: Some(basis),
                coeffs: Some(head),
                scale_map: None,
                filtered: Some(output),
            }
        }
        Variant::DirectPrediction => {
            let base = g.input(x_nf.clone());
            let output = g.add(base, head);
            Outputs {
                output,
                basis: None,
                coeffs: None,
                scale_map: None,
                filtered: None,
            }
        }
        Variant::Kpn => {
            let kernels = g.scale(head, KPN_OUTPUT_SCALE);
            let output = g.pixel_kernel_filter(x_nf.clone(), x_f.clone(), kernels, KPN_KERNEL);
            Outputs {
                output,
                basis: None,
                coeffs: None,
                scale_map: None,
                filtered: None,
            }
        }
    };
    Ok(out)
}

fn sample_images<T: Float>(sample: &SamplePair) -> (Tensor<T>, Tensor<T>) {
    (sample.x_nf.to_tensor(), sample.x_f.to_tensor())
}

/// Everything one inference pass produces for a single sample.
pub struct Inference {
    pub output: LinearImage,
    pub basis: Option<KernelBasis<f32>>,
    pub fields: Option<PredictionFields<f32>>,
    /// Filtered no-flash image `F` (basis variants).
    pub filtered: Option<LinearImage>,
    /// Scale map `G` (variant `ours`).
    pub scale_map: Option<LinearImage>,
}

pub fn infer(weights: &ModelWeights, sample: &SamplePair) -> Result<Inference> {
    let cfg = &weights.config;
    let mut g = Graph::<f32>::new();
    let params = ParamVars::new(&mut g, weights, false);
    let input = g.input(build_input(sample, cfg.variant));
    let (x_nf, x_f) = sample_images::<f32>(sample);
    let out = build_forward(&mut g, &params, cfg, input, &x_nf, &x_f)?;
    let output = LinearImage::from_tensor(g.value(out.output), 0)?;
    let basis = out
        .basis
        .map(|b| KernelBasis::from_head(g.value(b), 0, cfg.d, cfg.use_b))
        .transpose()?;
    let [_, _, h, w] = x_nf.shape();
    let fields = match (out.coeffs, out.scale_map) {
        (Some(c), Some(s)) => Some(PredictionFields::new(g.value(c).clone(), g.value(s).clone())?),
        (Some(c), None) => Some(PredictionFields::new(g.value(c).clone(), Tensor::full([1, 3, h, w], 1.0))?),
        _ => None,
    };
    let filtered = out.filtered.map(|f| LinearImage::from_tensor(g.value(f), 0)).transpose()?;
    let scale_map = out.scale_map.map(|s| LinearImage::from_tensor(g.value(s), 0)).transpose()?;
    Ok(Inference {
        output,
        basis,
        fields,
        filtered,
        scale_map,
    })
}

/// Basis and per-pixel fields of variant `ours`.
pub fn forward(weights: &ModelWeights, sample: &SamplePair) -> Result<(KernelBasis<f32>, PredictionFields<f32>)> {
    expect_variant(weights, &[Variant::Ours])?;
    let inf = infer(weights, sample)?;
    Ok((inf.basis.expect("basis"), inf.fields.expect("fields")))
}

/// `filter_fast(x_nf, basis, coeffs) * G` with the predicted basis.
pub fn denoise(weights: &ModelWeights, sample: &SamplePair) -> Result<LinearImage> {
    expect_variant(weights, &[Variant::Ours])?;
    Ok(infer(weights, sample)?.output)
}

pub fn forward_baseline(weights: &ModelWeights, sample: &SamplePair) -> Result<LinearImage> {
    expect_variant(weights, &[Variant::SingleImage, Variant::DirectPrediction, Variant::Kpn])?;
    Ok(infer(weights, sample)?.output)
}

/// Denoised output of any variant.
pub fn predict(weights: &ModelWeights, sample: &SamplePair) -> Result<LinearImage> {
    Ok(infer(weights, sample)?.output)
}

fn expect_variant(weights: &ModelWeights, allowed: &[Variant]) -> Result<()> {
    let v = weights.config.variant;
    if allowed.contains(&v) {
        Ok(())
    } else {
        Err(Error::VariantMismatch {
            expected: allowed.iter().map(|v| v.as_str()).collect::<Vec<_>>().join("|"),
            actual: v.as_str().to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::SimConfig;

    fn tiny(variant: Variant) -> NetworkConfig {
        NetworkConfig {
            j: 4,
            k: 5,
            d: 2,
            base_channels: 4,
            variant,
            ..NetworkConfig::full()
        }
    }

    fn sample(size: usize) -> SamplePair {
        SimConfig {
            crop_size: size,
            ..SimConfig::default()
        }
        .generate(3, 0)
        .unwrap()
    }

    #[test]
    fn global_sides_match_the_reference_layout() {
        assert_eq!(NetworkConfig::full().global_sides(), [2, 4, 8, 16]);
        assert_eq!(NetworkConfig::desk().global_sides(), [1, 2, 3, 6]);
    }

    #[test]
    fn input_layout() {
        let s = sample(32);
        let t = build_input::<f32>(&s, Variant::Ours);
        assert_eq!(t.shape(), [1, 12, 32, 32]);
        assert_eq!(t.plane(0, 4), s.x_f.plane(1));
        assert_eq!(t.plane(0, 11), s.noise_map_f.plane(2));
        let t = build_input::<f32>(&s, Variant::SingleImage);
        assert_eq!(t.shape(), [1, 6, 32, 32]);
        assert_eq!(t.plane(0, 3), s.noise_map_nf.plane(0));
    }

    #[test]
    fn output_shapes_per_variant() {
        let s = sample(64);
        for v in Variant::ALL {
            let w = ModelWeights::init(&tiny(v), 1).unwrap();
            let inf = infer(&w, &s).unwrap();
            assert_eq!(inf.output.dims(), (64, 64));
            assert!(inf.output.is_finite());
            assert_eq!(inf.basis.is_some(), v.has_global_decoder());
        }
        let w = ModelWeights::init(&tiny(Variant::Ours), 1).unwrap();
        let (basis, fields) = forward(&w, &s).unwrap();
        assert_eq!((basis.size(), basis.kernel_size()), (4, 5));
        assert_eq!(fields.coeffs.shape(), [1, 4, 64, 64]);
        assert_eq!(fields.scale_map.shape(), [1, 3, 64, 64]);
        assert!(denoise(&ModelWeights::init(&tiny(Variant::Kpn), 1).unwrap(), &s).is_err());
        assert!(forward_baseline(&w, &s).is_err());
    }

    #[test]
    fn kpn_head_has_150_channels() {
        assert_eq!(tiny(Variant::Kpn).pixel_head_channels(), 150);
    }

    #[test]
    fn parameters_roundtrip_by_name() {
        let w = ModelWeights::init(&tiny(Variant::Ours), 4).unwrap();
        let named = w
            .names()
            .iter()
            .zip(w.tensors())
            .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().to_vec()))
            .collect();
        assert_eq!(ModelWeights::from_named(&w.config, named).unwrap(), w);
        assert_eq!(ModelWeights::init(&tiny(Variant::Ours), 4).unwrap(), w);
        assert_ne!(ModelWeights::init(&tiny(Variant::Ours), 5).unwrap(), w);
    }
}
