//! The `fnf` command line: simulation, training, denoising, benchmarks and
//! ablations on top of `fnf_core`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use fnf_core::evaluation::{
    compare_methods, eval_misalignment, run_ablation, write_results, Ablation, Denoiser, EvalProtocol, Experiment,
    Named,
};
use fnf_core::geometry::Homography;
use fnf_core::image::{load_image, save_image, BitDepth, ImageMeta};
use fnf_core::kernel::{kernel_visualization, pixel_kernel, write_kernel_dump};
use fnf_core::network::{forward, infer, ModelWeights, NetworkConfig, Variant};
use fnf_core::render::render_srgb;
use fnf_core::simulation::{list_dataset, load_scene, noise_stddev_map, NoiseParams, Reference, SamplePair, SimConfig};
use fnf_core::training::{load_weights, train_cached, Checkpoint, TrainConfig, TrainData, Trainer};
use fnf_core::{Error, LinearImage};

pub mod manifest;

pub use manifest::RunManifest;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs: exit code 2.
    Usage(String),
    /// Anything that went wrong while running: exit code 3.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::InvalidDimensions(_)
            | Error::DimensionMismatch(_)
            | Error::VariantMismatch { .. }
            | Error::NegativeInput { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Parser, Debug)]
#[command(name = "fnf", version, about = "Flash/no-flash low-light denoising")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate simulated training pairs.
    Simulate(SimulateArgs),
    /// Check saved samples against their invariants.
    Validate(ValidateArgs),
    /// Train a model, resuming matching checkpoints in the output directory.
    Train(TrainArgs),
    /// Denoise one flash/no-flash pair.
    Denoise(DenoiseArgs),
    /// Compare trained models on the evaluation protocol.
    Benchmark(BenchmarkArgs),
    /// Train and compare the two settings of an ablation.
    Ablate(AblateArgs),
    /// Write the predicted kernel field and per-pixel kernel images.
    ExportKernels(ExportKernelsArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Validate(_) => "validate",
            Command::Train(_) => "train",
            Command::Denoise(_) => "denoise",
            Command::Benchmark(_) => "benchmark",
            Command::Ablate(_) => "ablate",
            Command::ExportKernels(_) => "export-kernels",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small network and 128 px crops.
    #[default]
    Desk,
    /// Full-size network and 448 px crops.
    Full,
}

impl Preset {
    pub fn experiment(self) -> Experiment {
        match self {
            Preset::Desk => Experiment::default(),
            Preset::Full => Experiment {
                network: NetworkConfig::full(),
                train: TrainConfig {
                    max_steps: 1_500_000,
                    val_interval: 5000,
                    checkpoint_interval: 10_000,
                    ..TrainConfig::default()
                },
                sim: SimConfig::default(),
                protocol: EvalProtocol {
                    crop_size: 448,
                    n_images: 128,
                    ..EvalProtocol::default()
                },
                ..Experiment::default()
            },
        }
    }
}

/// Config file and preset shared by most commands.
#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct ConfigArgs {
    /// JSON file with any of the sections `network`, `train`, `sim`,
    /// `protocol` and the keys `variants`, `val_images`, `val_seed`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub preset: Preset,
    /// Overrides `train.seed` and `protocol.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    /// Preset, then config file, then `--seed`.
    pub fn load(&self) -> CliResult<Experiment> {
        let mut value = serde_json::to_value(self.preset.experiment())?;
        if let Some(path) = &self.config {
            let file = read_json(path)?;
            if !file.is_object() {
                return Err(usage(format!("{}: config must be a JSON object", path.display())));
            }
            merge(&mut value, file);
        }
        let mut exp: Experiment = serde_json::from_value(value).map_err(|e| {
            let src = self.config.as_deref().map(|p| p.display().to_string()).unwrap_or_default();
            usage(format!("invalid config {src}: {e}"))
        })?;
        if let Some(seed) = self.seed {
            exp.train.seed = seed;
            exp.protocol.seed = seed;
        }
        Ok(exp)
    }
}

fn read_json(path: &Path) -> CliResult<Value> {
    require_file(path)?;
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Recursive object merge; everything else in `patch` replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("no such file: {}", path.display())))
    }
}

fn require_dir(path: &Path) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("no such directory: {}", path.display())))
    }
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples.
    #[arg(short = 'n', long = "count", default_value_t = 1)]
    pub n: u64,
    #[arg(long)]
    pub reference: Option<Reference>,
    /// Dataset root with `<split>/<scene>/{ambient,flash_only}.png`; scenes
    /// are used in turn instead of procedural ones.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    pub split: String,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct ValidateArgs {
    /// Sample files or directories of `.npzlike` samples.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory of `.npzlike` samples; procedural data when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub reference: Option<Reference>,
    #[arg(long)]
    pub no_basis_b: bool,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Train on sample 0 of the procedural stream only, without validation.
    #[arg(long, conflicts_with = "data")]
    pub overfit: bool,
}

/// A flash/no-flash pair given as PNG files.
#[derive(Args, Clone, Debug, Serialize)]
pub struct PairArgs {
    #[arg(long)]
    pub flash: PathBuf,
    #[arg(long)]
    pub noflash: PathBuf,
    /// Read-noise level; taken from the no-flash sidecar when absent.
    #[arg(long)]
    pub sigma_r: Option<f64>,
    /// Shot-noise level; taken from the no-flash sidecar when absent.
    #[arg(long)]
    pub sigma_s: Option<f64>,
    /// Display gain; taken from the no-flash sidecar when absent.
    #[arg(long)]
    pub gain: Option<f64>,
}

impl PairArgs {
    pub fn load(&self, reference: Reference) -> CliResult<SamplePair> {
        require_file(&self.flash)?;
        require_file(&self.noflash)?;
        let (x_f, _) = load_image(&self.flash)?;
        let (x_nf, meta) = load_image(&self.noflash)?;
        if x_f.dims() != x_nf.dims() {
            return Err(usage(format!(
                "flash image is {:?} but no-flash image is {:?}",
                x_f.dims(),
                x_nf.dims()
            )));
        }
        x_nf.ensure_network_dims()?;
        let sigma_r = self.sigma_r.or(meta.sigma_r).ok_or_else(|| usage("--sigma-r is required"))?;
        let sigma_s = self.sigma_s.or(meta.sigma_s).ok_or_else(|| usage("--sigma-s is required"))?;
        let noise = NoiseParams::new(sigma_r, sigma_s)?;
        let mut render = meta.render_params();
        if let Some(g) = self.gain {
            render.gain = g;
        }
        if !(render.gain > 0.0) {
            return Err(usage(format!("gain must be positive, got {}", render.gain)));
        }
        Ok(SamplePair {
            noise_map_f: noise_stddev_map(&x_f, &noise),
            noise_map_nf: noise_stddev_map(&x_nf, &noise),
            y: x_nf.clone(),
            x_f,
            x_nf,
            dim_factor: render.gain,
            render,
            noise,
            homography: Homography::identity(),
            reference,
        })
    }

    fn paths(&self) -> Vec<PathBuf> {
        vec![self.flash.clone(), self.noflash.clone()]
    }
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct DenoiseArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub pair: PairArgs,
    /// Rendered sRGB output (16-bit PNG).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `<out>.intermediates.npzlike` with the filtered image `F`,
    /// the scale map `G` and the linear output, plus PNG previews.
    #[arg(long)]
    pub dump_intermediates: bool,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Checkpoint directories, one per compared model.
    #[arg(long, required = true, num_args = 1..)]
    pub weights: Vec<PathBuf>,
    /// JSON evaluation protocol; replaces the `protocol` config section.
    #[arg(long)]
    pub protocol: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_images: Option<usize>,
    /// Triptych images written per model.
    #[arg(long, default_value_t = 2)]
    pub triptychs: usize,
    /// Skip the misalignment curve.
    #[arg(long)]
    pub no_curve: bool,
}

#[derive(Args, Clone, Debug, Serialize)]
#[group(id = "ablation", required = true, multiple = false, args = ["no_basis_b", "reference"])]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Coarse kernel terms on against off.
    #[arg(long)]
    pub no_basis_b: bool,
    /// No-flash against flash reference; the named one is the second column.
    #[arg(long)]
    pub reference: Option<Reference>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub n_images: Option<usize>,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct ExportKernelsArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// A saved sample to run on.
    #[arg(long, conflicts_with_all = ["flash", "noflash"])]
    pub sample: Option<PathBuf>,
    #[arg(long, requires = "noflash")]
    pub flash: Option<PathBuf>,
    #[arg(long, requires = "flash")]
    pub noflash: Option<PathBuf>,
    #[arg(long)]
    pub sigma_r: Option<f64>,
    #[arg(long)]
    pub sigma_s: Option<f64>,
    /// Pixel as `row,col`; repeatable. Defaults to the image centre.
    #[arg(long = "pixel", value_parser = parse_pixel)]
    pub pixels: Vec<(usize, usize)>,
    #[arg(long, default_value_t = 8)]
    pub zoom: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_pixel(s: &str) -> Result<(usize, usize), String> {
    let (y, x) = s.split_once(',').ok_or_else(|| format!("expected `row,col`, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(y)?, p(x)?))
}

/// Runs a parsed command; `argv` is recorded in the manifest.
pub fn run(cli: &Cli, argv: &[String]) -> CliResult<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(a, argv),
        Command::Validate(a) => validate(a),
        Command::Train(a) => train(a, argv),
        Command::Denoise(a) => denoise(a, argv),
        Command::Benchmark(a) => benchmark(a, argv),
        Command::Ablate(a) => ablate(a, argv),
        Command::ExportKernels(a) => export_kernels(a, argv),
    }
}

fn options<T: Serialize>(exp: Option<&Experiment>, args: &T) -> CliResult<Value> {
    let mut v = serde_json::json!({ "options": serde_json::to_value(args)? });
    if let Some(exp) = exp {
        v["effective"] = serde_json::to_value(exp)?;
    }
    Ok(v)
}

pub fn simulate(a: &SimulateArgs, argv: &[String]) -> CliResult<()> {
    let mut m = RunManifest::start("simulate", argv);
    let mut exp = a.cfg.load()?;
    if let Some(r) = a.reference {
        exp.sim.reference = r;
    }
    exp.sim.validate()?;
    let seed = exp.train.seed;
    let scenes = match &a.dataset {
        Some(root) => {
            require_dir(root)?;
            let s = list_dataset(root, &a.split)?;
            if s.is_empty() {
                return Err(usage(format!("no scenes under {}", root.join(&a.split).display())));
            }
            m.add_input(root)?;
            s
        }
        None => Vec::new(),
    };
    fs::create_dir_all(&a.out)?;
    for i in 0..a.n {
        let sample = if scenes.is_empty() {
            exp.sim.generate(seed, i)?
        } else {
            let (ambient, flash) = load_scene(&scenes[i as usize % scenes.len()])?;
            exp.sim.generate_from_pair(&ambient, &flash, seed, i)?
        };
        sample.save(a.out.join(sample_file_name(seed, i)))?;
    }
    log::info!("wrote {} samples to {}", a.n, a.out.display());
    m.finish(seed, options(Some(&exp), a)?, a.out.join(MANIFEST_FILE))
}

pub fn sample_file_name(seed: u64, index: u64) -> String {
    format!("sample_{seed}_{index:06}.npzlike")
}

/// `.npzlike` files directly under `dir`, sorted.
fn sample_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "npzlike"));
    files.sort();
    Ok(files)
}

pub fn validate(a: &ValidateArgs) -> CliResult<()> {
    let mut files = Vec::new();
    for p in &a.paths {
        if p.is_dir() {
            files.extend(sample_files(p)?);
        } else {
            require_file(p)?;
            files.push(p.clone());
        }
    }
    let mut bad = 0;
    for f in &files {
        match SamplePair::load(f).and_then(|s| s.validate()) {
            Ok(()) => println!("ok   {}", f.display()),
            Err(e) => {
                bad += 1;
                println!("FAIL {}: {e}", f.display());
            }
        }
    }
    println!("{} of {} samples valid", files.len() - bad, files.len());
    if bad > 0 {
        return Err(CliError::Runtime(format!("{bad} invalid samples")));
    }
    Ok(())
}

pub fn train(a: &TrainArgs, argv: &[String]) -> CliResult<()> {
    let mut m = RunManifest::start("train", argv);
    let mut exp = a.cfg.load()?;
    if let Some(v) = a.variant {
        exp.network.variant = v;
    }
    if let Some(r) = a.reference {
        exp.network.reference = r;
    }
    if a.no_basis_b {
        exp.network.use_b = false;
    }
    if let Some(n) = a.max_steps {
        exp.train.max_steps = n;
    }
    exp.sim.reference = exp.network.reference;
    exp.network.validate()?;
    exp.train.validate()?;
    exp.sim.validate()?;
    let seed = exp.train.seed;
    let (data, val) = if let Some(dir) = &a.data {
        require_dir(dir)?;
        m.add_input(dir)?;
        let samples = sample_files(dir)?
            .iter()
            .map(SamplePair::load)
            .collect::<fnf_core::Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(usage(format!("no samples in {}", dir.display())));
        }
        if let Some(s) = samples.iter().find(|s| s.reference != exp.network.reference) {
            return Err(usage(format!(
                "data uses the {} reference but the network expects {}",
                s.reference.as_str(),
                exp.network.reference.as_str()
            )));
        }
        (TrainData::Fixed(samples), exp.validation_set()?)
    } else if a.overfit {
        (TrainData::Fixed(vec![exp.sim.generate(seed, 0)?]), Vec::new())
    } else {
        let data = TrainData::Procedural {
            sim: exp.sim.clone(),
            seed,
        };
        (data, exp.validation_set()?)
    };
    let weights = match &a.resume {
        Some(dir) => {
            require_dir(dir)?;
            m.add_input(dir)?;
            let mut ckpt = Checkpoint::load(dir)?;
            if ckpt.weights.config != exp.network {
                return Err(usage(format!("{} holds a different network configuration", dir.display())));
            }
            ckpt.train = exp.train.clone();
            let mut t = Trainer::resume(ckpt)?.with_output(&a.out)?;
            t.run(&data, &val)?;
            t.weights().clone()
        }
        None => {
            let init = ModelWeights::init(&exp.network, seed)?;
            train_cached(&a.out, init, &exp.train, &data, &val)?
        }
    };
    log::info!(
        "{} with {} parameters trained into {}",
        weights.config.variant.as_str(),
        weights.num_parameters(),
        a.out.display()
    );
    m.finish(seed, options(Some(&exp), a)?, a.out.join(MANIFEST_FILE))
}

fn load_model(dir: &Path) -> CliResult<ModelWeights> {
    require_dir(dir)?;
    require_file(&dir.join(fnf_core::training::CONFIG_FILE))?;
    Ok(load_weights(dir)?)
}

/// Path next to `out` with `suffix` replacing its extension.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

pub fn denoise(a: &DenoiseArgs, argv: &[String]) -> CliResult<()> {
    let mut m = RunManifest::start("denoise", argv);
    let weights = load_model(&a.weights)?;
    let sample = a.pair.load(weights.config.reference)?;
    m.add_input(&a.weights)?;
    for p in a.pair.paths() {
        m.add_input(&p)?;
    }
    let inf = infer(&weights, &sample)?;
    if !inf.output.is_finite() {
        return Err(CliError::Runtime("network output is not finite".into()));
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let meta = ImageMeta::from_render(&sample.render);
    save_image(&a.out, &render_srgb(&inf.output, &sample.render), BitDepth::Sixteen, Some(&meta))?;
    if a.dump_intermediates {
        let Some(filtered) = &inf.filtered else {
            return Err(usage(format!(
                "variant {} has no filtered image to dump",
                weights.config.variant.as_str()
            )));
        };
        let (h, w) = filtered.dims();
        let ones = LinearImage::filled(h, w, [1.0; 3]);
        let scale = inf.scale_map.as_ref().unwrap_or(&ones);
        let mut arc = fnf_core::container::Archive::new();
        for (name, img) in [("filtered", filtered), ("scale_map", scale), ("output", &inf.output)] {
            arc.insert(name, fnf_core::container::Array::f32(vec![3, h, w], img.data().to_vec()))?;
        }
        arc.save(sibling(&a.out, ".intermediates.npzlike"))?;
        save_image(
            sibling(&a.out, "_filtered.png"),
            &render_srgb(filtered, &sample.render),
            BitDepth::Eight,
            None,
        )?;
        let peak = scale.max_value().max(f32::MIN_POSITIVE);
        save_image(sibling(&a.out, "_scale_map.png"), &scale.map(|v| v / peak), BitDepth::Eight, None)?;
    }
    m.finish(0, options(None, a)?, sibling(&a.out, ".manifest.json"))
}

/// Model labels: the variant name, numbered when repeated.
fn model_labels(models: &[ModelWeights]) -> Vec<String> {
    let mut labels = Vec::new();
    for (i, w) in models.iter().enumerate() {
        let base = w.config.variant.as_str();
        let n = models[..i].iter().filter(|o| o.config.variant == w.config.variant).count();
        labels.push(if n == 0 { base.to_string() } else { format!("{base}_{}", n + 1) });
    }
    labels
}

pub fn benchmark(a: &BenchmarkArgs, argv: &[String]) -> CliResult<()> {
    let mut m = RunManifest::start("benchmark", argv);
    let mut exp = a.cfg.load()?;
    let mut models = Vec::new();
    for dir in &a.weights {
        models.push(load_model(dir)?);
        m.add_input(dir)?;
    }
    if let Some(p) = &a.protocol {
        let v = read_json(p)?;
        exp.protocol = serde_json::from_value(v).map_err(|e| usage(format!("invalid protocol {}: {e}", p.display())))?;
        m.add_input(p)?;
        if let Some(seed) = a.cfg.seed {
            exp.protocol.seed = seed;
        }
    }
    if let Some(n) = a.n_images {
        exp.protocol.n_images = n;
    }
    let reference = models[0].config.reference;
    if models.iter().any(|w| w.config.reference != reference) {
        return Err(usage("models use different reference frames"));
    }
    exp.protocol.reference = reference;
    exp.protocol.validate()?;
    let labels = model_labels(&models);
    let named: Vec<Named<ModelWeights>> = labels.iter().zip(&models).map(|(l, w)| Named(l.clone(), w)).collect();
    let dyns: Vec<&dyn Denoiser> = named.iter().map(|n| n as &dyn Denoiser).collect();
    let cmp = compare_methods(&dyns, &exp.protocol)?;
    let curves = if a.no_curve {
        Vec::new()
    } else {
        dyns.iter()
            .map(|d| Ok((d.name(), eval_misalignment(*d, &exp.protocol)?)))
            .collect::<CliResult<Vec<_>>>()?
    };
    write_results(&a.out, &cmp, &curves, &dyns, &exp.protocol, a.triptychs)?;
    print!("{}", cmp.to_markdown());
    m.finish(exp.protocol.seed, options(Some(&exp), a)?, a.out.join(MANIFEST_FILE))
}

pub fn ablate(a: &AblateArgs, argv: &[String]) -> CliResult<()> {
    let m = RunManifest::start("ablate", argv);
    let mut exp = a.cfg.load()?;
    if let Some(n) = a.max_steps {
        exp.train.max_steps = n;
    }
    if let Some(n) = a.n_images {
        exp.protocol.n_images = n;
    }
    exp.validate()?;
    let ablation = if a.no_basis_b { Ablation::BasisB } else { Ablation::Reference };
    let report = run_ablation(ablation, &exp.network, &exp.train, &exp.sim, &exp.protocol)?;
    let stem = match ablation {
        Ablation::BasisB => "ablation_basis_b",
        Ablation::Reference => "ablation_reference",
    };
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(format!("{stem}.md")), report.to_markdown())?;
    fs::write(a.out.join(format!("{stem}.csv")), report.to_csv())?;
    fs::write(a.out.join(format!("{stem}.json")), serde_json::to_string_pretty(&report)?)?;
    print!("{}", report.to_markdown());
    m.finish(exp.train.seed, options(Some(&exp), a)?, a.out.join(MANIFEST_FILE))
}

pub fn export_kernels(a: &ExportKernelsArgs, argv: &[String]) -> CliResult<()> {
    let mut m = RunManifest::start("export-kernels", argv);
    let weights = load_model(&a.weights)?;
    m.add_input(&a.weights)?;
    let sample = match (&a.sample, &a.flash, &a.noflash) {
        (Some(p), _, _) => {
            require_file(p)?;
            m.add_input(p)?;
            SamplePair::load(p)?
        }
        (None, Some(f), Some(nf)) => {
            let pair = PairArgs {
                flash: f.clone(),
                noflash: nf.clone(),
                sigma_r: a.sigma_r,
                sigma_s: a.sigma_s,
                gain: None,
            };
            let s = pair.load(weights.config.reference)?;
            for p in pair.paths() {
                m.add_input(&p)?;
            }
            s
        }
        _ => return Err(usage("give --sample or both --flash and --noflash")),
    };
    if a.zoom == 0 {
        return Err(usage("--zoom must be at least 1"));
    }
    let (basis, fields) = forward(&weights, &sample)?;
    let (h, w) = sample.dims();
    let pixels = if a.pixels.is_empty() { vec![(h / 2, w / 2)] } else { a.pixels.clone() };
    if let Some(&(y, x)) = pixels.iter().find(|&&(y, x)| y >= h || x >= w) {
        return Err(usage(format!("pixel ({y}, {x}) lies outside the {h}x{w} image")));
    }
    fs::create_dir_all(&a.out)?;
    write_kernel_dump(a.out.join("kernels.fnfk"), &basis, &fields)?;
    let e = basis.footprint();
    for (y, x) in pixels {
        let k = pixel_kernel(&basis, &fields.coeffs, y, x);
        let img = kernel_visualization(&k, e, a.zoom);
        save_image(a.out.join(format!("kernel_{y}_{x}.png")), &img, BitDepth::Eight, None)?;
    }
    m.finish(0, options(None, a)?, a.out.join(MANIFEST_FILE))
}
