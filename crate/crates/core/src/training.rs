//! Rendered-space loss, Adam with plateau-driven learning-rate drops, the
//! training loop and checkpoints.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Archive, Array};
use crate::error::{Error, Result};
use crate::image::LinearImage;
use crate::metrics::psnr;
use crate::network::{build_forward, build_input, predict, ModelWeights, NetworkConfig, ParamVars};
use crate::nn::{ops, Graph, Var};
use crate::render::{render_srgb, RenderParams};
use crate::simulation::{SamplePair, SimConfig};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_drop_factor: f64,
    pub max_drops: usize,
    /// Weight of the gradient term of the loss.
    pub eta: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Steps between validations; 0 disables validation.
    pub val_interval: usize,
    /// Validations without improvement of the best validation loss before
    /// the learning rate drops.
    pub patience: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-4,
            lr_drop_factor: 0.1,
            max_drops: 2,
            eta: 1.0,
            batch_size: 1,
            max_steps: 2000,
            val_interval: 250,
            patience: 4,
            checkpoint_interval: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) {
            return Err(Error::Config(format!("lr_init must be positive, got {}", self.lr_init)));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::Config(format!("eta must be nonnegative, got {}", self.eta)));
        }
        if !(self.lr_drop_factor > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("lr_drop_factor must be positive and batch_size at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate after `drops` drops.
    pub fn lr_after(&self, drops: usize) -> f64 {
        self.lr_init * self.lr_drop_factor.powi(drops.min(self.max_drops) as i32)
    }
}

/// `mean((r(p) - r(t))^2) + eta (mean|dx| + mean|dy|)` of the difference of
/// the rendered images, with forward differences.
pub fn compute_loss(pred: &LinearImage, target: &LinearImage, rp: &RenderParams, eta: f64) -> Result<f64> {
    pred.ensure_same_dims(target)?;
    let p = render_srgb(pred, rp).to_tensor::<f64>();
    let t = render_srgb(target, rp).to_tensor::<f64>();
    Ok(ops::rendered_loss(&p, &t, eta))
}

/// Plateau rule: after `patience` validations without a new best, the
/// learning rate drops, at most `max_drops` times.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub best: Option<f64>,
    pub since_best: usize,
    pub drops: usize,
}

impl Plateau {
    /// Records one validation loss; returns true when the learning rate
    /// should drop now.
    pub fn observe(&mut self, val_loss: f64, patience: usize, max_drops: usize) -> bool {
        match self.best {
            Some(b) if !(val_loss < b) => self.since_best += 1,
            _ => {
                self.best = Some(val_loss);
                self.since_best = 0;
            }
        }
        if self.since_best >= patience.max(1) && self.drops < max_drops {
            self.drops += 1;
            self.since_best = 0;
            return true;
        }
        false
    }
}

/// Where training samples come from. Step `s` always uses sample indices
/// `s * batch .. (s + 1) * batch`.
#[derive(Clone, Debug)]
pub enum TrainData {
    Procedural { sim: SimConfig, seed: u64 },
    Fixed(Vec<SamplePair>),
}

impl TrainData {
    pub fn sample(&self, index: u64) -> Result<SamplePair> {
        match self {
            TrainData::Procedural { sim, seed } => sim.generate(*seed, index),
            TrainData::Fixed(v) if v.is_empty() => Err(Error::Config("empty training set".into())),
            TrainData::Fixed(v) => Ok(v[(index % v.len() as u64) as usize].clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: usize,
    pub lr: f64,
    pub plateau: Plateau,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    fn new(weights: &ModelWeights) -> Self {
        let zeros = || weights.tensors().iter().map(|t| vec![0.0f32; t.len()]).collect();
        Self { m: zeros(), v: zeros() }
    }

    /// One update; `t` counts from 1.
    fn update(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>], lr: f64, t: usize) {
        let c1 = 1.0 - BETA1.powi(t as i32);
        let c2 = 1.0 - BETA2.powi(t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (ADAM_EPS * c2.sqrt()) as f32;
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Builds the training loss of `batch` on `g`.
fn loss_graph<T: Float>(
    g: &mut Graph<T>,
    params: &ParamVars,
    cfg: &NetworkConfig,
    batch: &[SamplePair],
    eta: f64,
) -> Result<Var> {
    let (input, x_nf, x_f, target, rps) = stack_batch::<T>(batch, cfg)?;
    let input = g.input(input);
    let out = build_forward(g, params, cfg, input, &x_nf, &x_f)?;
    let rendered = g.render(out.output, rps.clone());
    let target = ops::render_forward(&target, &rps);
    Ok(g.rendered_loss(rendered, target, eta))
}

/// Training loss and parameter gradients for one batch.
pub fn loss_and_grads(weights: &ModelWeights, batch: &[SamplePair], eta: f64) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::<f32>::new();
    let params = ParamVars::new(&mut g, weights, true);
    let loss = loss_graph(&mut g, &params, &weights.config, batch, eta)?;
    let value = g.value(loss).data()[0] as f64;
    let mut grads = g.backward(loss);
    let grads = params
        .vars()
        .iter()
        .zip(weights.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, grads))
}

/// One checked parameter of [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Rounding resolution of the central difference, `64 eps_mach |L| / h`.
    pub resolution: f64,
}

impl GradEntry {
    /// `|a - n| / max(|a|, |n|, 1000 resolution)`: relative, except for
    /// gradients too small for the difference quotient to resolve.
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e3 * self.resolution);
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// Compares analytic gradients of the training loss (double precision)
/// with central differences at `count` parameters drawn uniformly from
/// all weights and biases.
pub fn gradient_check(weights: &ModelWeights, sample: &SamplePair, eta: f64, count: usize, seed: u64) -> Result<Vec<GradEntry>> {
    let cfg = &weights.config;
    let tensors: Vec<Tensor<f64>> = weights.tensors().iter().map(|t| t.cast()).collect();
    let batch = std::slice::from_ref(sample);
    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let params = ParamVars::from_tensors(&mut g, weights, ts);
        let loss = loss_graph(&mut g, &params, cfg, batch, eta)?;
        Ok(g.value(loss).data()[0])
    };
    let mut g = Graph::<f64>::new();
    let params = ParamVars::from_tensors(&mut g, weights, &tensors);
    let loss = loss_graph(&mut g, &params, cfg, batch, eta)?;
    let base = g.value(loss).data()[0];
    let grads = g.backward(loss);

    let total: usize = tensors.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut work = tensors.clone();
    for _ in 0..count {
        let mut flat = rng.random_range(0..total);
        let mut ti = 0;
        while flat >= work[ti].len() {
            flat -= work[ti].len();
            ti += 1;
        }
        let analytic = grads.get(params.vars()[ti]).map_or(0.0, |t| t.data()[flat]);
        let w0 = work[ti].data()[flat];
        let eps = 1e-6 * w0.abs().max(1.0);
        work[ti].data_mut()[flat] = w0 + eps;
        let up = eval(&work)?;
        work[ti].data_mut()[flat] = w0 - eps;
        let down = eval(&work)?;
        work[ti].data_mut()[flat] = w0;
        out.push(GradEntry {
            name: weights.names()[ti].clone(),
            index: flat,
            analytic,
            numeric: (up - down) / (2.0 * eps),
            resolution: 64.0 * f64::EPSILON * base.abs() / eps,
        });
    }
    Ok(out)
}

type Batch<T> = (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>, Vec<RenderParams>);

fn stack_batch<T: Float>(batch: &[SamplePair], cfg: &NetworkConfig) -> Result<Batch<T>> {
    let first = batch.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    for s in batch {
        first.y.ensure_same_dims(&s.y)?;
    }
    let inputs: Vec<_> = batch.iter().map(|s| build_input::<T>(s, cfg.variant)).collect();
    let x_nf: Vec<_> = batch.iter().map(|s| s.x_nf.to_tensor()).collect();
    let x_f: Vec<_> = batch.iter().map(|s| s.x_f.to_tensor()).collect();
    let y: Vec<_> = batch.iter().map(|s| s.y.to_tensor()).collect();
    let rps = batch.iter().map(|s| s.render.clone()).collect();
    Ok((Tensor::stack(&inputs), Tensor::stack(&x_nf), Tensor::stack(&x_f), Tensor::stack(&y), rps))
}

/// Mean loss and mean rendered PSNR over a validation set.
pub fn evaluate_loss(weights: &ModelWeights, samples: &[SamplePair], eta: f64) -> Result<(f64, f64)> {
    let (mut loss, mut db) = (0.0, 0.0);
    for s in samples {
        let pred = predict(weights, s)?;
        loss += compute_loss(&pred, &s.y, &s.render, eta)?;
        db += psnr(&render_srgb(&pred, &s.render), &render_srgb(&s.y, &s.render))?;
    }
    let n = samples.len().max(1) as f64;
    Ok((loss / n, db / n))
}

/// Weights plus everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub weights: ModelWeights,
    pub train: TrainConfig,
    pub state: TrainState,
    adam: Option<Adam>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    network: NetworkConfig,
    train: TrainConfig,
    state: TrainState,
}

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "train_log.jsonl";
/// Parameter blob in the named-array container; parameters are stored as
/// `param/<layer>.<weight|bias>`, optimizer moments as `adam_m/...` and
/// `adam_v/...`.
pub const PARAMS_FILE: &str = "params.npzlike";

impl Checkpoint {
    pub fn initial(weights: ModelWeights, train: TrainConfig) -> Self {
        let state = TrainState {
            step: 0,
            lr: train.lr_init,
            plateau: Plateau::default(),
        };
        Self {
            weights,
            train,
            state,
            adam: None,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let meta = CheckpointMeta {
            network: self.weights.config.clone(),
            train: self.train.clone(),
            state: self.state.clone(),
        };
        fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&meta)?)?;
        let mut a = Archive::new();
        for (i, (name, t)) in self.weights.names().iter().zip(self.weights.tensors()).enumerate() {
            a.insert(format!("param/{name}"), Array::f32(t.shape().to_vec(), t.data().to_vec()))?;
            if let Some(adam) = &self.adam {
                a.insert(format!("adam_m/{name}"), Array::f32(vec![t.len()], adam.m[i].clone()))?;
                a.insert(format!("adam_v/{name}"), Array::f32(vec![t.len()], adam.v[i].clone()))?;
            }
        }
        a.save(dir.join(PARAMS_FILE))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let a = Archive::load(dir.join(PARAMS_FILE))?;
        let mut named = Vec::new();
        for name in a.names().filter_map(|n| n.strip_prefix("param/")) {
            let (shape, data) = a.f32(&format!("param/{name}"))?;
            named.push((name.to_string(), shape.to_vec(), data.to_vec()));
        }
        let weights = ModelWeights::from_named(&meta.network, named)?;
        let adam = if a.names().any(|n| n.starts_with("adam_m/")) {
            let mut adam = Adam::new(&weights);
            for (i, name) in weights.names().iter().enumerate() {
                adam.m[i] = a.f32(&format!("adam_m/{name}"))?.1.to_vec();
                adam.v[i] = a.f32(&format!("adam_v/{name}"))?.1.to_vec();
                if adam.m[i].len() != weights.tensors()[i].len() || adam.v[i].len() != adam.m[i].len() {
                    return Err(Error::Format(format!("optimizer state of `{name}` has the wrong length")));
                }
            }
            Some(adam)
        } else {
            None
        };
        Ok(Self {
            weights,
            train: meta.train,
            state: meta.state,
            adam,
        })
    }
}

/// Loads weights from a checkpoint directory.
pub fn load_weights(dir: impl AsRef<Path>) -> Result<ModelWeights> {
    Ok(Checkpoint::load(dir)?.weights)
}

pub struct Trainer {
    ckpt: Checkpoint,
    adam: Adam,
    out_dir: Option<PathBuf>,
    log: Option<BufWriter<fs::File>>,
}

impl Trainer {
    pub fn new(weights: ModelWeights, train: TrainConfig) -> Result<Self> {
        Self::resume(Checkpoint::initial(weights, train))
    }

    /// Continues from a checkpoint; optimizer moments are restored when the
    /// checkpoint carries them.
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train.validate()?;
        ckpt.weights.config.validate()?;
        let adam = ckpt.adam.clone().unwrap_or_else(|| Adam::new(&ckpt.weights));
        Ok(Self {
            ckpt,
            adam,
            out_dir: None,
            log: None,
        })
    }

    /// Writes checkpoints under `dir` and appends the JSON-lines log to
    /// `dir/train_log.jsonl`. Records past the current step, left by an interrupted run, are
    /// dropped from an existing log.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let path = dir.join(LOG_FILE);
        if path.is_file() {
            let mut kept = String::new();
            for line in fs::read_to_string(&path)?.lines() {
                let rec: HistoryRecord = serde_json::from_str(line)?;
                if rec.step <= self.ckpt.state.step {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
            fs::write(&path, kept)?;
        }
        let log = fs::OpenOptions::new().create(true).append(true).open(path)?;
        self.log = Some(BufWriter::new(log));
        self.out_dir = Some(dir);
        Ok(self)
    }

    pub fn state(&self) -> &TrainState {
        &self.ckpt.state
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.ckpt.weights
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            adam: Some(self.adam.clone()),
            ..self.ckpt.clone()
        }
    }

    fn batch(&self, data: &TrainData) -> Result<Vec<SamplePair>> {
        let b = self.ckpt.train.batch_size as u64;
        let first = self.ckpt.state.step as u64 * b;
        (first..first + b).map(|i| data.sample(i)).collect()
    }

    /// One optimizer step; returns the training loss before the update.
    pub fn step(&mut self, data: &TrainData) -> Result<f64> {
        let batch = self.batch(data)?;
        let (loss, grads) = loss_and_grads(&self.ckpt.weights, &batch, self.ckpt.train.eta)?;
        let step = self.ckpt.state.step;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            if let Some(dir) = &self.out_dir {
                self.checkpoint().save(dir.join("diagnostic"))?;
            }
            return Err(Error::NonFiniteLoss { step });
        }
        let lr = self.ckpt.state.lr;
        self.adam.update(self.ckpt.weights.tensors_mut(), &grads, lr, step + 1);
        self.ckpt.state.step += 1;
        Ok(loss)
    }

    /// Runs until `max_steps`, validating, dropping the learning rate and
    /// checkpointing on schedule. Returns the records produced by this call.
    pub fn run(&mut self, data: &TrainData, val: &[SamplePair]) -> Result<Vec<HistoryRecord>> {
        let mut history = Vec::new();
        let tc = self.ckpt.train.clone();
        while self.ckpt.state.step < tc.max_steps {
            let lr = self.ckpt.state.lr;
            let train_loss = self.step(data)?;
            let step = self.ckpt.state.step;
            let mut rec = HistoryRecord {
                step,
                lr,
                train_loss,
                val_loss: None,
                val_psnr: None,
            };
            if tc.val_interval > 0 && !val.is_empty() && step % tc.val_interval == 0 {
                let (vl, vp) = evaluate_loss(&self.ckpt.weights, val, tc.eta)?;
                rec.val_loss = Some(vl);
                rec.val_psnr = Some(vp);
                let st = &mut self.ckpt.state;
                if st.plateau.observe(vl, tc.patience, tc.max_drops) {
                    st.lr = tc.lr_after(st.plateau.drops);
                    log::info!("step {step}: learning rate dropped to {}", st.lr);
                }
            }
            if let Some(log) = &mut self.log {
                serde_json::to_writer(&mut *log, &rec)?;
                log.write_all(b"\n")?;
            }
            history.push(rec);
            if let Some(dir) = &self.out_dir {
                if tc.checkpoint_interval > 0 && step % tc.checkpoint_interval == 0 {
                    if let Some(log) = &mut self.log {
                        log.flush()?;
                    }
                    self.checkpoint().save(dir.join(format!("step_{step:07}")))?;
                }
            }
        }
        if let Some(log) = &mut self.log {
            log.flush()?;
        }
        if let Some(dir) = &self.out_dir {
            self.checkpoint().save(dir.join("final"))?;
        }
        Ok(history)
    }
}

/// Newest `step_*` or `final` checkpoint under `dir`.
pub fn latest_checkpoint(dir: impl AsRef<Path>) -> Result<Option<Checkpoint>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<Checkpoint> = None;
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if !(name == "final" || name.starts_with("step_")) || !p.join(CONFIG_FILE).is_file() {
            continue;
        }
        let c = Checkpoint::load(&p)?;
        if best.as_ref().is_none_or(|b| c.state.step > b.state.step) {
            best = Some(c);
        }
    }
    Ok(best)
}

/// Trains into `dir` starting from `init`, resuming from the newest
/// checkpoint of the same configuration when there is one. A finished run
/// is returned without further steps.
pub fn train_cached(
    dir: impl AsRef<Path>,
    init: ModelWeights,
    tc: &TrainConfig,
    data: &TrainData,
    val: &[SamplePair],
) -> Result<ModelWeights> {
    let dir = dir.as_ref();
    let resume = latest_checkpoint(dir)?.filter(|c| c.train == *tc && c.weights.config == init.config);
    let trainer = match resume {
        Some(c) if c.state.step >= tc.max_steps => return Ok(c.weights),
        Some(c) => Trainer::resume(c)?,
        None => Trainer::new(init, tc.clone())?,
    };
    let mut trainer = trainer.with_output(dir)?;
    trainer.run(data, val)?;
    Ok(trainer.ckpt.weights)
}

/// Trains from `weights` without writing anything to disk.
pub fn train(
    weights: ModelWeights,
    data: &TrainData,
    val: &[SamplePair],
    tc: &TrainConfig,
) -> Result<(ModelWeights, Vec<HistoryRecord>)> {
    let mut t = Trainer::new(weights, tc.clone())?;
    let history = t.run(data, val)?;
    Ok((t.ckpt.weights, history))
}
