//! A small fully connected denoiser trained on the denoising objective.
//!
//! Input features are the noisy latent scaled by `1/sqrt(σ_data² + t²)`, the
//! flattened conditioning channels, and a single noise feature `ln(t)/4`. The
//! network predicts `D(x; t, c)` directly.
//!
//! Checkpoints use a little-endian binary layout:
//!
//! ```text
//! magic        7 bytes  "DVSMDL1"
//! height       u32
//! width        u32
//! channels     u32
//! sigma_data   f32
//! layer_count  u32
//! per layer:   u32 in_dim, u32 out_dim
//! per layer:   f32 weights (out_dim x in_dim, row-major), then f32 biases (out_dim)
//! ```
//!
//! Parameters are held in `f64` in memory and rounded to `f32` on save.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_noise_level, ConditioningRef, Denoiser};
use crate::datasets::{split_of, Dataset, Split};
use crate::maskgrid::{encode, LatentGrid};
use crate::rng::{derive_seed, Stream};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"DVSMDL1";

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| dist.sample(rng)).collect(),
            bias: (0..outputs).map(|_| dist.sample(rng)).collect(),
        }
    }

    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.inputs).zip(&self.bias) {
            out.push(b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>());
        }
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Fully connected denoiser with SiLU hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    height: usize,
    width: usize,
    channels: usize,
    sigma_data: f64,
    layers: Vec<Dense>,
}

struct Trace {
    /// Input of each layer (layer 0 gets the features).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
}

impl MlpDenoiser {
    pub fn new(height: usize, width: usize, channels: usize, hidden: &[usize], sigma_data: f64, seed: u64) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("MLP grid dimensions must be positive"));
        }
        if !(sigma_data > 0.0) {
            return Err(Error::invalid("sigma_data must be positive"));
        }
        if hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        let pixels = height * width;
        let mut dims = vec![pixels * (1 + channels) + 1];
        dims.extend_from_slice(hidden);
        dims.push(pixels);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[Stream::Training as u64, 0]));
        let layers = dims.windows(2).map(|d| Dense::init(d[0], d[1], &mut rng)).collect();
        Ok(Self { height, width, channels, sigma_data, layers })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    fn input_scale(&self, t: f64) -> f64 {
        1.0 / (self.sigma_data * self.sigma_data + t * t).sqrt()
    }

    fn features(&self, x: &LatentGrid, t: f64, c: ConditioningRef<'_>) -> Result<Vec<f64>> {
        check_noise_level(t)?;
        if x.shape() != (self.height, self.width) {
            return Err(Error::ShapeMismatch { left: (self.height, self.width), right: x.shape() });
        }
        let pixels = self.height * self.width;
        if c.channels.len() != self.channels * pixels {
            return Err(Error::invalid(format!(
                "conditioning has {} values, model expects {}",
                c.channels.len(),
                self.channels * pixels
            )));
        }
        let scale = self.input_scale(t);
        let mut f = Vec::with_capacity(pixels * (1 + self.channels) + 1);
        f.extend(x.values().iter().map(|v| v * scale));
        f.extend(c.channels.iter().map(|&v| v as f64));
        f.push(t.ln() / 4.0);
        Ok(f)
    }

    fn forward(&self, features: Vec<f64>) -> (Vec<f64>, Trace) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = features;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.forward(&current, &mut z);
            let next = if i == last { z.clone() } else { z.iter().map(|&v| silu(v)).collect() };
            inputs.push(current);
            pre.push(z);
            current = next;
        }
        (current, Trace { inputs, pre })
    }

    /// Backpropagates `grad_out` and returns the gradient with respect to the
    /// features. If `grads` is given, parameter gradients are accumulated into it.
    fn backward(&self, trace: &Trace, grad_out: &[f64], mut grads: Option<&mut [Vec<f64>]>) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut delta = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i != last {
                for (d, &z) in delta.iter_mut().zip(&trace.pre[i]) {
                    *d *= silu_grad(z);
                }
            }
            let input = &trace.inputs[i];
            if let Some(g) = grads.as_deref_mut() {
                let g = &mut g[i];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut g[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, &x) in row.iter_mut().zip(input) {
                        *gw += d * x;
                    }
                    g[layer.weights.len() + o] += d;
                }
            }
            let mut prev = vec![0.0; layer.inputs];
            for (row, &d) in layer.weights.chunks_exact(layer.inputs).zip(&delta) {
                if d == 0.0 {
                    continue;
                }
                for (p, &w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            delta = prev;
        }
        delta
    }

    fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn round_to_f32(&mut self) {
        for l in &mut self.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }
}

impl Denoiser for MlpDenoiser {
    fn denoise(&self, x: &LatentGrid, t: f64, c: ConditioningRef<'_>) -> Result<LatentGrid> {
        let (out, _) = self.forward(self.features(x, t, c)?);
        let out = LatentGrid::from_raw(self.height, self.width, out);
        out.ensure_finite("MLP denoiser output")?;
        Ok(out)
    }

    fn vjp(&self, x: &LatentGrid, t: f64, c: ConditioningRef<'_>, upstream: &LatentGrid) -> Result<LatentGrid> {
        if upstream.shape() != x.shape() {
            return Err(Error::ShapeMismatch { left: x.shape(), right: upstream.shape() });
        }
        let (_, trace) = self.forward(self.features(x, t, c)?);
        let grad = self.backward(&trace, upstream.values(), None);
        let scale = self.input_scale(t);
        let pixels = self.height * self.width;
        let out = LatentGrid::from_raw(self.height, self.width, grad[..pixels].iter().map(|g| g * scale).collect());
        out.ensure_finite("MLP vjp")?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Mean of the normal distribution whose exponential gives training noise levels.
    pub mu_train: f64,
    /// Standard deviation of that normal distribution.
    pub sigma_train: f64,
    pub sigma_data: f64,
    pub hidden: Vec<usize>,
    /// Steps between validation passes ("epochs").
    pub eval_every: usize,
    pub validation_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            weight_decay: 0.01,
            mu_train: 0.5,
            sigma_train: 1.2,
            sigma_data: 1.0,
            hidden: vec![256, 256],
            eval_every: 100,
            validation_samples: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Mean per-pixel squared error of every training batch.
    pub train_losses: Vec<f64>,
    /// `(step, validation loss)` for every validation pass, including step 0.
    pub validation: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_validation_loss: f64,
}

struct Sampler<'a> {
    dataset: &'a Dataset,
    instances: Vec<usize>,
    choosers: Vec<WeightedIndex<f64>>,
    prototypes: Vec<Vec<LatentGrid>>,
}

impl<'a> Sampler<'a> {
    fn new(dataset: &'a Dataset, instances: Vec<usize>) -> Result<Self> {
        let mut choosers = Vec::new();
        let mut prototypes = Vec::new();
        for &i in &instances {
            let inst = &dataset.instances[i];
            choosers.push(
                WeightedIndex::new(inst.weights()).map_err(|e| Error::invalid(format!("instance {i}: {e}")))?,
            );
            prototypes.push(inst.modes.iter().map(|m| encode(&m.mask)).collect());
        }
        Ok(Self { dataset, instances, choosers, prototypes })
    }

    /// Draws `(clean, noisy, t, instance id)`.
    fn draw(&self, rng: &mut ChaCha8Rng, noise: NoiseLevel) -> (LatentGrid, LatentGrid, f64, usize) {
        let k = rng.random_range(0..self.instances.len());
        let mode = self.choosers[k].sample(rng);
        let y = self.prototypes[k][mode].clone();
        let t = match noise {
            NoiseLevel::Fixed(t) => t,
            NoiseLevel::LogNormal { mu, sigma } => (mu + sigma * rng.sample::<f64, _>(StandardNormal)).exp(),
        };
        let (h, w) = y.shape();
        let noisy: Vec<f64> = y.values().iter().map(|v| v + t * rng.sample::<f64, _>(StandardNormal)).collect();
        (y, LatentGrid::from_raw(h, w, noisy), t, self.instances[k])
    }
}

/// How validation and training pick noise levels.
#[derive(Debug, Clone, Copy)]
pub enum NoiseLevel {
    Fixed(f64),
    LogNormal { mu: f64, sigma: f64 },
}

fn mean_loss(model: &MlpDenoiser, sampler: &Sampler<'_>, n: usize, noise: NoiseLevel, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n {
        let (y, x, t, id) = sampler.draw(&mut rng, noise);
        let d = model.denoise(&x, t, sampler.dataset.conditioning(id)?)?;
        total += d.squared_distance(&y)? / y.len() as f64;
    }
    Ok(total / n.max(1) as f64)
}

/// Mean per-pixel squared denoising error over `n` fresh draws from the dataset.
pub fn validation_loss(model: &MlpDenoiser, dataset: &Dataset, n: usize, noise: NoiseLevel, seed: u64) -> Result<f64> {
    let sampler = Sampler::new(dataset, (0..dataset.len()).collect())?;
    mean_loss(model, &sampler, n, noise, seed)
}

fn split_indices(dataset: &Dataset) -> (Vec<usize>, Vec<usize>) {
    let all: Vec<usize> = (0..dataset.len()).collect();
    if dataset.len() < 4 {
        return (all.clone(), all);
    }
    let train: Vec<usize> = all.iter().copied().filter(|&i| split_of(i) == Split::Train).collect();
    let val: Vec<usize> = all.iter().copied().filter(|&i| split_of(i) == Split::Validation).collect();
    match (train.is_empty(), val.is_empty()) {
        (false, false) => (train, val),
        (false, true) => (train.clone(), train),
        _ => (all.clone(), all),
    }
}

/// Trains an [`MlpDenoiser`] with AdamW on `|D(y + ε; t, c) - y|²`, with
/// `ln t ~ N(mu_train, sigma_train²)` and `ε ~ N(0, t² I)`. Returns the
/// parameters with the lowest validation loss seen.
pub fn train_mlp(dataset: &Dataset, config: &TrainConfig) -> Result<(MlpDenoiser, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset has no instances".into()));
    }
    dataset.validate()?;
    if config.batch_size == 0 || config.eval_every == 0 || config.validation_samples == 0 {
        return Err(Error::invalid("batch size, eval interval and validation samples must be positive"));
    }
    let mut model = MlpDenoiser::new(
        dataset.height,
        dataset.width,
        dataset.channels,
        &config.hidden,
        config.sigma_data,
        config.seed,
    )?;
    model.round_to_f32();
    let (train_idx, val_idx) = split_indices(dataset);
    let train = Sampler::new(dataset, train_idx)?;
    let val = Sampler::new(dataset, val_idx)?;
    let noise = NoiseLevel::LogNormal { mu: config.mu_train, sigma: config.sigma_train };
    let val_seed = |pass: usize| derive_seed(config.seed, &[Stream::Training as u64, 2, pass as u64]);

    let mut report = TrainReport::default();
    let initial = mean_loss(&model, &val, config.validation_samples, noise, val_seed(0))?;
    report.validation.push((0, initial));
    report.best_validation_loss = initial;
    let mut best = model.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[Stream::Training as u64, 1]));
    let mut m: Vec<Vec<f64>> = model.layers.iter().map(|l| vec![0.0; l.num_params()]).collect();
    let mut v = m.clone();
    let mut grads = m.clone();
    let pixels = (dataset.height * dataset.width) as f64;

    for step in 1..=config.steps {
        grads.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x = 0.0));
        let mut batch_loss = 0.0;
        for _ in 0..config.batch_size {
            let (y, x, t, id) = train.draw(&mut rng, noise);
            let (out, trace) = model.forward(model.features(&x, t, dataset.conditioning(id)?)?);
            let scale = 2.0 / (pixels * config.batch_size as f64);
            let grad_out: Vec<f64> = out.iter().zip(y.values()).map(|(d, y)| scale * (d - y)).collect();
            batch_loss += out.iter().zip(y.values()).map(|(d, y)| (d - y) * (d - y)).sum::<f64>() / pixels;
            model.backward(&trace, &grad_out, Some(&mut grads));
        }
        batch_loss /= config.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(Error::Numerical(format!("training loss diverged at step {step}: {batch_loss}")));
        }
        report.train_losses.push(batch_loss);

        let bc1 = 1.0 - config.beta1.powi(step as i32);
        let bc2 = 1.0 - config.beta2.powi(step as i32);
        for (li, layer) in model.layers.iter_mut().enumerate() {
            let nw = layer.weights.len();
            for (pi, p) in layer.weights.iter_mut().chain(layer.bias.iter_mut()).enumerate() {
                let g = grads[li][pi];
                m[li][pi] = config.beta1 * m[li][pi] + (1.0 - config.beta1) * g;
                v[li][pi] = config.beta2 * v[li][pi] + (1.0 - config.beta2) * g * g;
                let update = (m[li][pi] / bc1) / ((v[li][pi] / bc2).sqrt() + config.epsilon);
                // decoupled weight decay on weights only
                let decay = if pi < nw { config.weight_decay * *p } else { 0.0 };
                *p -= config.learning_rate * (update + decay);
            }
        }
        if !model.params_finite() {
            return Err(Error::Numerical(format!("non-finite parameters after step {step}")));
        }

        if step % config.eval_every == 0 || step == config.steps {
            let mut candidate = model.clone();
            candidate.round_to_f32();
            let pass = report.validation.len();
            let loss = mean_loss(&candidate, &val, config.validation_samples, noise, val_seed(pass))?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("validation loss diverged at step {step}")));
            }
            report.validation.push((step, loss));
            if loss < report.best_validation_loss {
                report.best_validation_loss = loss;
                report.best_step = step;
                best = candidate;
            }
        }
    }
    Ok((best, report))
}

pub fn write_checkpoint<W: Write>(model: &MlpDenoiser, out: &mut W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    for v in [model.height, model.width, model.channels] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    out.write_all(&(model.sigma_data as f32).to_le_bytes())?;
    out.write_all(&(model.layers.len() as u32).to_le_bytes())?;
    for l in &model.layers {
        out.write_all(&(l.inputs as u32).to_le_bytes())?;
        out.write_all(&(l.outputs as u32).to_le_bytes())?;
    }
    for l in &model.layers {
        for v in l.weights.iter().chain(&l.bias) {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<MlpDenoiser> {
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if data.len() - pos < n {
            return Err(Error::Format { offset: pos as u64, message: format!("truncated checkpoint while reading {what}") });
        }
        pos += n;
        Ok(&data[pos - n..pos])
    };
    if take(7, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format { offset: 0, message: "bad checkpoint magic, expected DVSMDL1".into() });
    }
    let mut u32_field = |what: &str| -> Result<usize> { Ok(u32::from_le_bytes(take(4, what)?.try_into().unwrap()) as usize) };
    let height = u32_field("height")?;
    let width = u32_field("width")?;
    let channels = u32_field("channels")?;
    let sigma_data = f32::from_le_bytes(take(4, "sigma_data")?.try_into().unwrap()) as f64;
    let count = u32::from_le_bytes(take(4, "layer count")?.try_into().unwrap()) as usize;
    let mut dims = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let i = u32::from_le_bytes(take(4, "layer dims")?.try_into().unwrap()) as usize;
        let o = u32::from_le_bytes(take(4, "layer dims")?.try_into().unwrap()) as usize;
        dims.push((i, o));
    }
    let pixels = height * width;
    let consistent = count > 0
        && dims[0].0 == pixels * (1 + channels) + 1
        && dims[count - 1].1 == pixels
        && dims.windows(2).all(|w| w[0].1 == w[1].0);
    if !consistent {
        return Err(Error::Format { offset: 27, message: "inconsistent layer dimensions".into() });
    }
    let mut layers = Vec::with_capacity(count);
    for (inputs, outputs) in dims {
        let mut read = |n: usize| -> Result<Vec<f64>> {
            Ok(take(4 * n, "parameters")?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect())
        };
        let weights = read(inputs * outputs)?;
        let bias = read(outputs)?;
        layers.push(Dense { inputs, outputs, weights, bias });
    }
    if pos != data.len() {
        return Err(Error::Format { offset: pos as u64, message: "trailing bytes in checkpoint".into() });
    }
    let model = MlpDenoiser { height, width, channels, sigma_data, layers };
    if !model.params_finite() {
        return Err(Error::Format { offset: 0, message: "checkpoint contains non-finite parameters".into() });
    }
    Ok(model)
}

impl MlpDenoiser {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        write_checkpoint(self, &mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_checkpoint(&mut File::open(path)?)
    }
}
