//! EDM noise schedule and lockstep second-order Heun sampling.
//!
//! A batch of particles advances step by step; at every denoiser evaluation
//! the active diversity method may rewrite the predictions (SPELL), add a
//! guidance term to the drift (particle guidance) or noise the conditioning
//! (CADS). Every particle owns counter-derived RNG substreams, so its noise
//! never depends on batch composition or evaluation order.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditioningRef, Denoiser};
use crate::diversity::{cads_perturb, pg_guidance_gradient_from, spell_delta, CadsConfig, PgConfig, SpellConfig};
use crate::maskgrid::{threshold, BinaryMask, LatentGrid};
use crate::rng::{substream, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSchedule {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub rho: f64,
    pub steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { sigma_max: 80.0, sigma_min: 0.002, rho: 7.0, steps: 10 }
    }
}

/// `n + 1` noise levels: `n` Karras levels from `σ_max` down to `σ_min`, then 0.
pub fn make_schedule(cfg: &NoiseSchedule) -> Result<Vec<f64>> {
    let NoiseSchedule { sigma_max, sigma_min, rho, steps } = *cfg;
    if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
        return Err(Error::invalid(format!("need sigma_max > sigma_min > 0, got {sigma_max} and {sigma_min}")));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::invalid(format!("rho {rho} must be positive")));
    }
    if steps < 2 {
        return Err(Error::invalid(format!("schedule needs at least 2 steps, got {steps}")));
    }
    let (hi, lo) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
    let mut ts: Vec<f64> = (0..steps)
        .map(|i| (hi + (i as f64 / (steps - 1) as f64) * (lo - hi)).powf(rho))
        .collect();
    ts[0] = sigma_max;
    ts[steps - 1] = sigma_min;
    if ts.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::Numerical("schedule is not strictly decreasing".into()));
    }
    ts.push(0.0);
    Ok(ts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum Method {
    #[default]
    Naive,
    ParticleGuidance(PgConfig),
    Spell(SpellConfig),
    Cads(CadsConfig),
}


impl Method {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Naive => Ok(()),
            Self::ParticleGuidance(c) => c.validate(),
            Self::Spell(c) => c.validate(),
            Self::Cads(c) => c.validate(),
        }
    }

    pub fn uses_bank(&self) -> bool {
        match self {
            Self::ParticleGuidance(c) => c.policy.uses_bank(),
            Self::Spell(c) => c.policy.uses_bank(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub s_churn: f64,
    pub method: Method,
    pub batch_size: usize,
    pub seed: u64,
    /// Apply diversity hooks at the Heun correction evaluation as well.
    pub hooks_at_correction: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::default(),
            s_churn: 0.0,
            method: Method::Naive,
            batch_size: 8,
            seed: 0,
            hooks_at_correction: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_churn >= 0.0) || !self.s_churn.is_finite() {
            return Err(Error::invalid(format!("S_churn {} must be finite and >= 0", self.s_churn)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        self.method.validate()?;
        make_schedule(&self.schedule).map(|_| ())
    }
}

/// One trajectory together with its private random streams.
#[derive(Debug, Clone)]
pub struct Particle {
    /// Position inside its batch.
    pub index: usize,
    pub initial_noise: LatentGrid,
    pub x: LatentGrid,
    churn: ChaCha8Rng,
    conditioning: ChaCha8Rng,
}

impl Particle {
    /// Particle `index` of batch `batch` for input `input`, starting from
    /// `σ_max · N(0, I)` drawn from its own substream.
    pub fn new(shape: (usize, usize), cfg: &SamplerConfig, input: usize, batch: usize, index: usize) -> Self {
        let (i, b, p) = (input as u64, batch as u64, index as u64);
        let mut noise = substream(cfg.seed, Stream::InitialNoise, i, b, p);
        let sigma = cfg.schedule.sigma_max;
        let values = (0..shape.0 * shape.1).map(|_| sigma * noise.sample::<f64, _>(StandardNormal)).collect();
        let initial_noise = LatentGrid::from_raw(shape.0, shape.1, values);
        Self {
            index,
            x: initial_noise.clone(),
            initial_noise,
            churn: substream(cfg.seed, Stream::Churn, i, b, p),
            conditioning: substream(cfg.seed, Stream::Conditioning, i, b, p),
        }
    }
}

pub fn init_particles(shape: (usize, usize), cfg: &SamplerConfig, input: usize, batch: usize, count: usize) -> Vec<Particle> {
    (0..count).map(|p| Particle::new(shape, cfg, input, batch, p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Predictor,
    Corrector,
}

fn check_finite(grids: &[LatentGrid], step: usize, t: f64, what: &str) -> Result<()> {
    for (i, g) in grids.iter().enumerate() {
        if g.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{what} of particle {i} at step {step}, t = {t}")));
        }
    }
    Ok(())
}

/// One Heun step for a whole batch. `drift(xs, t, phase)` returns the ODE
/// directions `dx/dt` for every particle.
pub fn heun_step_batch<F>(xs: &[LatentGrid], t_cur: f64, t_next: f64, step: usize, mut drift: F) -> Result<Vec<LatentGrid>>
where
    F: FnMut(&[LatentGrid], f64, Phase) -> Result<Vec<LatentGrid>>,
{
    if !(t_cur > t_next && t_next >= 0.0) {
        return Err(Error::invalid(format!("Heun step needs t_cur > t_next >= 0, got {t_cur} -> {t_next}")));
    }
    let h = t_next - t_cur;
    let d = drift(xs, t_cur, Phase::Predictor)?;
    check_finite(&d, step, t_cur, "direction")?;
    let euler = xs.iter().zip(&d).map(|(x, d)| x.axpy(h, d)).collect::<Result<Vec<_>>>()?;
    check_finite(&euler, step, t_next, "Euler predictor")?;
    if t_next == 0.0 {
        return Ok(euler);
    }
    let d2 = drift(&euler, t_next, Phase::Corrector)?;
    check_finite(&d2, step, t_next, "corrected direction")?;
    let out = xs
        .iter()
        .zip(d.iter().zip(&d2))
        .map(|(x, (a, b))| x.axpy(0.5 * h, &a.axpy(1.0, b)?))
        .collect::<Result<Vec<_>>>()?;
    check_finite(&out, step, t_next, "Heun update")?;
    Ok(out)
}

/// Plain Heun step of one trajectory without diversity hooks.
pub fn heun_step<D: Denoiser + ?Sized>(model: &D, x: &LatentGrid, t_cur: f64, t_next: f64, c: ConditioningRef<'_>) -> Result<LatentGrid> {
    let out = heun_step_batch(std::slice::from_ref(x), t_cur, t_next, 0, |xs, t, _| {
        xs.iter().map(|x| x.sub(&model.denoise(x, t, c)?).map(|v| v.scale(1.0 / t))).collect()
    })?;
    Ok(out.into_iter().next().expect("one particle in, one out"))
}

/// Integrates one trajectory from `x` over the whole schedule without churn or hooks.
pub fn sample_trajectory<D: Denoiser + ?Sized>(model: &D, x: &LatentGrid, schedule: &[f64], c: ConditioningRef<'_>) -> Result<LatentGrid> {
    let mut x = x.clone();
    for w in schedule.windows(2) {
        x = heun_step(model, &x, w[0], w[1], c)?;
    }
    Ok(x)
}

/// Drift evaluation for a batch with the configured diversity method.
struct Hooks<'a, D: ?Sized> {
    model: &'a D,
    method: &'a Method,
    conditioning: ConditioningRef<'a>,
    bank: &'a [LatentGrid],
    hooks_at_correction: bool,
}

impl<D: Denoiser + ?Sized> Hooks<'_, D> {
    fn drift(
        &self,
        xs: &[LatentGrid],
        t: f64,
        step: usize,
        phase: Phase,
        rngs: &mut [&mut ChaCha8Rng],
    ) -> Result<Vec<LatentGrid>> {
        let hooked = phase == Phase::Predictor || self.hooks_at_correction;
        let c = self.conditioning;
        let perturbed: Option<Vec<Vec<f32>>> = match self.method {
            Method::Cads(cfg) if hooked && cfg.gamma > 0.0 => {
                Some(rngs.iter_mut().map(|rng| cads_perturb(c.channels, t, cfg, &mut **rng)).collect())
            }
            _ => None,
        };
        let conds: Vec<ConditioningRef<'_>> = match &perturbed {
            Some(p) => p.iter().map(|ch| ConditioningRef::new(c.id, ch)).collect(),
            None => vec![c; xs.len()],
        };
        let preds = xs
            .par_iter()
            .zip(conds.par_iter())
            .map(|(x, &ci)| self.model.denoise(x, t, ci))
            .collect::<Result<Vec<_>>>()?;
        check_finite(&preds, step, t, "denoiser output")?;

        let modified = match self.method {
            Method::Spell(cfg) if hooked && cfg.is_active(t) => {
                let deltas = spell_delta(&preds, self.bank, cfg.policy, cfg.r)?;
                preds.iter().zip(&deltas).map(|(p, d)| p.axpy(1.0, d)).collect::<Result<Vec<_>>>()?
            }
            _ => preds.clone(),
        };
        let mut dirs = xs
            .iter()
            .zip(&modified)
            .map(|(x, p)| x.sub(p).map(|v| v.scale(1.0 / t)))
            .collect::<Result<Vec<_>>>()?;

        if let Method::ParticleGuidance(cfg) = self.method {
            if hooked && cfg.is_active(step) {
                let grads = pg_guidance_gradient_from(self.model, xs, &preds, t, &conds, cfg, self.bank)?;
                for (d, g) in dirs.iter_mut().zip(&grads) {
                    *d = d.axpy(-t * cfg.alpha, g)?;
                }
            }
        }
        Ok(dirs)
    }
}

/// Advances `particles` through the schedule steps in `steps` (step `i`
/// integrates from `t_i` to `t_{i+1}`), applying churn and the configured
/// diversity method.
pub fn run_steps<D: Denoiser + ?Sized>(
    model: &D,
    cfg: &SamplerConfig,
    conditioning: ConditioningRef<'_>,
    particles: &mut [Particle],
    steps: Range<usize>,
    bank: &[LatentGrid],
) -> Result<()> {
    let ts = make_schedule(&cfg.schedule)?;
    if steps.end > cfg.schedule.steps {
        return Err(Error::invalid(format!("step range {steps:?} exceeds the {} schedule steps", cfg.schedule.steps)));
    }
    if particles.is_empty() {
        return Ok(());
    }
    let hooks = Hooks { model, method: &cfg.method, conditioning, bank, hooks_at_correction: cfg.hooks_at_correction };
    let gamma = if cfg.s_churn > 0.0 { (cfg.s_churn / cfg.schedule.steps as f64).min(2f64.sqrt() - 1.0) } else { 0.0 };
    for step in steps {
        let (t, t_next) = (ts[step], ts[step + 1]);
        let t_hat = t * (1.0 + gamma);
        let xs: Vec<LatentGrid> = if gamma > 0.0 {
            let std = (t_hat * t_hat - t * t).sqrt();
            particles
                .iter_mut()
                .map(|p| {
                    let v = p.x.values().iter().map(|&v| v + std * p.churn.sample::<f64, _>(StandardNormal)).collect();
                    LatentGrid::from_raw(p.x.height(), p.x.width(), v)
                })
                .collect()
        } else {
            particles.iter().map(|p| p.x.clone()).collect()
        };
        let mut rngs: Vec<&mut ChaCha8Rng> = particles.iter_mut().map(|p| &mut p.conditioning).collect();
        let next = heun_step_batch(&xs, t_hat, t_next, step, |xs, t, phase| hooks.drift(xs, t, step, phase, &mut rngs))?;
        for (p, x) in particles.iter_mut().zip(next) {
            p.x = x;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub latents: Vec<LatentGrid>,
    pub masks: Vec<BinaryMask>,
    pub initial_noise: Vec<LatentGrid>,
}

/// Samples batch `batch` of `cfg.batch_size` particles for input `input`.
///
/// When `bank` is given, bank-repellence policies repel from its contents and
/// the final latents are appended to it afterwards.
pub fn sample_batch<D: Denoiser + ?Sized>(
    model: &D,
    cfg: &SamplerConfig,
    conditioning: ConditioningRef<'_>,
    shape: (usize, usize),
    input: usize,
    batch: usize,
    bank: Option<&mut Vec<LatentGrid>>,
) -> Result<BatchOutput> {
    cfg.validate()?;
    let mut particles = init_particles(shape, cfg, input, batch, cfg.batch_size);
    let empty = Vec::new();
    let bank_view = bank.as_deref().unwrap_or(&empty);
    run_steps(model, cfg, conditioning, &mut particles, 0..cfg.schedule.steps, bank_view)?;
    let latents: Vec<LatentGrid> = particles.iter().map(|p| p.x.clone()).collect();
    let masks = latents.iter().map(threshold).collect::<Result<Vec<_>>>()?;
    if let Some(bank) = bank {
        bank.extend(latents.iter().cloned());
    }
    Ok(BatchOutput { latents, masks, initial_noise: particles.into_iter().map(|p| p.initial_noise).collect() })
}
