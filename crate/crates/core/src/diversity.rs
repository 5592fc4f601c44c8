//! In-sampling diversity mechanisms.
//!
//! * Particle guidance adds the gradient of a negative RBF kernel sum between
//!   one-step predictions to the ODE drift.
//! * SPELL adds a correction `Δ_i` to the denoiser output that pushes any
//!   prediction closer than the shield radius `r` to another one back out to
//!   exactly distance `r`.
//! * CADS noises the conditioning channels during sampling.
//!
//! Both repellence methods can repel from peers in the current batch, from a
//! memory bank of finished samples of earlier batches, or from both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::denoiser::{ConditioningRef, Denoiser};
use crate::maskgrid::{encode, l2_distance, LatentGrid};
use crate::rng::{derive_seed, Stream};
use crate::{Error, Result};

/// Which samples a particle is repelled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepellencePolicy {
    #[default]
    Batch,
    Bank,
    BatchAndBank,
}

impl RepellencePolicy {
    pub fn uses_batch(self) -> bool {
        matches!(self, Self::Batch | Self::BatchAndBank)
    }

    pub fn uses_bank(self) -> bool {
        matches!(self, Self::Bank | Self::BatchAndBank)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceSteps {
    /// Both denoiser evaluations of the first schedule step.
    First,
    #[default]
    All,
}

/// Kernel bandwidth rule given the median squared distance `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// `h = m² / log B`.
    #[default]
    SquaredMedian,
    /// `h = m / log B`.
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgConfig {
    pub alpha: f64,
    pub steps: GuidanceSteps,
    pub policy: RepellencePolicy,
    pub bandwidth: BandwidthRule,
}

impl Default for PgConfig {
    fn default() -> Self {
        Self { alpha: 25.0, steps: GuidanceSteps::All, policy: RepellencePolicy::Batch, bandwidth: BandwidthRule::SquaredMedian }
    }
}

impl PgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("guidance strength {} must be finite and >= 0", self.alpha)));
        }
        Ok(())
    }

    pub fn is_active(&self, step: usize) -> bool {
        self.alpha > 0.0 && (self.steps == GuidanceSteps::All || step == 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpellConfig {
    /// Shield radius in encoded-mask L2 units.
    pub r: f64,
    /// Lowest noise level at which the correction is still applied.
    pub s_min: f64,
    pub policy: RepellencePolicy,
}

impl Default for SpellConfig {
    fn default() -> Self {
        Self { r: 0.0, s_min: 40.0, policy: RepellencePolicy::Batch }
    }
}

impl SpellConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r >= 0.0) || !self.r.is_finite() {
            return Err(Error::invalid(format!("shield radius {} must be finite and >= 0", self.r)));
        }
        if !(self.s_min >= 0.0) {
            return Err(Error::invalid(format!("s_min {} must be >= 0", self.s_min)));
        }
        Ok(())
    }

    pub fn is_active(&self, t: f64) -> bool {
        self.r > 0.0 && t >= self.s_min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CadsConfig {
    pub gamma: f64,
}

impl Default for CadsConfig {
    fn default() -> Self {
        Self { gamma: 0.0 }
    }
}

impl CadsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("CADS attenuation {} not in [0, 1]", self.gamma)));
        }
        Ok(())
    }
}

/// RBF kernel `exp(-|a - b|² / h)`.
pub fn pg_kernel(a: &LatentGrid, b: &LatentGrid, bandwidth: f64) -> Result<f64> {
    if !(bandwidth > 0.0) {
        return Err(Error::invalid(format!("kernel bandwidth {bandwidth} must be positive")));
    }
    Ok((-a.squared_distance(b)? / bandwidth).exp())
}

pub const MIN_BANDWIDTH: f64 = 1e-8;

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Bandwidth from the median `m` of the given squared distances over a pool
/// of `pool_size` points, floored at [`MIN_BANDWIDTH`].
pub fn pg_bandwidth(squared_distances: &[f64], pool_size: usize, rule: BandwidthRule) -> Result<f64> {
    if pool_size < 2 {
        return Err(Error::invalid(format!("bandwidth needs at least two particles, got {pool_size}")));
    }
    let m = median(squared_distances).ok_or_else(|| Error::Empty("no pairwise distances".into()))?;
    let log_b = (pool_size as f64).ln();
    let h = match rule {
        BandwidthRule::SquaredMedian => m * m / log_b,
        BandwidthRule::Median => m / log_b,
    };
    Ok(h.max(MIN_BANDWIDTH))
}

/// Repellence targets of particle `i`: batch peers (index into the batch) and
/// bank entries (index into the bank).
fn targets(i: usize, batch: usize, bank: usize, policy: RepellencePolicy) -> impl Iterator<Item = Target> {
    let peers = (0..batch).filter(move |&j| j != i && policy.uses_batch()).map(Target::Peer);
    let banked = (0..bank).filter(move |_| policy.uses_bank()).map(Target::Bank);
    peers.chain(banked)
}

#[derive(Debug, Clone, Copy)]
enum Target {
    Peer(usize),
    Bank(usize),
}

fn resolve<'a>(target: Target, predictions: &'a [LatentGrid], bank: &'a [LatentGrid]) -> &'a LatentGrid {
    match target {
        Target::Peer(j) => &predictions[j],
        Target::Bank(b) => &bank[b],
    }
}

/// Bandwidth for the current repellence graph, or `None` when no particle
/// has anything to be repelled from.
///
/// With batch repellence the median runs over batch pairs `i < j` and the
/// pool is the batch. With bank-only repellence it runs over particle-bank
/// pairs with pool `1 + |bank|`; with both, over both kinds of pairs with
/// pool `B + |bank|`.
pub fn repellence_bandwidth(
    predictions: &[LatentGrid],
    bank: &[LatentGrid],
    policy: RepellencePolicy,
    rule: BandwidthRule,
) -> Result<Option<f64>> {
    let b = predictions.len();
    let mut d2 = Vec::new();
    if policy.uses_batch() {
        for i in 0..b {
            for j in i + 1..b {
                d2.push(predictions[i].squared_distance(&predictions[j])?);
            }
        }
    }
    if policy.uses_bank() {
        for p in predictions {
            for q in bank {
                d2.push(p.squared_distance(q)?);
            }
        }
    }
    let pool = match policy {
        RepellencePolicy::Batch => b,
        RepellencePolicy::Bank => 1 + bank.len(),
        RepellencePolicy::BatchAndBank => b + bank.len(),
    };
    if d2.is_empty() || pool < 2 {
        return Ok(None);
    }
    pg_bandwidth(&d2, pool, rule).map(Some)
}

/// Guidance function `g_i = -Σ_j k(x̃_i, x̃_j)` over the repellence set of each particle.
pub fn pg_objective(
    predictions: &[LatentGrid],
    bank: &[LatentGrid],
    policy: RepellencePolicy,
    bandwidth: f64,
) -> Result<Vec<f64>> {
    (0..predictions.len())
        .map(|i| {
            targets(i, predictions.len(), bank.len(), policy)
                .map(|t| pg_kernel(&predictions[i], resolve(t, predictions, bank), bandwidth))
                .try_fold(0.0, |acc, k| k.map(|k| acc - k))
        })
        .collect()
}

/// Gradient of `g_i` with respect to the one-step prediction `x̃_i`:
/// `Σ_j (2 k_ij / h)(x̃_i - x̃_j)`.
pub fn pg_prediction_gradients(
    predictions: &[LatentGrid],
    bank: &[LatentGrid],
    policy: RepellencePolicy,
    bandwidth: f64,
) -> Result<Vec<LatentGrid>> {
    let mut out = Vec::with_capacity(predictions.len());
    for (i, xi) in predictions.iter().enumerate() {
        let (h, w) = xi.shape();
        let mut acc = vec![0.0; h * w];
        for t in targets(i, predictions.len(), bank.len(), policy) {
            let xj = resolve(t, predictions, bank);
            let coef = 2.0 * pg_kernel(xi, xj, bandwidth)? / bandwidth;
            for ((a, &p), &q) in acc.iter_mut().zip(xi.values()).zip(xj.values()) {
                *a += coef * (p - q);
            }
        }
        out.push(LatentGrid::from_raw(h, w, acc));
    }
    Ok(out)
}

/// Particle-guidance gradients `∇_{x_i} g(x_i; t)` for a whole batch.
///
/// `conditionings[i]` is the conditioning used for particle `i`. Bank entries
/// are constants, and the bandwidth is treated as a constant of the batch.
pub fn pg_guidance_gradient<D: Denoiser + ?Sized>(
    model: &D,
    xs: &[LatentGrid],
    t: f64,
    conditionings: &[ConditioningRef<'_>],
    cfg: &PgConfig,
    bank: &[LatentGrid],
) -> Result<Vec<LatentGrid>> {
    let predictions = xs
        .iter()
        .zip(conditionings)
        .map(|(x, &c)| model.denoise(x, t, c))
        .collect::<Result<Vec<_>>>()?;
    pg_guidance_gradient_from(model, xs, &predictions, t, conditionings, cfg, bank)
}

/// As [`pg_guidance_gradient`], reusing already computed predictions.
pub fn pg_guidance_gradient_from<D: Denoiser + ?Sized>(
    model: &D,
    xs: &[LatentGrid],
    predictions: &[LatentGrid],
    t: f64,
    conditionings: &[ConditioningRef<'_>],
    cfg: &PgConfig,
    bank: &[LatentGrid],
) -> Result<Vec<LatentGrid>> {
    let zeros = || xs.iter().map(|x| LatentGrid::zeros(x.height(), x.width())).collect();
    let Some(h) = repellence_bandwidth(predictions, bank, cfg.policy, cfg.bandwidth)? else {
        return Ok(zeros());
    };
    let upstream = pg_prediction_gradients(predictions, bank, cfg.policy, h)?;
    xs.iter()
        .zip(conditionings)
        .zip(&upstream)
        .map(|((x, &c), u)| {
            if u.values().iter().all(|&v| v == 0.0) {
                Ok(LatentGrid::zeros(x.height(), x.width()))
            } else {
                model.vjp(x, t, c, u)
            }
        })
        .collect()
}

/// Distances below this count as coincident predictions.
pub const COINCIDENCE_EPS: f64 = 1e-9;

/// Deterministic pseudo-random unit direction for a coincident pair. The
/// direction for `(b, a)` is the negation of the one for `(a, b)`, so the pair
/// separates symmetrically.
fn jitter_direction(a: usize, b: usize, bank: bool, shape: (usize, usize)) -> LatentGrid {
    let (lo, hi, sign) = if bank || a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x5be1, &[Stream::Jitter as u64, bank as u64, lo as u64, hi as u64]));
    let n = shape.0 * shape.1;
    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    LatentGrid::from_raw(shape.0, shape.1, v.into_iter().map(|x| sign * x / norm).collect())
}

/// SPELL corrections
/// `Δ_i = Σ_b relu(r / |x̃_i - x̃_b| - 1) (x̃_i - x̃_b)` over the repellence set of each particle.
///
/// A coincident pair contributes `r·u` for a deterministic unit direction
/// `u`, the limit of the formula as the offset shrinks to zero along `u`.
pub fn spell_delta(
    predictions: &[LatentGrid],
    bank: &[LatentGrid],
    policy: RepellencePolicy,
    r: f64,
) -> Result<Vec<LatentGrid>> {
    if !(r >= 0.0) {
        return Err(Error::invalid(format!("shield radius {r} must be >= 0")));
    }
    let mut out = Vec::with_capacity(predictions.len());
    for (i, xi) in predictions.iter().enumerate() {
        let (h, w) = xi.shape();
        let mut delta = vec![0.0; h * w];
        if r > 0.0 {
            for t in targets(i, predictions.len(), bank.len(), policy) {
                let xj = resolve(t, predictions, bank);
                let d = l2_distance(xi, xj)?;
                if d >= r {
                    continue;
                }
                if d < COINCIDENCE_EPS {
                    let u = match t {
                        Target::Peer(j) => jitter_direction(i, j, false, (h, w)),
                        Target::Bank(b) => jitter_direction(i, b, true, (h, w)),
                    };
                    for (a, &v) in delta.iter_mut().zip(u.values()) {
                        *a += r * v;
                    }
                    continue;
                }
                let coef = r / d - 1.0;
                for ((a, &p), &q) in delta.iter_mut().zip(xi.values()).zip(xj.values()) {
                    *a += coef * (p - q);
                }
            }
        }
        out.push(LatentGrid::from_raw(h, w, delta));
    }
    Ok(out)
}

/// `D(x) + Δ` where `Δ` repels the prediction of `x` from `peers`
/// (predictions of other particles or bank entries) while `t >= s_min`.
pub fn spell_modified_denoise<D: Denoiser + ?Sized>(
    model: &D,
    x: &LatentGrid,
    t: f64,
    c: ConditioningRef<'_>,
    peers: &[LatentGrid],
    cfg: &SpellConfig,
) -> Result<LatentGrid> {
    cfg.validate()?;
    let d = model.denoise(x, t, c)?;
    if !cfg.is_active(t) {
        return Ok(d);
    }
    let delta = spell_delta(std::slice::from_ref(&d), peers, RepellencePolicy::Bank, cfg.r)?;
    d.axpy(1.0, &delta[0])
}

/// Data-driven shield radius: the mean over inputs of the minimum L2 distance
/// between distinct encoded targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShieldEstimate {
    pub r0: f64,
    /// Inputs with fewer than two distinct targets.
    pub skipped: usize,
}

pub fn estimate_r0(dataset: &Dataset) -> Result<ShieldEstimate> {
    let mut minima = Vec::new();
    let mut skipped = 0;
    for inst in &dataset.instances {
        let unique = inst.unique_modes();
        if unique.len() < 2 {
            skipped += 1;
            continue;
        }
        let enc: Vec<_> = unique.iter().map(|m| encode(&m.mask)).collect();
        let mut best = f64::INFINITY;
        for a in 0..enc.len() {
            for b in a + 1..enc.len() {
                best = best.min(l2_distance(&enc[a], &enc[b])?);
            }
        }
        minima.push(best);
    }
    if minima.is_empty() {
        return Err(Error::Empty(format!(
            "no input has two distinct targets ({skipped} skipped); cannot estimate a shield radius"
        )));
    }
    Ok(ShieldEstimate { r0: minima.iter().sum::<f64>() / minima.len() as f64, skipped })
}

/// `(c + γ ε) / (1 + t²)` with `ε ~ N(0, t² I)`; identity when `γ = 0`.
pub fn cads_perturb<R: Rng + ?Sized>(c: &[f32], t: f64, cfg: &CadsConfig, rng: &mut R) -> Vec<f32> {
    if cfg.gamma == 0.0 {
        return c.to_vec();
    }
    let denom = 1.0 + t * t;
    c.iter()
        .map(|&v| {
            let eps = t * rng.sample::<f64, _>(StandardNormal);
            ((v as f64 + cfg.gamma * eps) / denom) as f32
        })
        .collect()
}
