//! Clustering-based sample pruning: oversample, cluster the one-step
//! predictions with k-medoids, and finish only the medoid trajectories.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditioningRef, Denoiser};
use crate::maskgrid::{chamfer_distance, l2_distance, threshold, BinaryMask, LatentGrid};
use crate::rng::{derive_seed, substream, Stream};
use crate::sampler::{init_particles, make_schedule, run_steps, Method, SamplerConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// Chamfer distance between thresholded predictions.
    #[default]
    Chamfer,
    /// L2 distance between continuous predictions.
    L2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Medoid point indices in ascending order.
    pub medoids: Vec<usize>,
    /// For every point, the position in `medoids` of its nearest medoid.
    pub assignment: Vec<usize>,
    /// Sum of point-to-medoid distances after seeding and after every pass.
    pub objective: Vec<f64>,
}

fn nearest(dist: &[Vec<f64>], medoids: &[usize], i: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (slot, &m) in medoids.iter().enumerate() {
        if dist[i][m] < best.1 {
            best = (slot, dist[i][m]);
        }
    }
    best
}

fn cost(dist: &[Vec<f64>], medoids: &[usize]) -> f64 {
    (0..dist.len()).map(|i| nearest(dist, medoids, i).1).sum()
}

/// Greedy k-means++ seeding: each new medoid is the best of a few candidates
/// drawn proportionally to the squared distance to the current medoids.
fn seed_medoids<R: Rng>(dist: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<usize> {
    let n = dist.len();
    let mut medoids = vec![rng.random_range(0..n)];
    let trials = 2 + (k as f64).ln().floor() as usize;
    while medoids.len() < k {
        let d2: Vec<f64> = (0..n).map(|i| nearest(dist, &medoids, i).1.powi(2)).collect();
        let mut candidates: Vec<usize> = match WeightedIndex::new(&d2) {
            Ok(w) => (0..trials).map(|_| w.sample(rng)).collect(),
            // every point coincides with a medoid
            Err(_) => vec![(0..n).find(|i| !medoids.contains(i)).expect("k <= n")],
        };
        candidates.sort_unstable();
        candidates.dedup();
        let mut best = (usize::MAX, f64::INFINITY);
        for c in candidates {
            let mut trial = medoids.clone();
            trial.push(c);
            let v = cost(dist, &trial);
            if v < best.1 {
                best = (c, v);
            }
        }
        medoids.push(best.0);
    }
    medoids
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMedoidsOptions {
    pub seed: u64,
    /// Cap on alternation/swap passes per restart.
    pub max_iter: usize,
    /// Independent seedings; the lowest final objective wins.
    pub restarts: usize,
}

impl Default for KMedoidsOptions {
    fn default() -> Self {
        Self { seed: 0, max_iter: 100, restarts: 20 }
    }
}

/// k-medoids on a symmetric distance matrix.
///
/// After seeding, alternates nearest-medoid assignment with per-cluster
/// medoid updates until a fixed point, then applies the best improving single
/// swap and resumes alternation, until nothing changes or `max_iter` passes
/// have run. Repeated for every restart; ties go to the lowest index and the
/// earliest restart.
pub fn kmedoids(dist: &[Vec<f64>], k: usize, opts: &KMedoidsOptions) -> Result<Clustering> {
    let n = dist.len();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("cannot pick {k} medoids from {n} points")));
    }
    if dist.iter().any(|row| row.len() != n) {
        return Err(Error::ShapeMismatch { left: (n, n), right: (n, dist.iter().map(Vec::len).max().unwrap_or(0)) });
    }
    if dist.iter().flatten().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::NonFinite("distance matrix must be finite and non-negative".into()));
    }
    let mut best: Option<Clustering> = None;
    for restart in 0..opts.restarts.max(1) {
        let run = kmedoids_once(dist, k, opts.seed, restart as u64, opts.max_iter);
        if best.as_ref().is_none_or(|b| run.objective.last() < b.objective.last()) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn kmedoids_once(dist: &[Vec<f64>], k: usize, seed: u64, restart: u64, max_iter: usize) -> Clustering {
    let n = dist.len();
    let mut rng = substream(seed, Stream::Clustering, 0, 0, restart);
    let mut medoids = seed_medoids(dist, k, &mut rng);
    let mut current = cost(dist, &medoids);
    let mut objective = vec![current];

    for _ in 0..max_iter {
        let assignment: Vec<usize> = (0..n).map(|i| nearest(dist, &medoids, i).0).collect();
        let mut updated = medoids.clone();
        for (slot, m) in updated.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == slot).collect();
            let within = |c: usize| members.iter().map(|&i| dist[c][i]).sum::<f64>();
            let mut best = (*m, within(*m));
            for &c in &members {
                let v = within(c);
                if v < best.1 || (v == best.1 && c < best.0) {
                    best = (c, v);
                }
            }
            *m = best.0;
        }
        let mut next = cost(dist, &updated);
        if next >= current {
            updated = medoids.clone();
            next = current;
            let mut best_swap = None;
            for slot in 0..k {
                for c in 0..n {
                    if updated.contains(&c) {
                        continue;
                    }
                    let mut trial = updated.clone();
                    trial[slot] = c;
                    let v = cost(dist, &trial);
                    if v < best_swap.map_or(next, |(_, _, b)| b) {
                        best_swap = Some((slot, c, v));
                    }
                }
            }
            match best_swap {
                Some((slot, c, v)) => {
                    updated[slot] = c;
                    next = v;
                }
                None => break,
            }
        }
        medoids = updated;
        current = next;
        objective.push(current);
    }
    medoids.sort_unstable();
    let assignment = (0..n).map(|i| nearest(dist, &medoids, i).0).collect();
    Clustering { medoids, assignment, objective }
}

/// Builds the pairwise distance matrix of `points` and runs [`kmedoids`].
pub fn kmedoids_by<T>(
    points: &[T],
    k: usize,
    distance: impl Fn(&T, &T) -> Result<f64>,
    opts: &KMedoidsOptions,
) -> Result<Clustering> {
    let n = points.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = distance(&points[i], &points[j])?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    kmedoids(&dist, k, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub b_init: usize,
    pub k: usize,
    /// Full Heun steps taken before clustering; 0 clusters the first prediction.
    pub prune_after_step: usize,
    pub distance: Distance,
    pub max_iter: usize,
    pub restarts: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self { b_init: 64, k: 8, prune_after_step: 0, distance: Distance::Chamfer, max_iter: 100, restarts: 20 }
    }
}

impl PruneConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.k == 0 || self.k > self.b_init {
            return Err(Error::invalid(format!("need 1 <= k <= b_init, got k={} b_init={}", self.k, self.b_init)));
        }
        if self.prune_after_step > steps {
            return Err(Error::invalid(format!("prune step {} beyond the {steps} schedule steps", self.prune_after_step)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutput {
    pub latents: Vec<LatentGrid>,
    pub masks: Vec<BinaryMask>,
    pub initial_noise: Vec<LatentGrid>,
    /// Particle indices of the survivors within the oversampled batch.
    pub survivors: Vec<usize>,
}

/// Oversamples `b_init` particles, clusters their predictions after
/// `prune_after_step` steps and finishes the `k` medoids with naive sampling.
/// The method in `sampler` is ignored; its seed, schedule and churn are used.
pub fn prune_and_finish<D: Denoiser + ?Sized>(
    model: &D,
    cfg: &PruneConfig,
    sampler: &SamplerConfig,
    conditioning: ConditioningRef<'_>,
    shape: (usize, usize),
    input: usize,
    batch: usize,
) -> Result<PruneOutput> {
    let steps = sampler.schedule.steps;
    cfg.validate(steps)?;
    let naive = SamplerConfig { method: Method::Naive, batch_size: cfg.b_init, ..sampler.clone() };
    naive.validate()?;
    let ts = make_schedule(&naive.schedule)?;
    let mut particles = init_particles(shape, &naive, input, batch, cfg.b_init);
    run_steps(model, &naive, conditioning, &mut particles, 0..cfg.prune_after_step, &[])?;

    let predictions: Vec<LatentGrid> = if cfg.prune_after_step == steps {
        particles.iter().map(|p| p.x.clone()).collect()
    } else {
        let t = ts[cfg.prune_after_step];
        particles.iter().map(|p| model.denoise(&p.x, t, conditioning)).collect::<Result<_>>()?
    };
    let opts = KMedoidsOptions { seed: derive_seed(naive.seed, &[input as u64, batch as u64]), max_iter: cfg.max_iter, restarts: cfg.restarts };
    let clustering = match cfg.distance {
        Distance::Chamfer => {
            let masks = predictions.iter().map(threshold).collect::<Result<Vec<_>>>()?;
            kmedoids_by(&masks, cfg.k, chamfer_distance, &opts)?
        }
        Distance::L2 => kmedoids_by(&predictions, cfg.k, l2_distance, &opts)?,
    };

    let mut survivors: Vec<_> = particles
        .into_iter()
        .filter(|p| clustering.medoids.binary_search(&p.index).is_ok())
        .collect();
    run_steps(model, &naive, conditioning, &mut survivors, cfg.prune_after_step..steps, &[])?;
    let latents: Vec<LatentGrid> = survivors.iter().map(|p| p.x.clone()).collect();
    Ok(PruneOutput {
        masks: latents.iter().map(threshold).collect::<Result<_>>()?,
        latents,
        initial_noise: survivors.iter().map(|p| p.initial_noise.clone()).collect(),
        survivors: clustering.medoids,
    })
}
