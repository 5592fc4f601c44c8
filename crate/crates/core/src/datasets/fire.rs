//! Toy wind-driven fire spread with a shared burn-in and per-wind futures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize, ConditionedInstance, Dataset, Mode};
use crate::maskgrid::BinaryMask;
use crate::rng::{derive_seed, Stream};
use crate::{Error, Result};

const MAX_RETRIES: u64 = 100;
pub const FIRE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FireScenarioConfig {
    pub size: usize,
    /// Probability that a cell carries fuel before smoothing.
    pub fuel_density: f64,
    pub pre_branch_steps: usize,
    pub post_branch_steps: usize,
    /// Minimum cosine between a neighbour offset and the wind for downwind spread.
    pub anisotropy_threshold: f64,
    /// Every this many post-branch steps the fire also spreads against the wind.
    pub isotropic_period: usize,
    pub n_wind: usize,
    pub weight_base: f64,
    pub seed: u64,
}

impl Default for FireScenarioConfig {
    fn default() -> Self {
        Self {
            size: 16,
            fuel_density: 0.9,
            pre_branch_steps: 2,
            post_branch_steps: 4,
            anisotropy_threshold: 0.5,
            isotropic_period: 3,
            n_wind: 8,
            weight_base: 2.0,
            seed: 0,
        }
    }
}

impl FireScenarioConfig {
    fn validate(&self) -> Result<()> {
        if self.size < 3 {
            return Err(Error::invalid("fire grid size must be at least 3"));
        }
        if !(self.fuel_density > 0.0 && self.fuel_density <= 1.0) {
            return Err(Error::invalid(format!("fuel density {} not in (0, 1]", self.fuel_density)));
        }
        if self.n_wind == 0 || 360 % self.n_wind != 0 {
            return Err(Error::invalid(format!("{} wind directions do not divide 360 degrees", self.n_wind)));
        }
        if self.isotropic_period == 0 {
            return Err(Error::invalid("isotropic spread period must be positive"));
        }
        if !(self.weight_base > 0.0) || !self.weight_base.is_finite() {
            return Err(Error::invalid("weight base must be positive"));
        }
        if !self.anisotropy_threshold.is_finite() {
            return Err(Error::invalid("anisotropy threshold must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Cell {
    Unburned,
    Burning,
    Burned,
}

const NEIGHBOURS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

#[derive(Clone)]
struct Fire {
    size: usize,
    cells: Vec<Cell>,
}

impl Fire {
    fn ignite(size: usize, at: usize) -> Self {
        let mut cells = vec![Cell::Unburned; size * size];
        cells[at] = Cell::Burning;
        Self { size, cells }
    }

    /// One synchronous step: burning cells ignite every fueled, unburned
    /// neighbour whose offset passes `allowed`, then burn out.
    fn step(&mut self, fuel: &[bool], allowed: impl Fn(isize, isize) -> bool) {
        let n = self.size as isize;
        let mut next = self.cells.clone();
        for r in 0..n {
            for c in 0..n {
                if self.cells[(r * n + c) as usize] != Cell::Burning {
                    continue;
                }
                next[(r * n + c) as usize] = Cell::Burned;
                for &(dr, dc) in &NEIGHBOURS {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= n || cc >= n || !allowed(dr, dc) {
                        continue;
                    }
                    let j = (rr * n + cc) as usize;
                    if fuel[j] && self.cells[j] == Cell::Unburned {
                        next[j] = Cell::Burning;
                    }
                }
            }
        }
        self.cells = next;
    }

    fn footprint(&self) -> BinaryMask {
        BinaryMask::from_fn(self.size, self.size, |r, c| self.cells[r * self.size + c] != Cell::Unburned)
    }
}

fn fuel_map(size: usize, density: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let raw: Vec<bool> = (0..size * size).map(|_| rng.random::<f64>() < density).collect();
    let n = size as isize;
    let mut out = raw.clone();
    for r in 0..n {
        for c in 0..n {
            let (mut on, mut total) = (0, 0);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr >= 0 && cc >= 0 && rr < n && cc < n {
                        total += 1;
                        on += raw[(rr * n + cc) as usize] as usize;
                    }
                }
            }
            let i = (r * n + c) as usize;
            if 2 * on > total {
                out[i] = true;
            } else if 2 * on < total {
                out[i] = false;
            }
        }
    }
    out
}

/// Runs the automaton: an isotropic burn-in, then one future per wind
/// direction `i·360/n_wind` degrees (0 = east, counter-clockwise), weighted
/// proportionally to `weight_base^i`.
pub fn generate_fire_instance(cfg: &FireScenarioConfig) -> Result<ConditionedInstance> {
    cfg.validate()?;
    let size = cfg.size;
    let centre = (size / 2) * size + size / 2;
    let mut fuel = None;
    for attempt in 0..MAX_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed.wrapping_add(attempt), &[Stream::Generator as u64]));
        let candidate = fuel_map(size, cfg.fuel_density, &mut rng);
        if candidate[centre] {
            fuel = Some(candidate);
            break;
        }
    }
    let fuel = fuel.ok_or_else(|| {
        Error::Numerical(format!("no fuel at the ignition point after {MAX_RETRIES} reseeds from seed {}", cfg.seed))
    })?;

    let mut fire = Fire::ignite(size, centre);
    for _ in 0..cfg.pre_branch_steps {
        fire.step(&fuel, |_, _| true);
    }
    let initial = fire.footprint();

    let mut weights: Vec<f64> = (0..cfg.n_wind).map(|i| cfg.weight_base.powi(i as i32)).collect();
    normalize(&mut weights);
    let mut modes = Vec::with_capacity(cfg.n_wind);
    for (i, weight) in weights.into_iter().enumerate() {
        let angle = (i as f64) * std::f64::consts::TAU / cfg.n_wind as f64;
        // rows grow downwards, so north is -row
        let (wx, wy) = (angle.cos(), -angle.sin());
        let downwind = |dr: isize, dc: isize| {
            let norm = ((dr * dr + dc * dc) as f64).sqrt();
            (dc as f64 * wx + dr as f64 * wy) / norm >= cfg.anisotropy_threshold
        };
        let mut branch = fire.clone();
        for s in 0..cfg.post_branch_steps {
            if (s + 1) % cfg.isotropic_period == 0 {
                branch.step(&fuel, |_, _| true);
            } else {
                branch.step(&fuel, downwind);
            }
        }
        modes.push(Mode { mask: branch.footprint(), weight });
    }

    let plane = size * size;
    let mut conditioning = vec![0.0f32; FIRE_CHANNELS * plane];
    for (i, &f) in fuel.iter().enumerate() {
        conditioning[i] = f as u8 as f32;
        conditioning[plane + i] = initial.values()[i] as f32;
    }
    // third channel: elevation placeholder, all zeros
    Ok(ConditionedInstance { conditioning, modes })
}

/// `n` instances; instance `i` uses a seed derived from `(cfg.seed, i)`.
pub fn generate_fire_dataset(n: usize, cfg: &FireScenarioConfig) -> Result<Dataset> {
    cfg.validate()?;
    let instances = (0..n)
        .map(|i| {
            let mut c = cfg.clone();
            c.seed = derive_seed(cfg.seed, &[Stream::Generator as u64, i as u64]);
            generate_fire_instance(&c)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(cfg.size, cfg.size, FIRE_CHANNELS, instances)
}

/// Footprint after the shared burn-in, recovered from the conditioning.
#[cfg(test)]
fn initial_burn(inst: &ConditionedInstance, size: usize) -> BinaryMask {
    let ch = inst.channel(1, size, size);
    BinaryMask::from_fn(size, size, |r, c| ch[r * size + c] > 0.5)
}
