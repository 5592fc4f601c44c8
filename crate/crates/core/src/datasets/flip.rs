//! Scenes of disjoint class regions whose classes are flipped independently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ConditionedInstance, Dataset, Mode};
use crate::maskgrid::BinaryMask;
use crate::rng::{derive_seed, Stream};
use crate::{Error, Result};

const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlipSceneConfig {
    pub size: usize,
    /// Per-class probability of being flipped to the positive class.
    pub probabilities: Vec<f64>,
    pub shapes_per_class: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub seed: u64,
}

impl Default for FlipSceneConfig {
    fn default() -> Self {
        Self {
            size: 16,
            probabilities: vec![0.05, 0.25, 0.75, 0.95],
            shapes_per_class: 1,
            min_side: 2,
            max_side: 5,
            seed: 0,
        }
    }
}

impl FlipSceneConfig {
    pub fn classes(&self) -> usize {
        self.probabilities.len()
    }

    fn validate(&self) -> Result<()> {
        if self.probabilities.is_empty() || self.probabilities.len() > 16 {
            return Err(Error::invalid("flip scenes need between 1 and 16 classes"));
        }
        if let Some(p) = self.probabilities.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::invalid(format!("flip probability {p} not in (0, 1)")));
        }
        if self.shapes_per_class == 0 || self.min_side == 0 || self.min_side > self.max_side || self.max_side > self.size {
            return Err(Error::invalid("invalid flip-scene shape parameters"));
        }
        Ok(())
    }
}

/// Places `shapes_per_class` non-overlapping rectangles per class, then
/// enumerates all `2^C` on/off combinations as modes. Mode index bit `c`
/// says whether class `c` is positive.
pub fn generate_flip_instance(cfg: &FlipSceneConfig) -> Result<ConditionedInstance> {
    cfg.validate()?;
    let n = cfg.size;
    let classes = cfg.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[Stream::Generator as u64]));
    let mut occupied = BinaryMask::zeros(n, n);
    let mut regions = vec![BinaryMask::zeros(n, n); classes];
    for region in regions.iter_mut() {
        for _ in 0..cfg.shapes_per_class {
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let h = rng.random_range(cfg.min_side..=cfg.max_side);
                let w = rng.random_range(cfg.min_side..=cfg.max_side);
                let r0 = rng.random_range(0..=n - h);
                let c0 = rng.random_range(0..=n - w);
                let rect = BinaryMask::from_fn(n, n, |r, c| (r0..r0 + h).contains(&r) && (c0..c0 + w).contains(&c));
                if rect.intersection(&occupied)?.is_empty() {
                    occupied = occupied.union(&rect)?;
                    *region = region.union(&rect)?;
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Numerical(format!(
                    "could not place a disjoint region after {PLACEMENT_ATTEMPTS} attempts"
                )));
            }
        }
    }

    let mut modes = Vec::with_capacity(1 << classes);
    for subset in 0..(1usize << classes) {
        let mut mask = BinaryMask::zeros(n, n);
        let mut weight = 1.0;
        for (c, (region, &p)) in regions.iter().zip(&cfg.probabilities).enumerate() {
            if subset & (1 << c) != 0 {
                mask = mask.union(region)?;
                weight *= p;
            } else {
                weight *= 1.0 - p;
            }
        }
        modes.push(Mode { mask, weight });
    }

    let plane = n * n;
    let mut conditioning = vec![0.0f32; classes * plane];
    for (c, region) in regions.iter().enumerate() {
        for (i, &v) in region.values().iter().enumerate() {
            conditioning[c * plane + i] = v as f32;
        }
    }
    Ok(ConditionedInstance { conditioning, modes })
}

pub fn generate_flip_dataset(n: usize, cfg: &FlipSceneConfig) -> Result<Dataset> {
    cfg.validate()?;
    let instances = (0..n)
        .map(|i| {
            let mut c = cfg.clone();
            c.seed = derive_seed(cfg.seed, &[Stream::Generator as u64, i as u64]);
            generate_flip_instance(&c)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(cfg.size, cfg.size, cfg.classes(), instances)
}

/// Class indicator masks recovered from one-hot conditioning channels.
pub fn class_regions(inst: &ConditionedInstance, height: usize, width: usize, channels: usize) -> Vec<BinaryMask> {
    (0..channels)
        .map(|k| {
            let ch = inst.channel(k, height, width);
            BinaryMask::from_fn(height, width, |r, c| ch[r * width + c] > 0.5)
        })
        .collect()
}
