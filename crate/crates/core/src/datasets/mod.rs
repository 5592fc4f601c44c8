//! Synthetic multi-modal segmentation datasets and their on-disk container.
//!
//! Every instance pairs conditioning channels with a weighted set of valid
//! target masks (modes). Two generators are provided: a toy wind-driven fire
//! spread automaton whose futures branch by wind direction, and a scene of
//! disjoint class regions that are each flipped on or off independently.

mod container;
mod fire;
mod flip;

pub use container::{read_dataset, read_dataset_from, write_dataset, write_dataset_to, MAGIC};
pub use fire::{generate_fire_dataset, generate_fire_instance, FireScenarioConfig};
pub use fire::FIRE_CHANNELS;
pub use flip::{class_regions, generate_flip_dataset, generate_flip_instance, FlipSceneConfig};

use crate::denoiser::ConditioningRef;
use crate::maskgrid::BinaryMask;
use crate::rng::derive_seed;
use crate::{Error, Result};

/// One valid target mask and its probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub mask: BinaryMask,
    pub weight: f64,
}

/// A conditioning input with all of its valid targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedInstance {
    /// `C×H×W` conditioning channels, channel-major.
    pub conditioning: Vec<f32>,
    pub modes: Vec<Mode>,
}

impl ConditionedInstance {
    pub fn masks(&self) -> Vec<BinaryMask> {
        self.modes.iter().map(|m| m.mask.clone()).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.weight).collect()
    }

    /// Distinct masks in first-seen order, with the weights of duplicates merged.
    pub fn unique_modes(&self) -> Vec<Mode> {
        let mut out: Vec<Mode> = Vec::new();
        for m in &self.modes {
            match out.iter_mut().find(|u| u.mask == m.mask) {
                Some(u) => u.weight += m.weight,
                None => out.push(m.clone()),
            }
        }
        out
    }

    /// Channel `k` as an H×W slice.
    pub fn channel(&self, k: usize, height: usize, width: usize) -> &[f32] {
        &self.conditioning[k * height * width..(k + 1) * height * width]
    }
}

/// A collection of instances sharing grid size and channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub instances: Vec<ConditionedInstance>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, channels: usize, instances: Vec<ConditionedInstance>) -> Result<Self> {
        let ds = Self { height, width, channels, instances };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn conditioning(&self, id: usize) -> Result<ConditioningRef<'_>> {
        let inst = self.instances.get(id).ok_or(Error::UnknownConditioning(id))?;
        Ok(ConditioningRef::new(id, &inst.conditioning))
    }

    /// Checks uniform shapes and normalised positive weights.
    pub fn validate(&self) -> Result<()> {
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.conditioning.len() != self.channels * self.height * self.width {
                return Err(Error::invalid(format!(
                    "instance {i}: conditioning has {} values, expected {}",
                    inst.conditioning.len(),
                    self.channels * self.height * self.width
                )));
            }
            if inst.modes.is_empty() {
                return Err(Error::Empty(format!("instance {i} has no modes")));
            }
            let mut total = 0.0;
            for m in &inst.modes {
                if m.mask.shape() != (self.height, self.width) {
                    return Err(Error::ShapeMismatch { left: (self.height, self.width), right: m.mask.shape() });
                }
                if !(m.weight > 0.0) || !m.weight.is_finite() {
                    return Err(Error::invalid(format!("instance {i}: mode weight {} must be positive", m.weight)));
                }
                total += m.weight;
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("instance {i}: mode weights sum to {total}, expected 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Deterministic 80/10/10 split keyed by a hash of the instance index.
pub fn split_of(index: usize) -> Split {
    match derive_seed(0x5eed_5917, &[index as u64]) % 10 {
        0..=7 => Split::Train,
        8 => Split::Validation,
        _ => Split::Test,
    }
}

pub(crate) fn normalize(weights: &mut [f64]) {
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
}
