//! Denoisers `D(x; t, c)`: the posterior-mean estimate of the clean mask given
//! a noisy latent at noise level `t` and a conditioning input.
//!
//! Two implementations share the [`Denoiser`] trait: [`MixtureDenoiser`], the
//! exact minimiser of the denoising objective when the data distribution is a
//! finite set of weighted masks, and [`MlpDenoiser`], a small network trained
//! on the same objective.

mod mixture;
mod mlp;

pub use mixture::MixtureDenoiser;
pub use mlp::{
    read_checkpoint, train_mlp, validation_loss, write_checkpoint, MlpDenoiser, NoiseLevel, TrainConfig, TrainReport,
    CHECKPOINT_MAGIC,
};

use crate::maskgrid::LatentGrid;
use crate::{Error, Result};

/// Conditioning handed to a denoiser: a stable input index plus the raw
/// conditioning channels (`C×H×W`, channel-major).
#[derive(Debug, Clone, Copy)]
pub struct ConditioningRef<'a> {
    pub id: usize,
    pub channels: &'a [f32],
}

impl<'a> ConditioningRef<'a> {
    pub fn new(id: usize, channels: &'a [f32]) -> Self {
        Self { id, channels }
    }
}

pub trait Denoiser: Send + Sync {
    /// Clean-mask estimate; output shape equals the input shape.
    fn denoise(&self, x: &LatentGrid, t: f64, c: ConditioningRef<'_>) -> Result<LatentGrid>;

    /// Gradient of `<upstream, D(x; t, c)>` with respect to `x`.
    fn vjp(&self, x: &LatentGrid, t: f64, c: ConditioningRef<'_>, upstream: &LatentGrid) -> Result<LatentGrid>;
}

impl<T: Denoiser + ?Sized> Denoiser for &T {
    fn denoise(&self, x: &LatentGrid, t: f64, c: ConditioningRef<'_>) -> Result<LatentGrid> {
        (**self).denoise(x, t, c)
    }

    fn vjp(&self, x: &LatentGrid, t: f64, c: ConditioningRef<'_>, upstream: &LatentGrid) -> Result<LatentGrid> {
        (**self).vjp(x, t, c, upstream)
    }
}

impl<T: Denoiser + ?Sized> Denoiser for Box<T> {
    fn denoise(&self, x: &LatentGrid, t: f64, c: ConditioningRef<'_>) -> Result<LatentGrid> {
        (**self).denoise(x, t, c)
    }

    fn vjp(&self, x: &LatentGrid, t: f64, c: ConditioningRef<'_>, upstream: &LatentGrid) -> Result<LatentGrid> {
        (**self).vjp(x, t, c, upstream)
    }
}

pub(crate) fn check_noise_level(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!("noise level must be positive and finite, got {t}")));
    }
    Ok(())
}

/// Score of the noised data density, `(D(x; t) - x) / t²`.
pub fn score<D: Denoiser + ?Sized>(model: &D, x: &LatentGrid, t: f64, c: ConditioningRef<'_>) -> Result<LatentGrid> {
    check_noise_level(t)?;
    let d = model.denoise(x, t, c)?;
    Ok(d.sub(x)?.scale(1.0 / (t * t)))
}
