use super::{check_noise_level, ConditioningRef, Denoiser};
use crate::datasets::Dataset;
use crate::maskgrid::{encode, LatentGrid};
use crate::{Error, Result};

#[derive(Debug, Clone)]
struct Component {
    prototype: LatentGrid,
    log_weight: f64,
}

/// Exact denoiser for a data distribution made of finitely many weighted
/// prototypes per conditioning id.
///
/// For atomic data the optimal denoiser is the posterior mean
/// `Σ_k γ_k y_k` with `γ = softmax_k(log w_k - |x - y_k|² / 2t²)`.
#[derive(Debug, Clone)]
pub struct MixtureDenoiser {
    components: Vec<Vec<Component>>,
    shape: (usize, usize),
}

impl MixtureDenoiser {
    /// `prototypes[id]` lists `(prototype, weight)` pairs for conditioning `id`.
    /// Weights must be positive; they are renormalised to sum to one.
    pub fn new(prototypes: Vec<Vec<(LatentGrid, f64)>>) -> Result<Self> {
        let shape = prototypes
            .iter()
            .flatten()
            .map(|(p, _)| p.shape())
            .next()
            .ok_or_else(|| Error::Empty("mixture denoiser needs at least one prototype".into()))?;
        let mut components = Vec::with_capacity(prototypes.len());
        for (id, list) in prototypes.into_iter().enumerate() {
            if list.is_empty() {
                return Err(Error::Empty(format!("conditioning {id} has no prototypes")));
            }
            let total: f64 = list.iter().map(|(_, w)| *w).sum();
            let mut comps = Vec::with_capacity(list.len());
            for (prototype, w) in list {
                if !(w > 0.0) || !w.is_finite() {
                    return Err(Error::invalid(format!("prototype weight {w} for conditioning {id} must be positive")));
                }
                if prototype.shape() != shape {
                    return Err(Error::ShapeMismatch { left: shape, right: prototype.shape() });
                }
                comps.push(Component { prototype, log_weight: (w / total).ln() });
            }
            components.push(comps);
        }
        Ok(Self { components, shape })
    }

    /// One component per (instance, mode) of the dataset, keyed by instance index.
    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        let prototypes = dataset
            .instances
            .iter()
            .map(|inst| inst.modes.iter().map(|m| (encode(&m.mask), m.weight)).collect())
            .collect();
        Self::new(prototypes)
    }

    pub fn num_conditionings(&self) -> usize {
        self.components.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn components(&self, id: usize) -> Result<&[Component]> {
        self.components.get(id).map(Vec::as_slice).ok_or(Error::UnknownConditioning(id))
    }

    /// Posterior responsibilities `γ_k` of every prototype at `(x, t)`.
    pub fn responsibilities(&self, x: &LatentGrid, t: f64, id: usize) -> Result<Vec<f64>> {
        check_noise_level(t)?;
        let comps = self.components(id)?;
        let inv = 1.0 / (2.0 * t * t);
        let mut logits = Vec::with_capacity(comps.len());
        for comp in comps {
            logits.push(comp.log_weight - x.squared_distance(&comp.prototype)? * inv);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        for l in logits.iter_mut() {
            *l /= total;
        }
        Ok(logits)
    }

    /// `log p(x; t)` of the prototype mixture convolved with `N(0, t² I)`.
    pub fn log_density(&self, x: &LatentGrid, t: f64, id: usize) -> Result<f64> {
        check_noise_level(t)?;
        let comps = self.components(id)?;
        let n = x.len() as f64;
        let mut terms = Vec::with_capacity(comps.len());
        for comp in comps {
            terms.push(comp.log_weight - x.squared_distance(&comp.prototype)? / (2.0 * t * t));
        }
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + terms.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        Ok(lse - 0.5 * n * (2.0 * std::f64::consts::PI * t * t).ln())
    }

    fn mean(&self, comps: &[Component], gamma: &[f64]) -> LatentGrid {
        let (h, w) = self.shape;
        let mut out = vec![0.0; h * w];
        for (comp, &g) in comps.iter().zip(gamma) {
            if g == 0.0 {
                continue;
            }
            for (o, &y) in out.iter_mut().zip(comp.prototype.values()) {
                *o += g * y;
            }
        }
        LatentGrid::from_raw(h, w, out)
    }
}

impl Denoiser for MixtureDenoiser {
    fn denoise(&self, x: &LatentGrid, t: f64, c: ConditioningRef<'_>) -> Result<LatentGrid> {
        let gamma = self.responsibilities(x, t, c.id)?;
        let out = self.mean(self.components(c.id)?, &gamma);
        out.ensure_finite("mixture denoiser output")?;
        Ok(out)
    }

    fn vjp(&self, x: &LatentGrid, t: f64, c: ConditioningRef<'_>, upstream: &LatentGrid) -> Result<LatentGrid> {
        let comps = self.components(c.id)?;
        let gamma = self.responsibilities(x, t, c.id)?;
        let d = self.mean(comps, &gamma);
        // dγ_k/dx = γ_k (y_k - D) / t², so the pullback is
        // (1/t²) Σ_k γ_k <u, y_k> (y_k - D) = (1/t²) (Σ_k γ_k <u,y_k> y_k - <u,D> D).
        let u_d = upstream.dot(&d)?;
        let (h, w) = self.shape;
        let mut out = vec![0.0; h * w];
        for (comp, &g) in comps.iter().zip(&gamma) {
            if g == 0.0 {
                continue;
            }
            let coef = g * (upstream.dot(&comp.prototype)? - u_d);
            for ((o, &y), &dv) in out.iter_mut().zip(comp.prototype.values()).zip(d.values()) {
                *o += coef * (y - dv);
            }
        }
        let inv = 1.0 / (t * t);
        out.iter_mut().for_each(|v| *v *= inv);
        let out = LatentGrid::from_raw(h, w, out);
        out.ensure_finite("mixture vjp")?;
        Ok(out)
    }
}
