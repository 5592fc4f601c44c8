//! Evaluation metrics for sets of generated masks against known modes.

use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{class_regions, ConditionedInstance, Mode};
use crate::maskgrid::{iou, BinaryMask};
use crate::rng::derive_seed;
use crate::{Error, Result};

/// Minimum-cost assignment of every row of an `n×m` cost matrix with
/// `n <= m` to a distinct column (Kuhn–Munkres with potentials, O(n²m)).
/// Equivalent to the square problem padded with zero-cost dummy rows.
/// Returns `row -> column`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m && cost.iter().all(|r| r.len() == m), "need a rectangular matrix with rows <= columns");
    // 1-based arrays; p[j] is the row matched to column j
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; m + 1]);
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Matched `(sample, target)` pairs.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of matched IoUs divided by the number of targets.
    pub mean_iou: f64,
}

/// Maximum-IoU matching between samples and targets.
pub fn hungarian_match(samples: &[BinaryMask], targets: &[BinaryMask]) -> Result<Matching> {
    if samples.is_empty() || targets.is_empty() {
        return Err(Error::Empty("matching needs at least one sample and one target".into()));
    }
    let mut ious = vec![vec![0.0; targets.len()]; samples.len()];
    for (i, s) in samples.iter().enumerate() {
        for (j, t) in targets.iter().enumerate() {
            ious[i][j] = iou(s, t)?;
        }
    }
    let pairs: Vec<(usize, usize)> = if samples.len() <= targets.len() {
        let cost: Vec<Vec<f64>> = ious.iter().map(|row| row.iter().map(|v| -v).collect()).collect();
        min_cost_assignment(&cost).into_iter().enumerate().collect()
    } else {
        let cost: Vec<Vec<f64>> = (0..targets.len()).map(|j| ious.iter().map(|row| -row[j]).collect()).collect();
        let mut pairs: Vec<(usize, usize)> = min_cost_assignment(&cost).into_iter().enumerate().map(|(j, i)| (i, j)).collect();
        pairs.sort_unstable();
        pairs
    };
    let total: f64 = pairs.iter().map(|&(i, j)| ious[i][j]).sum();
    Ok(Matching { pairs, mean_iou: total / targets.len() as f64 })
}

/// Targets with exact duplicates removed, first occurrence kept.
pub fn dedup_masks(masks: &[BinaryMask]) -> Vec<BinaryMask> {
    let mut out: Vec<BinaryMask> = Vec::new();
    for m in masks {
        if !out.contains(m) {
            out.push(m.clone());
        }
    }
    out
}

pub fn hm_iou(samples: &[BinaryMask], targets: &[BinaryMask]) -> Result<f64> {
    Ok(hungarian_match(samples, targets)?.mean_iou)
}

pub fn hm_iou_star(samples: &[BinaryMask], targets: &[BinaryMask]) -> Result<f64> {
    hm_iou(samples, &dedup_masks(targets))
}

/// Index of the highest-IoU mode, lowest index on ties.
pub fn nearest_mode(sample: &BinaryMask, modes: &[BinaryMask]) -> Result<usize> {
    if modes.is_empty() {
        return Err(Error::Empty("no modes to assign to".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (k, m) in modes.iter().enumerate() {
        let v = iou(sample, m)?;
        if v > best.1 {
            best = (k, v);
        }
    }
    Ok(best.0)
}

/// Number of distinct deduplicated modes that are nearest to some sample.
pub fn distinct_modes(samples: &[BinaryMask], modes: &[BinaryMask]) -> Result<usize> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples".into()));
    }
    let modes = dedup_masks(modes);
    let mut hit = vec![false; modes.len()];
    for s in samples {
        hit[nearest_mode(s, &modes)?] = true;
    }
    Ok(hit.iter().filter(|&&h| h).count())
}

/// `1 - IoU(sample, ȳ)` where `ȳ` is the set of pixels no mode ever covers.
pub fn image_quality(sample: &BinaryMask, modes: &[BinaryMask]) -> Result<f64> {
    let Some(first) = modes.first() else {
        return Err(Error::Empty("no modes".into()));
    };
    let union = modes[1..].iter().try_fold(first.clone(), |acc, m| acc.union(m))?;
    let forbidden = union.complement();
    let inter = sample.intersection(&forbidden)?.count();
    if inter == 0 {
        return Ok(1.0);
    }
    let uni = sample.union(&forbidden)?.count();
    Ok(1.0 - inter as f64 / uni as f64)
}

pub fn mean_image_quality(samples: &[BinaryMask], modes: &[BinaryMask]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples".into()));
    }
    let total = samples.iter().map(|s| image_quality(s, modes)).sum::<Result<f64>>()?;
    Ok(total / samples.len() as f64)
}

/// `½ Σ |p_i - q_i|` between two categorical distributions on the same support.
pub fn categorical_tvd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::invalid(format!("support mismatch: {} vs {} categories", p.len(), q.len())));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Mean over factors of `|p_c - q_c|` between Bernoulli marginals.
pub fn factorized_tvd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::invalid(format!("support mismatch: {} vs {} factors", p.len(), q.len())));
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

/// Deduplicated modes with merged weights.
pub fn mode_distribution(modes: &[Mode]) -> (Vec<BinaryMask>, Vec<f64>) {
    let mut masks: Vec<BinaryMask> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for m in modes {
        match masks.iter().position(|x| x == &m.mask) {
            Some(k) => weights[k] += m.weight,
            None => {
                masks.push(m.mask.clone());
                weights.push(m.weight);
            }
        }
    }
    (masks, weights)
}

/// Empirical nearest-mode frequencies of `samples` over `modes`.
pub fn empirical_mode_frequencies(samples: &[BinaryMask], modes: &[BinaryMask]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples".into()));
    }
    let mut counts = vec![0.0; modes.len()];
    for s in samples {
        counts[nearest_mode(s, modes)?] += 1.0;
    }
    Ok(counts.into_iter().map(|c| c / samples.len() as f64).collect())
}

/// Categorical TVD between nearest-mode frequencies and the mode weights.
pub fn categorical_calibration(samples: &[BinaryMask], modes: &[Mode]) -> Result<f64> {
    let (masks, weights) = mode_distribution(modes);
    categorical_tvd(&weights, &empirical_mode_frequencies(samples, &masks)?)
}

/// Whether `mask` switches on the class occupying `region`: the IoU of the
/// mask restricted to the region with the region is at least 0.5.
pub fn class_present(mask: &BinaryMask, region: &BinaryMask) -> Result<bool> {
    if region.is_empty() {
        return Ok(false);
    }
    Ok(iou(&mask.intersection(region)?, region)? >= 0.5)
}

/// Factorized TVD for scenes of independently flipped class regions.
pub fn factorized_calibration(samples: &[BinaryMask], modes: &[Mode], regions: &[BinaryMask]) -> Result<f64> {
    if samples.is_empty() || regions.is_empty() {
        return Err(Error::Empty("factorized calibration needs samples and class regions".into()));
    }
    let mut p = vec![0.0; regions.len()];
    let mut q = vec![0.0; regions.len()];
    for (c, region) in regions.iter().enumerate() {
        for m in modes {
            if class_present(&m.mask, region)? {
                p[c] += m.weight;
            }
        }
        for s in samples {
            if class_present(s, region)? {
                q[c] += 1.0 / samples.len() as f64;
            }
        }
    }
    factorized_tvd(&p, &q)
}

/// Mean squared error between the pixelwise mean of `samples` and the
/// weighted pixelwise mean of the modes.
pub fn brier_calibration(samples: &[BinaryMask], modes: &[Mode]) -> Result<f64> {
    let Some(first) = samples.first() else {
        return Err(Error::Empty("no samples".into()));
    };
    if modes.is_empty() {
        return Err(Error::Empty("no modes".into()));
    }
    let n = first.values().len();
    let mut gen = vec![0.0; n];
    for s in samples {
        if s.shape() != first.shape() {
            return Err(Error::ShapeMismatch { left: first.shape(), right: s.shape() });
        }
        for (g, &v) in gen.iter_mut().zip(s.values()) {
            *g += v as f64 / samples.len() as f64;
        }
    }
    let mut gt = vec![0.0; n];
    for m in modes {
        if m.mask.shape() != first.shape() {
            return Err(Error::ShapeMismatch { left: first.shape(), right: m.mask.shape() });
        }
        for (g, &v) in gt.iter_mut().zip(m.mask.values()) {
            *g += m.weight * v as f64;
        }
    }
    Ok(gen.iter().zip(&gt).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64)
}

pub const MAX_EXACT_COVERAGE_MODES: usize = 20;

fn check_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::Empty("no weights".into()));
    }
    if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::invalid("coverage weights must be positive and finite"));
    }
    let total: f64 = weights.iter().sum();
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Expected number of draws until every mode has been seen, by
/// inclusion–exclusion over all nonempty subsets. Weights are normalised.
pub fn expected_coverage(weights: &[f64]) -> Result<f64> {
    if weights.len() > MAX_EXACT_COVERAGE_MODES {
        return Err(Error::invalid(format!(
            "{} modes exceed the exact limit of {MAX_EXACT_COVERAGE_MODES}; use the Monte Carlo estimate",
            weights.len()
        )));
    }
    let p = check_weights(weights)?;
    let n = p.len();
    // subset sums by lowest set bit
    let mut sums = vec![0.0; 1 << n];
    let mut total = 0.0;
    for s in 1usize..1 << n {
        let low = s.trailing_zeros() as usize;
        sums[s] = sums[s & (s - 1)] + p[low];
        let sign = if s.count_ones() % 2 == 1 { 1.0 } else { -1.0 };
        total += sign / sums[s];
    }
    Ok(total)
}

/// Monte Carlo estimate of [`expected_coverage`] over `trials` simulated runs.
pub fn expected_coverage_monte_carlo(weights: &[f64], trials: usize, seed: u64) -> Result<f64> {
    let p = check_weights(weights)?;
    if trials == 0 {
        return Err(Error::invalid("need at least one Monte Carlo trial"));
    }
    let dist = WeightedAliasIndex::new(p.clone()).map_err(|e| Error::invalid(format!("bad weights: {e}")))?;
    const CHUNK: usize = 4096;
    let chunks = trials.div_ceil(CHUNK);
    let total: u64 = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[chunk as u64]));
            let runs = CHUNK.min(trials - chunk * CHUNK);
            let mut seen = vec![false; p.len()];
            let mut draws = 0u64;
            for _ in 0..runs {
                seen.iter_mut().for_each(|s| *s = false);
                let mut missing = p.len();
                while missing > 0 {
                    let k = dist.sample(&mut rng);
                    draws += 1;
                    if !seen[k] {
                        seen[k] = true;
                        missing -= 1;
                    }
                }
            }
            draws
        })
        .sum();
    Ok(total as f64 / trials as f64)
}

/// Expected number of distinct modes among `draws` independent samples.
pub fn expected_distinct(weights: &[f64], draws: usize) -> Result<f64> {
    let p = check_weights(weights)?;
    Ok(p.iter().map(|&w| 1.0 - (1.0 - w).powi(draws as i32)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvdKind {
    #[default]
    Categorical,
    Factorized,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub hm_iou: f64,
    pub hm_iou_star: f64,
    pub distinct_modes: f64,
    pub image_quality: f64,
    pub tvd: f64,
    pub brier: f64,
}

impl InstanceMetrics {
    pub fn mean(items: &[InstanceMetrics]) -> InstanceMetrics {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&InstanceMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        InstanceMetrics {
            hm_iou: sum(|m| m.hm_iou),
            hm_iou_star: sum(|m| m.hm_iou_star),
            distinct_modes: sum(|m| m.distinct_modes),
            image_quality: sum(|m| m.image_quality),
            tvd: sum(|m| m.tvd),
            brier: sum(|m| m.brier),
        }
    }
}

/// All metrics of one sample set for one instance.
pub fn evaluate_instance(
    samples: &[BinaryMask],
    instance: &ConditionedInstance,
    shape: (usize, usize),
    channels: usize,
    tvd: TvdKind,
) -> Result<InstanceMetrics> {
    let modes = instance.masks();
    let tvd = match tvd {
        TvdKind::Categorical => categorical_calibration(samples, &instance.modes)?,
        TvdKind::Factorized => {
            let regions = class_regions(instance, shape.0, shape.1, channels);
            factorized_calibration(samples, &instance.modes, &regions)?
        }
    };
    Ok(InstanceMetrics {
        hm_iou: hm_iou(samples, &modes)?,
        hm_iou_star: hm_iou_star(samples, &modes)?,
        distinct_modes: distinct_modes(samples, &modes)? as f64,
        image_quality: mean_image_quality(samples, &modes)?,
        tvd,
        brier: brier_calibration(samples, &instance.modes)?,
    })
}

/// One CSV row; `instance_id` is the instance index or `ALL`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub instance_id: String,
    pub method: String,
    pub b_total: usize,
    pub metrics: Option<InstanceMetrics>,
    pub wall_ms: u64,
    pub status: String,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
    } else {
        s.to_string()
    }
}

pub const CSV_HEADER: &str = "instance_id,method,b_total,hm_iou,hm_iou_star,distinct_modes,image_quality,tvd,brier,wall_ms,status";

impl ReportRow {
    pub fn to_csv(&self) -> String {
        let metrics = match &self.metrics {
            Some(m) => format!(
                "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                m.hm_iou, m.hm_iou_star, m.distinct_modes, m.image_quality, m.tvd, m.brier
            ),
            None => ",,,,,".to_string(),
        };
        format!(
            "{},{},{},{},{},{}",
            csv_field(&self.instance_id),
            csv_field(&self.method),
            self.b_total,
            metrics,
            self.wall_ms,
            csv_field(&self.status)
        )
    }
}

/// Per-instance rows plus means over successful instances per (method, budget).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
}

impl EvaluationReport {
    pub fn aggregates(&self) -> Vec<ReportRow> {
        let mut keys: Vec<(String, usize)> = Vec::new();
        for r in &self.rows {
            let key = (r.method.clone(), r.b_total);
            if r.instance_id != "ALL" && !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(method, b_total)| {
                let cell: Vec<&ReportRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.instance_id != "ALL" && r.method == method && r.b_total == b_total)
                    .collect();
                let ok: Vec<InstanceMetrics> = cell.iter().filter_map(|r| r.metrics).collect();
                let failed = cell.len() - ok.len();
                ReportRow {
                    instance_id: "ALL".into(),
                    method,
                    b_total,
                    metrics: (!ok.is_empty()).then(|| InstanceMetrics::mean(&ok)),
                    wall_ms: cell.iter().map(|r| r.wall_ms).sum(),
                    status: if failed == 0 { "ok".into() } else { format!("{failed} failed") },
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in self.rows.iter().chain(&self.aggregates()) {
            out.push_str(&r.to_csv());
            out.push('\n');
        }
        out
    }
}
