//! C ABI over the `divseg` library.
//!
//! Every fallible function returns a `DivsegStatus`; on failure the message
//! is available from `divseg_last_error_message` on the same thread.
//! Handles come from the `divseg_dataset_*` and `divseg_denoiser_*`
//! constructors and are released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use divseg::datasets::{
    generate_fire_dataset, generate_flip_dataset, read_dataset, write_dataset, Dataset, FireScenarioConfig,
    FlipSceneConfig,
};
use divseg::denoiser::{Denoiser, MixtureDenoiser, MlpDenoiser};
use divseg::diversity::{estimate_r0, CadsConfig, PgConfig, SpellConfig};
use divseg::metrics::{expected_coverage, hm_iou_star};
use divseg::sampler::{sample_batch, Method, NoiseSchedule, SamplerConfig};
use divseg::{BinaryMask, Error, ErrorKind};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivsegStatus {
    Ok = 0,
    /// Invalid parameter or configuration.
    Usage = 1,
    /// Malformed, inconsistent or unreadable data.
    Data = 2,
    /// Non-finite values or another numerical failure.
    Numerical = 3,
    NullPointer = 4,
    /// A caller-provided buffer has the wrong length.
    BufferSize = 5,
    /// Internal panic; the handle involved should not be used again.
    Panic = 6,
}

/// Sampling method selector for `DivsegSampleOptions`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivsegMethod {
    Naive = 0,
    ParticleGuidance = 1,
    Spell = 2,
    Cads = 3,
}

/// Sampler settings. Obtain defaults from `divseg_sample_options_default`.
/// Repellence is within the batch only.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DivsegSampleOptions {
    pub method: DivsegMethod,
    pub steps: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub rho: f64,
    pub s_churn: f64,
    pub seed: u64,
    pub pg_alpha: f64,
    pub spell_radius: f64,
    pub spell_s_min: f64,
    pub cads_gamma: f64,
}

/// Opaque multi-modal dataset.
pub struct DivsegDataset {
    inner: Dataset,
}

/// Opaque denoiser, either the closed-form mixture of a dataset or a trained MLP.
pub struct DivsegDenoiser {
    inner: Box<dyn Denoiser>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: DivsegStatus, msg: impl Into<String>) -> DivsegStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> DivsegStatus {
    let status = match e.kind() {
        ErrorKind::Usage => DivsegStatus::Usage,
        ErrorKind::Data => DivsegStatus::Data,
        ErrorKind::Numerical => DivsegStatus::Numerical,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> DivsegStatus) -> DivsegStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(DivsegStatus::Panic, format!("panic: {msg}"))
        }
    }
}

macro_rules! try_core {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(e) => return from_error(e),
        }
    };
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(DivsegStatus::NullPointer, concat!("`", stringify!($p), "` is null"));
        })+
    };
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, DivsegStatus> {
    if p.is_null() {
        return Err(fail(DivsegStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(DivsegStatus::Usage, "path is not valid UTF-8"))
}

unsafe fn masks_arg(data: *const u8, n: usize, height: usize, width: usize) -> Result<Vec<BinaryMask>, DivsegStatus> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if data.is_null() {
        return Err(fail(DivsegStatus::NullPointer, "mask buffer is null"));
    }
    let plane = height * width;
    let all = slice::from_raw_parts(data, n * plane);
    all.chunks(plane).map(|c| BinaryMask::new(height, width, c.to_vec()).map_err(from_error)).collect()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn divseg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn divseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Synthetic wind-branching fire dataset with `n` instances of `size`x`size`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn divseg_dataset_generate_fire(
    n: usize,
    size: usize,
    seed: u64,
    out: *mut *mut DivsegDataset,
) -> DivsegStatus {
    guard(|| {
        non_null!(out);
        let cfg = FireScenarioConfig { size, seed, ..Default::default() };
        let ds = try_core!(generate_fire_dataset(n, &cfg));
        *out = Box::into_raw(Box::new(DivsegDataset { inner: ds }));
        DivsegStatus::Ok
    })
}

/// Synthetic class-flip dataset; one class per entry of `probabilities`.
///
/// # Safety
/// `probabilities` must point to `n_classes` readable doubles and `out` to
/// writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn divseg_dataset_generate_flip(
    n: usize,
    size: usize,
    seed: u64,
    probabilities: *const f64,
    n_classes: usize,
    out: *mut *mut DivsegDataset,
) -> DivsegStatus {
    guard(|| {
        non_null!(probabilities, out);
        let probabilities = slice::from_raw_parts(probabilities, n_classes).to_vec();
        let cfg = FlipSceneConfig { size, seed, probabilities, ..Default::default() };
        let ds = try_core!(generate_flip_dataset(n, &cfg));
        *out = Box::into_raw(Box::new(DivsegDataset { inner: ds }));
        DivsegStatus::Ok
    })
}

/// Reads an `MMSEG1` file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn divseg_dataset_read(path: *const c_char, out: *mut *mut DivsegDataset) -> DivsegStatus {
    guard(|| {
        non_null!(out);
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let ds = try_core!(read_dataset(path));
        *out = Box::into_raw(Box::new(DivsegDataset { inner: ds }));
        DivsegStatus::Ok
    })
}

/// Writes an `MMSEG1` file.
///
/// # Safety
/// `dataset` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn divseg_dataset_write(dataset: *const DivsegDataset, path: *const c_char) -> DivsegStatus {
    guard(|| {
        non_null!(dataset);
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        try_core!(write_dataset(&(*dataset).inner, path));
        DivsegStatus::Ok
    })
}

/// # Safety
/// `dataset` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn divseg_dataset_free(dataset: *mut DivsegDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of instances, or 0 for NULL.
///
/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn divseg_dataset_len(dataset: *const DivsegDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.len())
}

/// Grid height, width and conditioning channel count.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn divseg_dataset_shape(
    dataset: *const DivsegDataset,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> DivsegStatus {
    guard(|| {
        non_null!(dataset, height, width, channels);
        let d = &(*dataset).inner;
        (*height, *width, *channels) = (d.height, d.width, d.channels);
        DivsegStatus::Ok
    })
}

/// Number of ground-truth modes of `instance`.
///
/// # Safety
/// `dataset` must be a live handle and `count` writable.
#[no_mangle]
pub unsafe extern "C" fn divseg_dataset_mode_count(
    dataset: *const DivsegDataset,
    instance: usize,
    count: *mut usize,
) -> DivsegStatus {
    guard(|| {
        non_null!(dataset, count);
        let d = &(*dataset).inner;
        match d.instances.get(instance) {
            Some(inst) => {
                *count = inst.modes.len();
                DivsegStatus::Ok
            }
            None => from_error(Error::UnknownConditioning(instance)),
        }
    })
}

/// Copies mode `mode` of `instance` into `mask` (`len` must equal
/// height*width, row-major 0/1) and its probability into `weight`.
///
/// # Safety
/// `mask` must point to `len` writable bytes; `weight` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn divseg_dataset_mode(
    dataset: *const DivsegDataset,
    instance: usize,
    mode: usize,
    mask: *mut u8,
    len: usize,
    weight: *mut f64,
) -> DivsegStatus {
    guard(|| {
        non_null!(dataset, mask);
        let d = &(*dataset).inner;
        let Some(inst) = d.instances.get(instance) else {
            return from_error(Error::UnknownConditioning(instance));
        };
        let Some(m) = inst.modes.get(mode) else {
            return fail(DivsegStatus::Usage, format!("instance {instance} has {} modes", inst.modes.len()));
        };
        if len != d.height * d.width {
            return fail(DivsegStatus::BufferSize, format!("mask buffer needs {} bytes, got {len}", d.height * d.width));
        }
        slice::from_raw_parts_mut(mask, len).copy_from_slice(m.mask.values());
        if !weight.is_null() {
            *weight = m.weight;
        }
        DivsegStatus::Ok
    })
}

/// Shield radius estimate over a dataset (mean nearest-mode distance / 2).
///
/// # Safety
/// `dataset` must be a live handle and `r0` writable.
#[no_mangle]
pub unsafe extern "C" fn divseg_estimate_r0(dataset: *const DivsegDataset, r0: *mut f64) -> DivsegStatus {
    guard(|| {
        non_null!(dataset, r0);
        *r0 = try_core!(estimate_r0(&(*dataset).inner)).r0;
        DivsegStatus::Ok
    })
}

/// Exact mixture denoiser over the modes of `dataset`. The dataset handle may
/// be freed afterwards.
///
/// # Safety
/// `dataset` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn divseg_denoiser_mixture(
    dataset: *const DivsegDataset,
    out: *mut *mut DivsegDenoiser,
) -> DivsegStatus {
    guard(|| {
        non_null!(dataset, out);
        let m = try_core!(MixtureDenoiser::from_dataset(&(*dataset).inner));
        *out = Box::into_raw(Box::new(DivsegDenoiser { inner: Box::new(m) }));
        DivsegStatus::Ok
    })
}

/// Loads an MLP checkpoint written by `divseg train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn divseg_denoiser_load_mlp(path: *const c_char, out: *mut *mut DivsegDenoiser) -> DivsegStatus {
    guard(|| {
        non_null!(out);
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let m = try_core!(MlpDenoiser::load(path));
        *out = Box::into_raw(Box::new(DivsegDenoiser { inner: Box::new(m) }));
        DivsegStatus::Ok
    })
}

/// # Safety
/// `denoiser` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn divseg_denoiser_free(denoiser: *mut DivsegDenoiser) {
    if !denoiser.is_null() {
        drop(Box::from_raw(denoiser));
    }
}

#[no_mangle]
pub extern "C" fn divseg_sample_options_default() -> DivsegSampleOptions {
    let s = NoiseSchedule::default();
    let (pg, spell) = (PgConfig::default(), SpellConfig::default());
    DivsegSampleOptions {
        method: DivsegMethod::Naive,
        steps: s.steps,
        sigma_max: s.sigma_max,
        sigma_min: s.sigma_min,
        rho: s.rho,
        s_churn: 0.0,
        seed: 0,
        pg_alpha: pg.alpha,
        spell_radius: spell.r,
        spell_s_min: spell.s_min,
        cads_gamma: 0.0,
    }
}

fn sampler_config(o: &DivsegSampleOptions, batch_size: usize) -> SamplerConfig {
    let method = match o.method {
        DivsegMethod::Naive => Method::Naive,
        DivsegMethod::ParticleGuidance => Method::ParticleGuidance(PgConfig { alpha: o.pg_alpha, ..Default::default() }),
        DivsegMethod::Spell => {
            Method::Spell(SpellConfig { r: o.spell_radius, s_min: o.spell_s_min, ..Default::default() })
        }
        DivsegMethod::Cads => Method::Cads(CadsConfig { gamma: o.cads_gamma }),
    };
    SamplerConfig {
        schedule: NoiseSchedule { sigma_max: o.sigma_max, sigma_min: o.sigma_min, rho: o.rho, steps: o.steps },
        s_churn: o.s_churn,
        method,
        batch_size,
        seed: o.seed,
        ..Default::default()
    }
}

/// Draws batch `batch` of `batch_size` masks for `instance` of `dataset`
/// into `masks` (`len` = batch_size*height*width, row-major 0/1 per sample).
/// Output is a pure function of the options, instance and batch index.
///
/// # Safety
/// Handles must be live, `options` readable and `masks` point to `len`
/// writable bytes.
#[no_mangle]
pub unsafe extern "C" fn divseg_sample(
    denoiser: *const DivsegDenoiser,
    dataset: *const DivsegDataset,
    instance: usize,
    batch: usize,
    options: *const DivsegSampleOptions,
    batch_size: usize,
    masks: *mut u8,
    len: usize,
) -> DivsegStatus {
    guard(|| {
        non_null!(denoiser, dataset, options, masks);
        let d = &(*dataset).inner;
        let plane = d.height * d.width;
        if len != batch_size * plane {
            return fail(DivsegStatus::BufferSize, format!("mask buffer needs {} bytes, got {len}", batch_size * plane));
        }
        let cfg = sampler_config(&*options, batch_size);
        let c = try_core!(d.conditioning(instance));
        let out = try_core!(sample_batch((*denoiser).inner.as_ref(), &cfg, c, (d.height, d.width), instance, batch, None));
        let dst = slice::from_raw_parts_mut(masks, len);
        for (chunk, m) in dst.chunks_mut(plane).zip(&out.masks) {
            chunk.copy_from_slice(m.values());
        }
        DivsegStatus::Ok
    })
}

/// Hungarian-matched IoU of samples against deduplicated targets. Both
/// buffers hold row-major 0/1 masks of `height`x`width`.
///
/// # Safety
/// `samples` must point to `n_samples*height*width` readable bytes and
/// `targets` to `n_targets*height*width`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn divseg_hm_iou_star(
    samples: *const u8,
    n_samples: usize,
    targets: *const u8,
    n_targets: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> DivsegStatus {
    guard(|| {
        non_null!(out);
        if height == 0 || width == 0 {
            return fail(DivsegStatus::Usage, "grid dimensions must be positive");
        }
        let s = match masks_arg(samples, n_samples, height, width) {
            Ok(m) => m,
            Err(e) => return e,
        };
        let t = match masks_arg(targets, n_targets, height, width) {
            Ok(m) => m,
            Err(e) => return e,
        };
        *out = try_core!(hm_iou_star(&s, &t));
        DivsegStatus::Ok
    })
}

/// Expected draws until every mode has been seen (exact, at most 20 modes).
///
/// # Safety
/// `weights` must point to `n` readable doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn divseg_expected_coverage(weights: *const f64, n: usize, out: *mut f64) -> DivsegStatus {
    guard(|| {
        non_null!(weights, out);
        *out = try_core!(expected_coverage(slice::from_raw_parts(weights, n)));
        DivsegStatus::Ok
    })
}
