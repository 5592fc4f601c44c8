use std::ffi::{CStr, CString};
use std::ptr;

use divseg_ffi::*;

fn last_error() -> String {
    let p = divseg_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Fire {
    ds: *mut DivsegDataset,
    den: *mut DivsegDenoiser,
}

impl Fire {
    fn new(n: usize, seed: u64) -> Self {
        let mut ds = ptr::null_mut();
        let mut den = ptr::null_mut();
        unsafe {
            assert_eq!(divseg_dataset_generate_fire(n, 16, seed, &mut ds), DivsegStatus::Ok);
            assert_eq!(divseg_denoiser_mixture(ds, &mut den), DivsegStatus::Ok);
        }
        Fire { ds, den }
    }

    fn sample(&self, instance: usize, batch: usize, opts: &DivsegSampleOptions, b: usize) -> Vec<u8> {
        let mut buf = vec![0u8; b * 256];
        let status = unsafe { divseg_sample(self.den, self.ds, instance, batch, opts, b, buf.as_mut_ptr(), buf.len()) };
        assert_eq!(status, DivsegStatus::Ok, "{}", last_error());
        buf
    }

    fn modes(&self, instance: usize) -> (Vec<u8>, usize) {
        let mut n = 0;
        unsafe { assert_eq!(divseg_dataset_mode_count(self.ds, instance, &mut n), DivsegStatus::Ok) };
        let mut all = vec![0u8; n * 256];
        for (k, chunk) in all.chunks_mut(256).enumerate() {
            let status = unsafe { divseg_dataset_mode(self.ds, instance, k, chunk.as_mut_ptr(), 256, ptr::null_mut()) };
            assert_eq!(status, DivsegStatus::Ok);
        }
        (all, n)
    }
}

impl Drop for Fire {
    fn drop(&mut self) {
        unsafe {
            divseg_denoiser_free(self.den);
            divseg_dataset_free(self.ds);
        }
    }
}

#[test]
fn dataset_shape_and_modes() {
    let f = Fire::new(3, 0);
    unsafe {
        assert_eq!(divseg_dataset_len(f.ds), 3);
        let (mut h, mut w, mut c) = (0, 0, 0);
        assert_eq!(divseg_dataset_shape(f.ds, &mut h, &mut w, &mut c), DivsegStatus::Ok);
        assert_eq!((h, w, c), (16, 16, 3));
        let mut n = 0;
        assert_eq!(divseg_dataset_mode_count(f.ds, 0, &mut n), DivsegStatus::Ok);
        assert_eq!(n, 8);
        let mut total = 0.0;
        let mut mask = vec![0u8; 256];
        for k in 0..n {
            let mut wgt = 0.0;
            assert_eq!(divseg_dataset_mode(f.ds, 0, k, mask.as_mut_ptr(), 256, &mut wgt), DivsegStatus::Ok);
            assert!(mask.iter().all(|&v| v <= 1) && mask.contains(&1));
            total += wgt;
        }
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(divseg_dataset_mode_count(f.ds, 3, &mut n), DivsegStatus::Data);
        assert!(last_error().contains("3"));
        assert_eq!(divseg_dataset_mode(f.ds, 0, 0, mask.as_mut_ptr(), 255, ptr::null_mut()), DivsegStatus::BufferSize);
        assert_eq!(divseg_dataset_len(ptr::null()), 0);
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("d.mmseg").to_str().unwrap()).unwrap();
    let probs = [0.2, 0.7];
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(divseg_dataset_generate_flip(4, 12, 3, probs.as_ptr(), 2, &mut ds), DivsegStatus::Ok);
        assert_eq!(divseg_dataset_write(ds, path.as_ptr()), DivsegStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(divseg_dataset_read(path.as_ptr(), &mut back), DivsegStatus::Ok);
        assert_eq!(divseg_dataset_len(back), 4);
        let (mut a, mut b) = (vec![0u8; 144], vec![0u8; 144]);
        for k in 0..4 {
            divseg_dataset_mode(ds, 2, k, a.as_mut_ptr(), 144, ptr::null_mut());
            divseg_dataset_mode(back, 2, k, b.as_mut_ptr(), 144, ptr::null_mut());
            assert_eq!(a, b);
        }
        divseg_dataset_free(back);
        divseg_dataset_free(ds);

        let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(divseg_dataset_read(missing.as_ptr(), &mut out), DivsegStatus::Data);
        assert!(out.is_null());
        assert_eq!(divseg_dataset_read(ptr::null(), &mut out), DivsegStatus::NullPointer);
        let bad = [1.5];
        assert_eq!(divseg_dataset_generate_flip(1, 12, 0, bad.as_ptr(), 1, &mut out), DivsegStatus::Usage);
    }
}

#[test]
fn sampling_is_deterministic_and_scored() {
    let f = Fire::new(2, 1);
    let opts = divseg_sample_options_default();
    assert_eq!(opts.method, DivsegMethod::Naive);
    assert_eq!(opts.steps, 10);
    let a = f.sample(1, 0, &opts, 8);
    assert_eq!(a, f.sample(1, 0, &opts, 8));
    assert_ne!(a, f.sample(1, 1, &opts, 8));
    assert!(a.iter().all(|&v| v <= 1));

    // the mixture denoiser lands on ground-truth modes, so each sample matches one exactly
    let (modes, n) = f.modes(1);
    for sample in a.chunks(256) {
        assert!(modes.chunks(256).any(|m| m == sample));
    }
    let mut score = 0.0;
    let status = unsafe { divseg_hm_iou_star(a.as_ptr(), 8, modes.as_ptr(), n, 16, 16, &mut score) };
    assert_eq!(status, DivsegStatus::Ok);
    assert!(score > 0.0 && score <= 1.0);
    let mut perfect = 0.0;
    unsafe { divseg_hm_iou_star(modes.as_ptr(), n, modes.as_ptr(), n, 16, 16, &mut perfect) };
    assert!((perfect - 1.0).abs() < 1e-12);
}

#[test]
fn diversity_methods_run_and_deactivate() {
    let f = Fire::new(1, 2);
    let naive = f.sample(0, 0, &divseg_sample_options_default(), 6);

    let mut r0 = 0.0;
    unsafe { assert_eq!(divseg_estimate_r0(f.ds, &mut r0), DivsegStatus::Ok) };
    assert!(r0 > 0.0);
    for (method, active, off) in [
        (DivsegMethod::ParticleGuidance, 25.0, 0.0),
        (DivsegMethod::Spell, r0, 0.0),
        (DivsegMethod::Cads, 0.1, 0.0),
    ] {
        let mut opts = divseg_sample_options_default();
        opts.method = method;
        let set = |o: &mut DivsegSampleOptions, v: f64| match method {
            DivsegMethod::ParticleGuidance => o.pg_alpha = v,
            DivsegMethod::Spell => o.spell_radius = v,
            _ => o.cads_gamma = v,
        };
        set(&mut opts, off);
        assert_eq!(f.sample(0, 0, &opts, 6), naive, "{method:?} at zero strength");
        set(&mut opts, active);
        let out = f.sample(0, 0, &opts, 6);
        assert!(out.iter().all(|&v| v <= 1));
    }

    let mut opts = divseg_sample_options_default();
    opts.method = DivsegMethod::Cads;
    opts.cads_gamma = 2.0;
    let mut buf = vec![0u8; 256];
    let status = unsafe { divseg_sample(f.den, f.ds, 0, 0, &opts, 1, buf.as_mut_ptr(), 256) };
    assert_eq!(status, DivsegStatus::Usage);
    assert!(last_error().contains("CADS"));
}

#[test]
fn sampling_argument_errors() {
    let f = Fire::new(1, 0);
    let opts = divseg_sample_options_default();
    let mut buf = vec![0u8; 256];
    unsafe {
        assert_eq!(divseg_sample(f.den, f.ds, 0, 0, &opts, 2, buf.as_mut_ptr(), 256), DivsegStatus::BufferSize);
        assert_eq!(divseg_sample(f.den, f.ds, 5, 0, &opts, 1, buf.as_mut_ptr(), 256), DivsegStatus::Data);
        assert_eq!(divseg_sample(ptr::null(), f.ds, 0, 0, &opts, 1, buf.as_mut_ptr(), 256), DivsegStatus::NullPointer);
        assert!(last_error().contains("denoiser"));
    }
    // a successful call clears the message
    f.sample(0, 0, &opts, 1);
    assert!(divseg_last_error_message().is_null());
}

#[test]
fn coverage_and_metric_errors() {
    let weights: Vec<f64> = (0..8).map(|i| f64::from(1u32 << i)).collect();
    let mut out = 0.0;
    unsafe {
        assert_eq!(divseg_expected_coverage(weights.as_ptr(), 8, &mut out), DivsegStatus::Ok);
        assert!((305.0..=309.0).contains(&out));
        let uniform = [1.0; 8];
        divseg_expected_coverage(uniform.as_ptr(), 8, &mut out);
        assert!((out - 21.742857142857).abs() < 1e-9);
        let many = [1.0; 21];
        assert_eq!(divseg_expected_coverage(many.as_ptr(), 21, &mut out), DivsegStatus::Usage);

        let not_binary = [2u8; 4];
        let ok = [1u8; 4];
        assert_eq!(divseg_hm_iou_star(not_binary.as_ptr(), 1, ok.as_ptr(), 1, 2, 2, &mut out), DivsegStatus::Usage);
        assert_eq!(divseg_hm_iou_star(ok.as_ptr(), 1, ok.as_ptr(), 0, 2, 2, &mut out), DivsegStatus::Data);
    }
}

#[test]
fn mlp_checkpoint_loads() {
    use divseg::datasets::{generate_flip_dataset, FlipSceneConfig};
    use divseg::denoiser::{train_mlp, TrainConfig};

    let dir = tempfile::tempdir().unwrap();
    let cfg = FlipSceneConfig { size: 8, probabilities: vec![0.5], min_side: 3, max_side: 4, ..Default::default() };
    let ds = generate_flip_dataset(2, &cfg).unwrap();
    let (model, _) = train_mlp(&ds, &TrainConfig { steps: 5, hidden: vec![8], ..Default::default() }).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    model.save(&ckpt).unwrap();
    let ds_path = dir.path().join("d.mmseg");
    divseg::datasets::write_dataset(&ds, &ds_path).unwrap();

    let (ckpt, ds_path) = (CString::new(ckpt.to_str().unwrap()).unwrap(), CString::new(ds_path.to_str().unwrap()).unwrap());
    unsafe {
        let mut den = ptr::null_mut();
        let mut dsh = ptr::null_mut();
        assert_eq!(divseg_denoiser_load_mlp(ckpt.as_ptr(), &mut den), DivsegStatus::Ok);
        assert_eq!(divseg_dataset_read(ds_path.as_ptr(), &mut dsh), DivsegStatus::Ok);
        let mut buf = vec![0u8; 3 * 64];
        let opts = divseg_sample_options_default();
        assert_eq!(divseg_sample(den, dsh, 1, 0, &opts, 3, buf.as_mut_ptr(), buf.len()), DivsegStatus::Ok);
        divseg_denoiser_free(den);
        divseg_dataset_free(dsh);
        assert_eq!(divseg_denoiser_load_mlp(ds_path.as_ptr(), &mut den), DivsegStatus::Data);
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(divseg_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
