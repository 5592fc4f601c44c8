use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use divseg::datasets::{read_dataset, write_dataset, FlipSceneConfig, generate_flip_dataset};
use divseg::denoiser::{train_mlp, write_checkpoint, TrainConfig};
use tempfile::TempDir;

fn divseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_divseg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = divseg(args);
    assert!(
        out.status.success(),
        "divseg {args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fire(dir: &TempDir, n: usize, seed: u64) -> PathBuf {
    let path = dir.path().join(format!("fire_{n}_{seed}.mmseg"));
    ok(&["generate-dataset", "--kind", "fire", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", s(&path)]);
    path
}

/// CSV rows as column maps.
fn csv_rows(text: &str) -> Vec<Vec<(String, String)>> {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    lines
        .map(|l| {
            // method labels may be quoted and contain commas
            let mut fields = Vec::new();
            let (mut cur, mut quoted) = (String::new(), false);
            let mut chars = l.chars().peekable();
            while let Some(c) = chars.next() {
                match c {
                    '"' if quoted && chars.peek() == Some(&'"') => {
                        cur.push('"');
                        chars.next();
                    }
                    '"' => quoted = !quoted,
                    ',' if !quoted => fields.push(std::mem::take(&mut cur)),
                    _ => cur.push(c),
                }
            }
            fields.push(cur);
            assert_eq!(fields.len(), header.len(), "row {l}");
            header.iter().cloned().zip(fields).collect()
        })
        .collect()
}

fn field<'a>(row: &'a [(String, String)], name: &str) -> &'a str {
    &row.iter().find(|(k, _)| k == name).unwrap().1
}

#[test]
fn flip_dataset_has_sixteen_modes_per_instance() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("flip.mmseg");
    ok(&["generate-dataset", "--kind", "flip", "--n", "10", "--out", s(&path)]);
    let ds = read_dataset(&path).unwrap();
    assert_eq!(ds.len(), 10);
    assert!(ds.instances.iter().all(|i| i.modes.len() == 16));
}

#[test]
fn generation_is_byte_identical_across_runs() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    assert_eq!(fs::read(fire(&a, 5, 7)).unwrap(), fs::read(fire(&b, 5, 7)).unwrap());
    assert_ne!(fs::read(fire(&a, 5, 7)).unwrap(), fs::read(fire(&a, 5, 8)).unwrap());
}

#[test]
fn missing_out_is_a_usage_error() {
    let out = divseg(&["generate-dataset", "--kind", "fire", "--n", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn unknown_subcommand_and_help() {
    assert_eq!(divseg(&["frobnicate"]).status.code(), Some(1));
    let help = ok(&["--help"]);
    for sub in ["generate-dataset", "train", "sample-eval", "expected-coverage", "export-masks"] {
        assert!(help.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn corrupt_dataset_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.mmseg");
    fs::write(&bad, b"not a dataset").unwrap();
    let out_dir = dir.path().join("out");
    let out = divseg(&["sample-eval", "--dataset", s(&bad), "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    let missing = dir.path().join("missing.mmseg");
    assert_eq!(divseg(&["export-masks", "--dataset", s(&missing), "--out-dir", s(&out_dir)]).status.code(), Some(2));
}

#[test]
fn naive_sampling_finds_some_but_not_all_modes() {
    let dir = TempDir::new().unwrap();
    let ds = fire(&dir, 6, 0);
    let out_dir = dir.path().join("naive");
    let stdout = ok(&["sample-eval", "--dataset", s(&ds), "--method", "naive", "--batch-size", "8", "--out-dir", s(&out_dir)]);
    assert!(stdout.contains("naive"));
    let rows = csv_rows(&fs::read_to_string(out_dir.join("report.csv")).unwrap());
    assert_eq!(rows.len(), 7);
    let all: Vec<_> = rows.iter().filter(|r| field(r, "instance_id") == "ALL").collect();
    assert_eq!(all.len(), 1);
    let distinct: f64 = field(all[0], "distinct_modes").parse().unwrap();
    assert!(distinct > 1.0 && distinct < 8.0, "distinct modes {distinct}");
    assert_eq!(field(all[0], "wall_ms"), "0");
    assert!(rows.iter().all(|r| field(r, "status") == "ok"));
    assert!(out_dir.join("manifest.json").exists());
}

#[test]
fn method_grid_gives_one_block_per_method_and_reruns_match() {
    let dir = TempDir::new().unwrap();
    let ds = fire(&dir, 4, 3);
    let methods = ["naive", "spell:r=r0,s_min=40", "pg:alpha=25"];
    let run = |name: &str, jobs: &str| {
        let out_dir = dir.path().join(name);
        let mut args = vec!["sample-eval", "--dataset", s(&ds), "--batches", "2", "--seed", "5", "--jobs", jobs];
        for m in &methods {
            args.extend(["--method", m]);
        }
        let out_dir_str = out_dir.to_str().unwrap().to_string();
        args.extend(["--out-dir", &out_dir_str]);
        ok(&args);
        fs::read_to_string(out_dir.join("report.csv")).unwrap()
    };
    let first = run("a", "1");
    let rows = csv_rows(&first);
    for m in &methods {
        let block: Vec<_> = rows.iter().filter(|r| field(r, "method").starts_with(m.split(':').next().unwrap())).collect();
        // 4 instances x 2 batch budgets, plus one aggregate per budget
        assert_eq!(block.len(), 10, "{m}");
        let budgets: Vec<&str> = block.iter().map(|r| field(r, "b_total")).collect();
        assert!(budgets.contains(&"8") && budgets.contains(&"16"));
    }
    assert_eq!(first, run("b", "1"));
    assert_eq!(first, run("c", "4"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 5);
    assert!(manifest["r0"]["value"].as_f64().unwrap() > 0.0);
    assert_eq!(manifest["methods"].as_array().unwrap().len(), 3);
}

#[test]
fn config_file_with_flag_override() {
    let dir = TempDir::new().unwrap();
    let ds = fire(&dir, 3, 1);
    let cfg_path = dir.path().join("exp.json");
    let cfg = serde_json::json!({ "dataset": ds, "methods": ["naive", "cads:gamma=0.1"], "batch_size": 4, "seed": 9 });
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out_dir = dir.path().join("out");
    ok(&["sample-eval", "--config", s(&cfg_path), "--batch-size", "6", "--out-dir", s(&out_dir)]);
    let rows = csv_rows(&fs::read_to_string(out_dir.join("report.csv")).unwrap());
    assert!(rows.iter().all(|r| field(r, "b_total") == "6"));
    assert_eq!(rows.iter().filter(|r| field(r, "instance_id") == "ALL").count(), 2);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 9);
    assert_eq!(manifest["config"]["batch_size"], 6);
}

#[test]
fn dumped_masks_follow_the_naming_scheme() {
    let dir = TempDir::new().unwrap();
    let ds = fire(&dir, 2, 0);
    let out_dir = dir.path().join("out");
    ok(&[
        "sample-eval", "--dataset", s(&ds), "--method", "naive", "--batch-size", "3", "--batches", "2", "--dump-masks",
        "--out-dir", s(&out_dir),
    ]);
    let mut names: Vec<String> =
        fs::read_dir(out_dir.join("masks")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.len(), 2 * 2 * 3);
    assert!(names.contains(&"0_naive_0_0.pgm".to_string()));
    assert!(names.contains(&"1_naive_1_2.pgm".to_string()));
    let img = image::open(out_dir.join("masks/1_naive_1_2.pgm")).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (16, 16));
    assert!(img.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
}

#[test]
fn bad_method_and_pruning_without_steps_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let ds = fire(&dir, 1, 0);
    let out_dir = dir.path().join("out");
    let bad = divseg(&["sample-eval", "--dataset", s(&ds), "--method", "pg:alpha=oops", "--out-dir", s(&out_dir)]);
    assert_eq!(bad.status.code(), Some(1));
    let late = divseg(&["sample-eval", "--dataset", s(&ds), "--method", "cluster:init=16,k=4,after=11", "--out-dir", s(&out_dir)]);
    assert_eq!(late.status.code(), Some(1));
}

#[test]
fn clustering_runs_end_to_end() {
    let dir = TempDir::new().unwrap();
    let ds = fire(&dir, 2, 4);
    let out_dir = dir.path().join("out");
    ok(&["sample-eval", "--dataset", s(&ds), "--method", "cluster:init=16,k=4,after=2,dist=l2", "--batch-size", "4", "--out-dir", s(&out_dir)]);
    let rows = csv_rows(&fs::read_to_string(out_dir.join("report.csv")).unwrap());
    assert!(rows.iter().all(|r| field(r, "b_total") == "4" && field(r, "status") == "ok"));
}

fn coverage(args: &[&str]) -> f64 {
    let mut full = vec!["expected-coverage"];
    full.extend(args);
    let out = ok(&full);
    let line = out.lines().find(|l| l.starts_with("exact")).unwrap();
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn expected_coverage_constants() {
    let doubling = coverage(&["--weights", "1,2,4,8,16,32,64,128"]);
    assert!((305.0..=309.0).contains(&doubling), "{doubling}");
    let uniform = coverage(&["--uniform", "8"]);
    let harmonic: f64 = 8.0 * (1..=8).map(|k| 1.0 / k as f64).sum::<f64>();
    assert!((uniform - harmonic).abs() < 1e-3);
    assert!((coverage(&["--weights", "1,1,1,1,1,1,1,1"]) - uniform).abs() < 1e-9);

    let mc = ok(&["expected-coverage", "--uniform", "8", "--monte-carlo", "200000", "--seed", "1"]);
    let est: f64 = mc.lines().find(|l| l.starts_with("monte_carlo")).unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((est - harmonic).abs() / harmonic < 0.02);
}

#[test]
fn expected_coverage_beyond_exact_limit_needs_monte_carlo() {
    let many = vec!["1"; 21].join(",");
    let out = divseg(&["expected-coverage", "--weights", &many]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("monte-carlo"));
    let est = ok(&["expected-coverage", "--weights", &many, "--monte-carlo", "20000"]);
    assert!(est.contains("monte_carlo"));
    assert_eq!(divseg(&["expected-coverage"]).status.code(), Some(1));
}

#[test]
fn expected_coverage_per_dataset_instance() {
    let dir = TempDir::new().unwrap();
    let ds = fire(&dir, 2, 0);
    let out = ok(&["expected-coverage", "--dataset", s(&ds)]);
    assert_eq!(out.lines().filter(|l| l.starts_with("instance")).count(), 2);
}

fn two_mode_dataset(dir: &TempDir) -> PathBuf {
    let cfg = FlipSceneConfig { size: 8, probabilities: vec![0.5], min_side: 3, max_side: 4, ..Default::default() };
    let ds = generate_flip_dataset(4, &cfg).unwrap();
    let path = dir.path().join("two.mmseg");
    write_dataset(&ds, &path).unwrap();
    path
}

#[test]
fn zero_step_training_writes_the_initial_model() {
    let dir = TempDir::new().unwrap();
    let ds_path = two_mode_dataset(&dir);
    let ckpt = dir.path().join("init.ckpt");
    ok(&["train", "--dataset", s(&ds_path), "--out", s(&ckpt), "--steps", "0", "--hidden", "16,16", "--seed", "3"]);
    let ds = read_dataset(&ds_path).unwrap();
    let cfg = TrainConfig { steps: 0, hidden: vec![16, 16], seed: 3, ..Default::default() };
    let (model, _) = train_mlp(&ds, &cfg).unwrap();
    let mut expected = Vec::new();
    write_checkpoint(&model, &mut expected).unwrap();
    assert_eq!(fs::read(&ckpt).unwrap(), expected);
    assert!(ckpt.with_extension("report.json").exists());
}

#[test]
fn training_lowers_validation_loss_and_checkpoint_samples() {
    let dir = TempDir::new().unwrap();
    let ds_path = two_mode_dataset(&dir);
    let ckpt = dir.path().join("mlp.ckpt");
    let out = ok(&["train", "--dataset", s(&ds_path), "--out", s(&ckpt), "--steps", "400", "--hidden", "64,64", "--lr", "1e-3"]);
    let value = |prefix: &str| -> f64 {
        let line = out.lines().find(|l| l.starts_with(prefix)).unwrap();
        line.trim_start_matches(prefix).split_whitespace().next().unwrap().parse().unwrap()
    };
    let (initial, best) = (value("initial validation loss"), value("best validation loss"));
    assert!(best < initial, "{best} vs {initial}");

    let out_dir = dir.path().join("eval");
    ok(&["sample-eval", "--dataset", s(&ds_path), "--checkpoint", s(&ckpt), "--batch-size", "4", "--out-dir", s(&out_dir)]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["denoiser"], "mlp");

    // a checkpoint for another grid size is rejected
    let fire_ds = fire(&dir, 1, 0);
    let mismatch = divseg(&["sample-eval", "--dataset", s(&fire_ds), "--checkpoint", s(&ckpt), "--out-dir", s(&out_dir)]);
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn mu_sweep_prints_a_selection_table() {
    let dir = TempDir::new().unwrap();
    let ds_path = two_mode_dataset(&dir);
    let ckpt = dir.path().join("sweep.ckpt");
    let out = ok(&[
        "train", "--dataset", s(&ds_path), "--out", s(&ckpt), "--steps", "50", "--hidden", "16", "--mu-sweep", "-0.5,0.5",
        "--sweep-samples", "8",
    ]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "mu_train\tbest_val_loss\ttvd");
    assert!(lines[1].starts_with("-0.5\t") && lines[2].starts_with("0.5\t"));
    assert!(lines.iter().any(|l| l.starts_with("selected mu_train=")));
    assert!(ckpt.exists());
}

#[test]
fn export_masks_writes_readable_pgms() {
    let dir = TempDir::new().unwrap();
    let ds = fire(&dir, 2, 0);
    let out_dir = dir.path().join("modes");
    ok(&["export-masks", "--dataset", s(&ds), "--out-dir", s(&out_dir), "--instance", "1"]);
    let n = fs::read_dir(&out_dir).unwrap().count();
    assert_eq!(n, 8);
    let img = image::open(out_dir.join("1_mode0.pgm")).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (16, 16));
    let bad = divseg(&["export-masks", "--dataset", s(&ds), "--out-dir", s(&out_dir), "--instance", "5"]);
    assert_ne!(bad.status.code(), Some(0));
}
