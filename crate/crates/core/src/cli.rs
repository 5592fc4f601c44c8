//! The `divseg` experiment runner.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datasets::{
    generate_fire_dataset, generate_flip_dataset, read_dataset, split_of, write_dataset, Dataset, FireScenarioConfig,
    FlipSceneConfig, Split,
};
use crate::denoiser::{train_mlp, Denoiser, MixtureDenoiser, MlpDenoiser, TrainConfig};
use crate::diversity::{
    estimate_r0, BandwidthRule, CadsConfig, GuidanceSteps, PgConfig, RepellencePolicy, SpellConfig,
};
use crate::maskgrid::{write_mask_pgm, BinaryMask, LatentGrid};
use crate::metrics::{
    evaluate_instance, expected_coverage, expected_coverage_monte_carlo, mode_distribution, EvaluationReport,
    InstanceMetrics, ReportRow, TvdKind, MAX_EXACT_COVERAGE_MODES,
};
use crate::pruning::{prune_and_finish, Distance, PruneConfig};
use crate::sampler::{sample_batch, Method, NoiseSchedule, SamplerConfig};
use crate::{Error, ErrorKind};

#[derive(Debug, Parser)]
#[command(name = "divseg", version, about = "Diversity-biased sampling for ambiguous binary segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-modal dataset (MMSEG1 file).
    GenerateDataset(GenerateArgs),
    /// Train the MLP denoiser on a dataset.
    Train(TrainArgs),
    /// Sample every instance with every method and write a CSV report.
    SampleEval(SampleEvalArgs),
    /// Expected number of draws until every mode has been seen.
    ExpectedCoverage(CoverageArgs),
    /// Write the ground-truth modes of a dataset as PGM images.
    ExportMasks(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Fire,
    Flip,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub kind: DatasetKind,
    /// Number of instances.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Grid side length.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Flip scenes: per-class flip probabilities.
    #[arg(long, value_delimiter = ',')]
    pub probabilities: Option<Vec<f64>>,
    /// Fire scenarios: number of wind directions.
    #[arg(long)]
    pub n_wind: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TvdArg {
    Categorical,
    Factorized,
}

impl From<TvdArg> for TvdKind {
    fn from(v: TvdArg) -> Self {
        match v {
            TvdArg::Categorical => TvdKind::Categorical,
            TvdArg::Factorized => TvdKind::Factorized,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub mu_train: Option<f64>,
    #[arg(long)]
    pub sigma_train: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train once per value of mu_train and keep the one whose naive samples
    /// best match the mode weights on validation instances.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub mu_sweep: Option<Vec<f64>>,
    /// Samples per validation instance for the sweep.
    #[arg(long, default_value_t = 64)]
    pub sweep_samples: usize,
    #[arg(long, value_enum, default_value = "categorical")]
    pub tvd: TvdArg,
}

#[derive(Debug, Args)]
pub struct SampleEvalArgs {
    /// JSON experiment config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// MLP checkpoint; without it the exact mixture denoiser of the dataset is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Method spec, repeatable: naive | pg:alpha=25,steps=all|first,policy=batch|bank|batch_and_bank,bandwidth=squared_median|median
    /// | spell:r=r0|r0*F|R,s_min=40,policy=.. | cads:gamma=G | cluster:init=64,k=8,after=0,dist=chamfer|l2
    #[arg(long = "method")]
    pub methods: Vec<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Batches per instance; the memory bank persists across them.
    #[arg(long)]
    pub batches: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of schedule steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub s_churn: Option<f64>,
    /// Apply diversity hooks at the Heun correction evaluation.
    #[arg(long)]
    pub hooks_at_correction: Option<bool>,
    /// Evaluate only the first N instances.
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Write every sample as `{instance}_{method}_{batch}_{i}.pgm`.
    #[arg(long)]
    pub dump_masks: bool,
    #[arg(long, value_enum)]
    pub tvd: Option<TvdArg>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Record wall-clock milliseconds (otherwise 0, keeping reports reproducible).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["weights", "uniform", "dataset"])))]
pub struct CoverageArgs {
    /// Comma-separated mode weights (normalised internally).
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    /// Number of equally likely modes.
    #[arg(long)]
    pub uniform: Option<usize>,
    /// Per-instance coverage of a dataset's mode weights.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Also estimate by simulation with this many trials.
    #[arg(long)]
    pub monte_carlo: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Only this instance.
    #[arg(long)]
    pub instance: Option<usize>,
}

/// Failure of a subcommand.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{}: {e}", kind_label(e.kind())),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            },
        }
    }
}

fn kind_label(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Usage => "usage error",
        ErrorKind::Data => "data error",
        ErrorKind::Numerical => "numerical error",
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Output goes to `out`, diagnostics to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("divseg: {e}");
            e.exit_code()
        }
    }
}

pub fn main_entry() -> ExitCode {
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    ExitCode::from(run(std::env::args_os(), &mut lock))
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::GenerateDataset(a) => cmd_generate_dataset(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::SampleEval(a) => cmd_sample_eval(&a, out),
        Command::ExpectedCoverage(a) => cmd_expected_coverage(&a, out),
        Command::ExportMasks(a) => cmd_export_masks(&a, out),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn require_file(path: &Path) -> CliResult<()> {
    if !path.is_file() {
        return Err(Error::Io(io::Error::new(io::ErrorKind::NotFound, format!("{} does not exist", path.display()))).into());
    }
    Ok(())
}

pub fn cmd_generate_dataset(a: &GenerateArgs, out: &mut dyn Write) -> CliResult<()> {
    let ds = match a.kind {
        DatasetKind::Fire => {
            let mut cfg: FireScenarioConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => FireScenarioConfig::default(),
            };
            cfg.seed = a.seed;
            if let Some(s) = a.size {
                cfg.size = s;
            }
            if let Some(w) = a.n_wind {
                cfg.n_wind = w;
            }
            generate_fire_dataset(a.n, &cfg)?
        }
        DatasetKind::Flip => {
            let mut cfg: FlipSceneConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => FlipSceneConfig::default(),
            };
            cfg.seed = a.seed;
            if let Some(s) = a.size {
                cfg.size = s;
            }
            if let Some(p) = &a.probabilities {
                cfg.probabilities = p.clone();
            }
            generate_flip_dataset(a.n, &cfg)?
        }
    };
    write_dataset(&ds, &a.out)?;
    let modes: usize = ds.instances.iter().map(|i| i.modes.len()).sum();
    writeln!(
        out,
        "wrote {} instances ({}x{}, {} channels, {modes} modes) to {}",
        ds.len(),
        ds.height,
        ds.width,
        ds.channels,
        a.out.display()
    )?;
    Ok(())
}

fn validation_instances(ds: &Dataset) -> Vec<usize> {
    let val: Vec<usize> = (0..ds.len()).filter(|&i| split_of(i) == Split::Validation).collect();
    if ds.len() < 4 || val.is_empty() {
        (0..ds.len()).collect()
    } else {
        val
    }
}

/// Mean TVD of naive samples against the mode weights over `instances`.
pub fn sampling_tvd<D: Denoiser + ?Sized>(
    model: &D,
    ds: &Dataset,
    instances: &[usize],
    samples: usize,
    seed: u64,
    tvd: TvdKind,
) -> crate::Result<f64> {
    let cfg = SamplerConfig { batch_size: samples, seed, ..Default::default() };
    let mut total = 0.0;
    for &i in instances {
        let batch = sample_batch(model, &cfg, ds.conditioning(i)?, (ds.height, ds.width), i, 0, None)?;
        total += evaluate_instance(&batch.masks, &ds.instances[i], (ds.height, ds.width), ds.channels, tvd)?.tvd;
    }
    Ok(total / instances.len().max(1) as f64)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    require_file(&a.dataset)?;
    let ds = read_dataset(&a.dataset)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = a.$field.clone() {
                cfg.$field = v;
            }
        };
    }
    set!(steps);
    set!(batch_size);
    set!(learning_rate);
    set!(mu_train);
    set!(sigma_train);
    set!(hidden);
    set!(eval_every);
    set!(seed);

    let report_path = a.out.with_extension("report.json");
    match &a.mu_sweep {
        None => {
            let (model, report) = train_mlp(&ds, &cfg)?;
            let initial = report.validation.first().map(|v| v.1).unwrap_or(f64::NAN);
            writeln!(out, "initial validation loss {initial:.6}")?;
            writeln!(out, "best validation loss {:.6} at step {}", report.best_validation_loss, report.best_step)?;
            model.save(&a.out)?;
            let summary = json!({ "config": cfg, "validation": report.validation, "best_step": report.best_step });
            fs::write(&report_path, serde_json::to_string_pretty(&summary).expect("serialisable"))?;
        }
        Some(mus) => {
            if mus.is_empty() {
                return Err(usage("--mu-sweep needs at least one value"));
            }
            let val = validation_instances(&ds);
            writeln!(out, "mu_train\tbest_val_loss\ttvd")?;
            let mut rows = Vec::new();
            let mut best: Option<(f64, f64, MlpDenoiser)> = None;
            for &mu in mus {
                let c = TrainConfig { mu_train: mu, ..cfg.clone() };
                let (model, report) = train_mlp(&ds, &c)?;
                let tvd = sampling_tvd(&model, &ds, &val, a.sweep_samples, c.seed, a.tvd.into())?;
                writeln!(out, "{mu}\t{:.6}\t{tvd:.6}", report.best_validation_loss)?;
                rows.push(json!({ "mu_train": mu, "best_validation_loss": report.best_validation_loss, "tvd": tvd }));
                if best.as_ref().is_none_or(|b| tvd < b.1) {
                    best = Some((mu, tvd, model));
                }
            }
            let (mu, tvd, model) = best.expect("nonempty sweep");
            writeln!(out, "selected mu_train={mu} (tvd {tvd:.6})")?;
            model.save(&a.out)?;
            let summary = json!({ "config": cfg, "sweep": rows, "selected_mu_train": mu });
            fs::write(&report_path, serde_json::to_string_pretty(&summary).expect("serialisable"))?;
        }
    }
    writeln!(out, "wrote {}", a.out.display())?;
    Ok(())
}

/// Shield radius given literally or relative to the dataset estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Radius {
    Fixed(f64),
    R0(f64),
}

impl fmt::Display for Radius {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Radius::Fixed(r) => write!(f, "{r}"),
            Radius::R0(k) if *k == 1.0 => write!(f, "r0"),
            Radius::R0(k) => write!(f, "r0*{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MethodSpec {
    Naive,
    Pg(PgConfig),
    Spell { radius: Radius, s_min: f64, policy: RepellencePolicy },
    Cads(CadsConfig),
    /// Pruning; `k = None` keeps as many samples as the batch size.
    Cluster { b_init: usize, k: Option<usize>, after: usize, distance: Distance },
}

/// A method spec with the shield radius and cluster count filled in.
#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedMethod {
    Sample(Method),
    Cluster(PruneConfig),
}

fn policy_name(p: RepellencePolicy) -> &'static str {
    match p {
        RepellencePolicy::Batch => "batch",
        RepellencePolicy::Bank => "bank",
        RepellencePolicy::BatchAndBank => "batch_and_bank",
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
}

fn parse_policy(v: &str) -> Result<RepellencePolicy, String> {
    match v {
        "batch" => Ok(RepellencePolicy::Batch),
        "bank" => Ok(RepellencePolicy::Bank),
        "batch_and_bank" | "both" => Ok(RepellencePolicy::BatchAndBank),
        _ => Err(format!("unknown policy {v:?}")),
    }
}

impl std::str::FromStr for MethodSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (name, rest) = s.split_once(':').unwrap_or((s, ""));
        let params: Vec<(&str, &str)> = rest
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.split_once('=').map(|(k, v)| (k.trim(), v.trim())).ok_or_else(|| format!("expected key=value, got {p:?}")))
            .collect::<Result<_, _>>()?;
        let unknown = |k: &str| Err(format!("unknown parameter {k:?} for method {name}"));
        match name.trim() {
            "naive" => match params.first() {
                None => Ok(MethodSpec::Naive),
                Some((k, _)) => unknown(k),
            },
            "pg" => {
                let mut c = PgConfig::default();
                for (k, v) in params {
                    match k {
                        "alpha" => c.alpha = parse_num(k, v)?,
                        "steps" => {
                            c.steps = match v {
                                "all" => GuidanceSteps::All,
                                "first" => GuidanceSteps::First,
                                _ => return Err(format!("unknown guidance steps {v:?}")),
                            }
                        }
                        "policy" => c.policy = parse_policy(v)?,
                        "bandwidth" => {
                            c.bandwidth = match v {
                                "squared_median" => BandwidthRule::SquaredMedian,
                                "median" => BandwidthRule::Median,
                                _ => return Err(format!("unknown bandwidth rule {v:?}")),
                            }
                        }
                        _ => return unknown(k),
                    }
                }
                Ok(MethodSpec::Pg(c))
            }
            "spell" => {
                let d = SpellConfig::default();
                let (mut radius, mut s_min, mut policy) = (Radius::R0(1.0), d.s_min, d.policy);
                for (k, v) in params {
                    match k {
                        "r" => {
                            radius = if v == "r0" {
                                Radius::R0(1.0)
                            } else if let Some(f) = v.strip_prefix("r0*") {
                                Radius::R0(parse_num(k, f)?)
                            } else {
                                Radius::Fixed(parse_num(k, v)?)
                            }
                        }
                        "s_min" => s_min = if v == "inf" { f64::INFINITY } else { parse_num(k, v)? },
                        "policy" => policy = parse_policy(v)?,
                        _ => return unknown(k),
                    }
                }
                Ok(MethodSpec::Spell { radius, s_min, policy })
            }
            "cads" => {
                let mut c = CadsConfig::default();
                for (k, v) in params {
                    match k {
                        "gamma" => c.gamma = parse_num(k, v)?,
                        _ => return unknown(k),
                    }
                }
                Ok(MethodSpec::Cads(c))
            }
            "cluster" => {
                let d = PruneConfig::default();
                let (mut b_init, mut k_keep, mut after, mut distance) = (d.b_init, None, d.prune_after_step, d.distance);
                for (k, v) in params {
                    match k {
                        "init" => b_init = parse_num(k, v)?,
                        "k" => k_keep = Some(parse_num(k, v)?),
                        "after" => after = parse_num(k, v)?,
                        "dist" => {
                            distance = match v {
                                "chamfer" => Distance::Chamfer,
                                "l2" => Distance::L2,
                                _ => return Err(format!("unknown distance {v:?}")),
                            }
                        }
                        _ => return unknown(k),
                    }
                }
                Ok(MethodSpec::Cluster { b_init, k: k_keep, after, distance })
            }
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodSpec::Naive => write!(f, "naive"),
            MethodSpec::Pg(c) => write!(
                f,
                "pg:alpha={},steps={},policy={},bandwidth={}",
                c.alpha,
                if c.steps == GuidanceSteps::All { "all" } else { "first" },
                policy_name(c.policy),
                if c.bandwidth == BandwidthRule::SquaredMedian { "squared_median" } else { "median" }
            ),
            MethodSpec::Spell { radius, s_min, policy } => {
                write!(f, "spell:r={radius},s_min={},policy={}", if s_min.is_infinite() { "inf".to_string() } else { s_min.to_string() }, policy_name(*policy))
            }
            MethodSpec::Cads(c) => write!(f, "cads:gamma={}", c.gamma),
            MethodSpec::Cluster { b_init, k, after, distance } => {
                write!(f, "cluster:init={b_init},")?;
                if let Some(k) = k {
                    write!(f, "k={k},")?;
                }
                write!(f, "after={after},dist={}", if *distance == Distance::Chamfer { "chamfer" } else { "l2" })
            }
        }
    }
}

impl MethodSpec {
    pub fn needs_r0(&self) -> bool {
        matches!(self, MethodSpec::Spell { radius: Radius::R0(_), .. })
    }

    pub fn resolve(&self, r0: Option<f64>, batch_size: usize) -> CliResult<ResolvedMethod> {
        Ok(match self {
            MethodSpec::Naive => ResolvedMethod::Sample(Method::Naive),
            MethodSpec::Pg(c) => ResolvedMethod::Sample(Method::ParticleGuidance(c.clone())),
            MethodSpec::Cads(c) => ResolvedMethod::Sample(Method::Cads(c.clone())),
            MethodSpec::Spell { radius, s_min, policy } => {
                let r = match radius {
                    Radius::Fixed(r) => *r,
                    Radius::R0(k) => k * r0.ok_or_else(|| usage("shield radius r0 was not estimated"))?,
                };
                ResolvedMethod::Sample(Method::Spell(SpellConfig { r, s_min: *s_min, policy: *policy }))
            }
            MethodSpec::Cluster { b_init, k, after, distance } => ResolvedMethod::Cluster(PruneConfig {
                b_init: *b_init,
                k: k.unwrap_or(batch_size),
                prune_after_step: *after,
                distance: *distance,
                ..PruneConfig::default()
            }),
        })
    }
}

/// Everything that determines the content of a sample-eval report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub methods: Vec<String>,
    pub batch_size: usize,
    pub batches: usize,
    pub seed: u64,
    pub schedule: NoiseSchedule,
    pub s_churn: f64,
    pub hooks_at_correction: bool,
    pub instances: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub dump_masks: bool,
    pub tvd: TvdKind,
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            checkpoint: None,
            methods: vec!["naive".into()],
            batch_size: 8,
            batches: 1,
            seed: 0,
            schedule: NoiseSchedule::default(),
            s_churn: 0.0,
            hooks_at_correction: true,
            instances: None,
            out_dir: None,
            dump_masks: false,
            tvd: TvdKind::Categorical,
            timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_args(a: &SampleEvalArgs) -> CliResult<Self> {
        let mut c: ExperimentConfig = match &a.config {
            Some(p) => read_json(p)?,
            None => ExperimentConfig::default(),
        };
        if a.dataset.is_some() {
            c.dataset = a.dataset.clone();
        }
        if a.checkpoint.is_some() {
            c.checkpoint = a.checkpoint.clone();
        }
        if !a.methods.is_empty() {
            c.methods = a.methods.clone();
        }
        if let Some(v) = a.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = a.batches {
            c.batches = v;
        }
        if let Some(v) = a.seed {
            c.seed = v;
        }
        if let Some(v) = a.steps {
            c.schedule.steps = v;
        }
        if let Some(v) = a.s_churn {
            c.s_churn = v;
        }
        if let Some(v) = a.hooks_at_correction {
            c.hooks_at_correction = v;
        }
        if a.instances.is_some() {
            c.instances = a.instances;
        }
        if a.out_dir.is_some() {
            c.out_dir = a.out_dir.clone();
        }
        c.dump_masks |= a.dump_masks;
        c.timing |= a.timing;
        if let Some(t) = a.tvd {
            c.tvd = t.into();
        }
        Ok(c)
    }

    fn sampler(&self, method: Method) -> SamplerConfig {
        SamplerConfig {
            schedule: self.schedule.clone(),
            s_churn: self.s_churn,
            method,
            batch_size: self.batch_size,
            seed: self.seed,
            hooks_at_correction: self.hooks_at_correction,
        }
    }
}

fn fnv1a64(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn file_label(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect()
}

struct Cell<'a> {
    instance: usize,
    label: &'a str,
    method: &'a ResolvedMethod,
}

fn run_cell(
    model: &dyn Denoiser,
    ds: &Dataset,
    cell: &Cell<'_>,
    cfg: &ExperimentConfig,
    dump_dir: Option<&Path>,
) -> Vec<ReportRow> {
    let i = cell.instance;
    let shape = (ds.height, ds.width);
    let mut rows = Vec::new();
    let mut masks: Vec<BinaryMask> = Vec::new();
    let mut bank: Vec<LatentGrid> = Vec::new();
    let mut elapsed = 0u64;
    for b in 0..cfg.batches {
        let start = Instant::now();
        let result = (|| -> crate::Result<(Vec<BinaryMask>, InstanceMetrics)> {
            let c = ds.conditioning(i)?;
            let new = match cell.method {
                ResolvedMethod::Sample(m) => sample_batch(model, &cfg.sampler(m.clone()), c, shape, i, b, Some(&mut bank))?.masks,
                ResolvedMethod::Cluster(p) => prune_and_finish(model, p, &cfg.sampler(Method::Naive), c, shape, i, b)?.masks,
            };
            let mut all = masks.clone();
            all.extend(new.iter().cloned());
            let m = evaluate_instance(&all, &ds.instances[i], shape, ds.channels, cfg.tvd)?;
            if let Some(dir) = dump_dir {
                for (k, mask) in new.iter().enumerate() {
                    let path = dir.join(format!("{i}_{}_{b}_{k}.pgm", file_label(cell.label)));
                    let mut w = BufWriter::new(fs::File::create(path)?);
                    write_mask_pgm(mask, &mut w)?;
                    w.flush()?;
                }
            }
            Ok((new, m))
        })();
        if cfg.timing {
            elapsed += start.elapsed().as_millis() as u64;
        }
        match result {
            Ok((new, m)) => {
                masks.extend(new);
                rows.push(ReportRow {
                    instance_id: i.to_string(),
                    method: cell.label.to_string(),
                    b_total: masks.len(),
                    metrics: Some(m),
                    wall_ms: elapsed,
                    status: "ok".into(),
                });
            }
            Err(e) => {
                rows.push(ReportRow {
                    instance_id: i.to_string(),
                    method: cell.label.to_string(),
                    b_total: masks.len(),
                    metrics: None,
                    wall_ms: elapsed,
                    status: format!("{}: {e}", kind_label(e.kind())),
                });
                break;
            }
        }
    }
    rows
}

pub fn cmd_sample_eval(a: &SampleEvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = ExperimentConfig::from_args(a)?;
    let dataset_path = cfg.dataset.clone().ok_or_else(|| usage("--dataset is required"))?;
    let out_dir = cfg.out_dir.clone().ok_or_else(|| usage("--out-dir is required"))?;
    if cfg.batch_size == 0 || cfg.batches == 0 {
        return Err(usage("batch size and batch count must be positive"));
    }
    if cfg.methods.is_empty() {
        return Err(usage("no methods given"));
    }
    let specs = cfg
        .methods
        .iter()
        .map(|m| m.parse::<MethodSpec>().map_err(|e| usage(format!("--method {m:?}: {e}"))))
        .collect::<CliResult<Vec<_>>>()?;
    require_file(&dataset_path)?;
    let dataset_bytes = fs::read(&dataset_path)?;
    let ds = crate::datasets::read_dataset_from(&mut dataset_bytes.as_slice())?;
    if ds.is_empty() {
        return Err(Error::Empty("dataset has no instances".into()).into());
    }

    let r0 = if specs.iter().any(MethodSpec::needs_r0) { Some(estimate_r0(&ds)?) } else { None };
    let resolved = specs
        .iter()
        .map(|s| s.resolve(r0.map(|e| e.r0), cfg.batch_size))
        .collect::<CliResult<Vec<_>>>()?;
    for r in &resolved {
        match r {
            ResolvedMethod::Sample(m) => cfg.sampler(m.clone()).validate()?,
            ResolvedMethod::Cluster(p) => {
                p.validate(cfg.schedule.steps)?;
                cfg.sampler(Method::Naive).validate()?;
            }
        }
    }
    let labels: Vec<String> = specs.iter().map(ToString::to_string).collect();

    let (model, checkpoint_hash): (Box<dyn Denoiser>, Option<String>) = match &cfg.checkpoint {
        Some(p) => {
            require_file(p)?;
            let bytes = fs::read(p)?;
            let mlp = crate::denoiser::read_checkpoint(&mut bytes.as_slice())?;
            if mlp.shape() != (ds.height, ds.width) {
                return Err(Error::ShapeMismatch { left: mlp.shape(), right: (ds.height, ds.width) }.into());
            }
            if mlp.channels() != ds.channels {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("checkpoint expects {} channels, dataset has {}", mlp.channels(), ds.channels),
                }
                .into());
            }
            (Box::new(mlp), Some(fnv1a64(&bytes)))
        }
        None => (Box::new(MixtureDenoiser::from_dataset(&ds)?), None),
    };

    fs::create_dir_all(&out_dir)?;
    let dump_dir = cfg.dump_masks.then(|| out_dir.join("masks"));
    if let Some(d) = &dump_dir {
        fs::create_dir_all(d)?;
    }
    let n_instances = cfg.instances.map_or(ds.len(), |n| n.min(ds.len()));
    let cells: Vec<Cell<'_>> = (0..n_instances)
        .flat_map(|i| labels.iter().zip(&resolved).map(move |(label, method)| Cell { instance: i, label, method }))
        .collect();

    let jobs = a.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| usage(format!("cannot start {jobs} workers: {e}")))?;
    let per_cell: Vec<Vec<ReportRow>> =
        pool.install(|| cells.par_iter().map(|c| run_cell(model.as_ref(), &ds, c, &cfg, dump_dir.as_deref())).collect());
    let report = EvaluationReport { rows: per_cell.into_iter().flatten().collect() };

    let csv_path = out_dir.join("report.csv");
    fs::write(&csv_path, report.to_csv())?;
    let manifest = json!({
        "tool": "divseg",
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "dataset_fnv1a64": fnv1a64(&dataset_bytes),
        "checkpoint_fnv1a64": checkpoint_hash,
        "denoiser": if cfg.checkpoint.is_some() { "mlp" } else { "mixture" },
        "r0": r0.map(|e| json!({ "value": e.r0, "skipped_instances": e.skipped })),
        "methods": labels.iter().zip(&resolved).map(|(l, r)| json!({
            "label": l,
            "resolved": match r {
                ResolvedMethod::Sample(m) => serde_json::to_value(m).expect("serialisable"),
                ResolvedMethod::Cluster(p) => json!({ "kind": "cluster", "prune": p }),
            }
        })).collect::<Vec<_>>(),
        "instances": n_instances,
    });
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("serialisable"))?;

    let failed = report.rows.iter().filter(|r| r.metrics.is_none()).count();
    writeln!(out, "method\tb_total\thm_iou_star\tdistinct_modes\timage_quality\ttvd")?;
    for r in report.aggregates() {
        match r.metrics {
            Some(m) => writeln!(
                out,
                "{}\t{}\t{:.4}\t{:.3}\t{:.4}\t{:.4}",
                r.method, r.b_total, m.hm_iou_star, m.distinct_modes, m.image_quality, m.tvd
            )?,
            None => writeln!(out, "{}\t{}\tfailed", r.method, r.b_total)?,
        }
    }
    if failed > 0 {
        eprintln!("divseg: {failed} cells failed; see the status column");
    }
    writeln!(out, "wrote {}", csv_path.display())?;
    Ok(())
}

fn coverage_lines(weights: &[f64], a: &CoverageArgs, out: &mut dyn Write) -> CliResult<()> {
    if weights.len() <= MAX_EXACT_COVERAGE_MODES {
        writeln!(out, "exact {:.4}", expected_coverage(weights)?)?;
    } else if a.monte_carlo.is_none() {
        return Err(usage(format!(
            "{} modes exceed the exact limit of {MAX_EXACT_COVERAGE_MODES}; pass --monte-carlo TRIALS",
            weights.len()
        )));
    }
    if let Some(trials) = a.monte_carlo {
        writeln!(out, "monte_carlo {:.4} ({trials} trials)", expected_coverage_monte_carlo(weights, trials, a.seed)?)?;
    }
    Ok(())
}

pub fn cmd_expected_coverage(a: &CoverageArgs, out: &mut dyn Write) -> CliResult<()> {
    if let Some(w) = &a.weights {
        return coverage_lines(w, a, out);
    }
    if let Some(n) = a.uniform {
        if n == 0 {
            return Err(usage("--uniform needs at least one mode"));
        }
        return coverage_lines(&vec![1.0; n], a, out);
    }
    let path = a.dataset.as_ref().expect("clap enforces one source");
    require_file(path)?;
    let ds = read_dataset(path)?;
    for (i, inst) in ds.instances.iter().enumerate() {
        let (_, weights) = mode_distribution(&inst.modes);
        write!(out, "instance {i} ({} modes): ", weights.len())?;
        coverage_lines(&weights, a, out)?;
    }
    Ok(())
}

pub fn cmd_export_masks(a: &ExportArgs, out: &mut dyn Write) -> CliResult<()> {
    require_file(&a.dataset)?;
    let ds = read_dataset(&a.dataset)?;
    let which: Vec<usize> = match a.instance {
        Some(i) if i >= ds.len() => return Err(Error::UnknownConditioning(i).into()),
        Some(i) => vec![i],
        None => (0..ds.len()).collect(),
    };
    fs::create_dir_all(&a.out_dir)?;
    let mut written = 0;
    for i in which {
        for (k, mode) in ds.instances[i].modes.iter().enumerate() {
            let path = a.out_dir.join(format!("{i}_mode{k}.pgm"));
            let mut w = BufWriter::new(fs::File::create(path)?);
            write_mask_pgm(&mode.mask, &mut w)?;
            w.flush()?;
            written += 1;
        }
    }
    writeln!(out, "wrote {written} masks to {}", a.out_dir.display())?;
    Ok(())
}
