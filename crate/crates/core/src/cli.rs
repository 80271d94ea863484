//! Command-line surface: `search`, `eval`, `ablate` and `inspect`.
//!
//! Settings come from flags, optionally preceded by a `key = value` file given
//! with `--config`; a flag present on the command line replaces every value of
//! the same key from the file. Exit codes: 0 success, 2 configuration error,
//! 3 runtime or numeric error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::bilevel::{
    metrics_csv, policy_gradient_variance, search_loop, train_and_evaluate, Augmentation, FdMode, HypergradConfig,
    HypergradPoint, PhiLearningRates, SearchConfig, TrainConfig,
};
use crate::data::{load_raw_dataset, split_half, subset, synth_rotation_task, DatasetFormat, LabeledDataset};
use crate::error::{Error, Result};
use crate::policy::{
    deserialize_policy, serialize_policy, DepthMode, EvalSettings, MagnitudeDist, ParamGroup, PolicyParams,
    SamplingMode, ScheduleConfig, WarmupFracs,
};
use crate::relaxations::{repetition_rate, AssignmentSampler, Temperature};
use crate::transforms::registry;

/// Dataset name that selects the built-in synthetic rotation task.
pub const SYNTH_DATASET: &str = "synth-rot";

#[derive(Parser, Debug)]
#[command(name = "augsearch", version, about = "Differentiable augmentation policy search")]
pub struct Cli {
    /// `key = value` settings file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Search a policy and write it with per-epoch metrics.
    Search(SearchCmd),
    /// Train fresh classifiers with a fixed policy and report accuracy.
    Eval(EvalCmd),
    /// Run one of the ablation sweeps.
    Ablate(AblateCmd),
    /// Print a readable summary of a policy file.
    Inspect(InspectCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    CifarBinary,
    SimpleContainer,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset file, or `synth-rot` for the synthetic rotation task.
    #[arg(long, default_value = SYNTH_DATASET)]
    pub dataset: String,
    #[arg(long, value_enum, default_value_t = FormatArg::CifarBinary)]
    pub format: FormatArg,
    /// Class-balanced subset size (number of generated images for `synth-rot`).
    #[arg(long)]
    pub subset: Option<usize>,
    /// Seed for dataset generation, subsetting and the train/val split.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Classifier learning rate (SGD, cosine schedule).
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HypergradArg {
    ExactPoint,
    PaperPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupArg {
    Mu,
    Pi,
    Delta,
}

impl From<GroupArg> for ParamGroup {
    fn from(g: GroupArg) -> Self {
        match g {
            GroupArg::Mu => ParamGroup::Magnitude,
            GroupArg::Pi => ParamGroup::Types,
            GroupArg::Delta => ParamGroup::Depth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MagnitudeArg {
    Uniform,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DepthArg {
    Categorical,
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplingArg {
    PerImage,
    PerBatch,
}

impl From<SamplingArg> for SamplingMode {
    fn from(s: SamplingArg) -> Self {
        match s {
            SamplingArg::PerImage => SamplingMode::PerImage,
            SamplingArg::PerBatch => SamplingMode::PerBatch,
        }
    }
}

/// Policy-search hyperparameters shared by `search` and `ablate`.
#[derive(Args, Debug, Clone)]
pub struct SearchArgs {
    #[arg(long, default_value_t = crate::policy::DEFAULT_MAX_DEPTH)]
    pub max_depth: usize,
    #[arg(long, default_value_t = crate::policy::DEFAULT_SINKHORN_ITERS)]
    pub sinkhorn_iters: usize,
    #[arg(long, default_value_t = 1.0)]
    pub t_start: f64,
    #[arg(long, default_value_t = 0.5)]
    pub t_end: f64,
    #[arg(long, default_value_t = 0.02)]
    pub lr_mu: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lr_pi: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lr_delta: f64,
    /// Virtual-step size of the one-step unrolled validation loss.
    #[arg(long, default_value_t = 0.1)]
    pub eta: f64,
    #[arg(long, value_enum, default_value_t = HypergradArg::ExactPoint)]
    pub hypergrad: HypergradArg,
    /// Finite-difference step as a fraction of `1 / |v|`.
    #[arg(long, default_value_t = 0.01)]
    pub fd_scale: f64,
    /// Use a one-sided instead of a central difference.
    #[arg(long)]
    pub one_sided: bool,
    /// Keep a parameter group at its initial value (repeatable).
    #[arg(long, value_enum)]
    pub freeze: Vec<GroupArg>,
    /// Warm-up fractions of the total epochs for `mu,pi,delta`, or `none`.
    #[arg(long, default_value = "0.16666666666666666,0.21666666666666667,0.26666666666666666", value_parser = parse_warmup)]
    pub warmup_fracs: WarmupFracs,
    #[arg(long, value_enum, default_value_t = MagnitudeArg::Uniform)]
    pub magnitude_dist: MagnitudeArg,
    #[arg(long, value_enum, default_value_t = DepthArg::Categorical)]
    pub depth_mode: DepthArg,
    #[arg(long, value_enum, default_value_t = SamplingArg::PerImage)]
    pub sampling: SamplingArg,
}

fn parse_warmup(s: &str) -> std::result::Result<WarmupFracs, String> {
    if s.trim() == "none" {
        return Ok(WarmupFracs::none());
    }
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [mu, pi, delta] => Ok(WarmupFracs { mu, pi, delta }),
        _ => Err(format!("expected three comma-separated fractions (mu,pi,delta), got {}", v.len())),
    }
}

/// Comma-separated list of seeds, e.g. `0,1,2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

fn parse_seeds(s: &str) -> std::result::Result<SeedList, String> {
    let seeds: Vec<u64> = s
        .split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| x.trim().parse::<u64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if seeds.is_empty() {
        return Err("seed list is empty".into());
    }
    Ok(SeedList(seeds))
}

#[derive(Args, Debug, Clone)]
pub struct SearchCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Policy file to write.
    #[arg(long, default_value = "policy.json")]
    pub out: PathBuf,
    /// Metrics CSV; defaults to the policy path with a `metrics.csv` extension.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long, default_value_t = crate::policy::DEFAULT_T_EVAL)]
    pub t_eval: f64,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "0,1,2", value_parser = parse_seeds)]
    pub seeds: SeedList,
    /// Also train without augmentation on the same seeds.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, default_value = "eval.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Repeat rate of sinkhorn vs independent sampling over L in {1,5,10,20}.
    RepetitionRate,
    /// Depth pinned to each k in 1..=K.
    FixedDepth,
    /// Per-image vs per-batch policy sampling.
    SamplingMode,
    /// Joint learning vs each single parameter group frozen.
    FrozenDof,
    /// Default warm-up vs none.
    NoWarmup,
    /// Uniform vs Gaussian magnitudes.
    MagnitudeDist,
    /// Categorical depth vs per-layer Bernoulli gates.
    DepthMode,
}

#[derive(Args, Debug, Clone)]
pub struct AblateCmd {
    #[arg(value_enum)]
    pub ablation: Ablation,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long, default_value = "0,1", value_parser = parse_seeds)]
    pub seeds: SeedList,
    /// Draws per configuration for `repetition-rate`.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// Sampling temperature for `repetition-rate` and evaluation.
    #[arg(long, default_value_t = crate::policy::DEFAULT_T_EVAL)]
    pub t_eval: f64,
    /// Policy draws per mode for the gradient-variance column of `sampling-mode`.
    #[arg(long, default_value_t = 32)]
    pub resamples: usize,
    #[arg(long, default_value = "ablation.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct InspectCmd {
    pub policy: PathBuf,
}

// ---------------------------------------------------------------------------
// entry point

/// Parse `args` (including the program name), run the command and return the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match merge_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                3
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Search(c) => cmd_search(&c),
        Command::Eval(c) => cmd_eval(&c),
        Command::Ablate(c) => cmd_ablate(&c),
        Command::Inspect(c) => {
            print!("{}", cmd_inspect(&c.policy)?);
            Ok(())
        }
    }
}

fn config_path(args: &[OsString]) -> Result<Option<PathBuf>> {
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return match args.get(i + 1) {
                Some(p) => Ok(Some(PathBuf::from(p))),
                None => Err(Error::Config("--config needs a path".into())),
            };
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Ok(Some(PathBuf::from(p)));
        }
    }
    Ok(None)
}

/// Parse a `key = value` settings file into `(flag, value)` pairs.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(Error::Config(format!("config line {}: invalid key `{}`", n + 1, k.trim())));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Append the settings from `--config` to `args`, skipping keys already given
/// on the command line. `key = true` becomes a bare switch, `key = false` is
/// dropped.
pub fn merge_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args)? else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let given = |key: &str| {
        let flag = format!("--{key}");
        let prefix = format!("--{key}=");
        args.iter().any(|a| {
            let s = a.to_string_lossy();
            s == flag || s.starts_with(&prefix)
        })
    };
    let mut extra = Vec::new();
    for (key, value) in parse_config_file(&text)? {
        if given(&key) {
            continue;
        }
        match value.as_str() {
            "true" => extra.push(OsString::from(format!("--{key}"))),
            "false" => {}
            _ => {
                extra.push(OsString::from(format!("--{key}")));
                extra.push(OsString::from(value));
            }
        }
    }
    let mut out = args;
    out.extend(extra);
    Ok(out)
}

// ---------------------------------------------------------------------------
// helpers

/// Write `contents` to a sibling temporary file, then rename it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("output path {} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Load the configured dataset and split it into training and validation halves.
pub fn load_data(args: &DataArgs) -> Result<(LabeledDataset, LabeledDataset)> {
    let ds = if args.dataset == SYNTH_DATASET {
        synth_rotation_task(args.subset.unwrap_or(1000), args.data_seed)?
    } else {
        let format = match args.format {
            FormatArg::CifarBinary => DatasetFormat::CifarBinary,
            FormatArg::SimpleContainer => DatasetFormat::SimpleContainer,
        };
        let full = load_raw_dataset(Path::new(&args.dataset), format)?;
        match args.subset {
            Some(n) => subset(&full, n, args.data_seed),
            None => full,
        }
    };
    split_half(&ds, args.data_seed)
}

/// Sample mean and the half-width of its 95% Student-t interval (`None` for
/// fewer than two values).
pub fn mean_ci95(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0).expect("positive degrees of freedom").inverse_cdf(0.975);
    (mean, Some(t * (var / n).sqrt()))
}

impl SearchArgs {
    /// Build a search configuration from the flags.
    pub fn to_config(&self, run: &RunArgs) -> SearchConfig {
        SearchConfig {
            epochs: run.epochs,
            batch_size: run.batch_size,
            max_depth: self.max_depth,
            schedule: ScheduleConfig {
                t_start: self.t_start,
                t_end: self.t_end,
                sinkhorn_iters: self.sinkhorn_iters,
                warmup: self.warmup_fracs,
                ..ScheduleConfig::default()
            },
            lr_theta: run.lr,
            phi_lr: PhiLearningRates { mu: self.lr_mu, pi: self.lr_pi, delta: self.lr_delta },
            eta: self.eta,
            hypergrad: HypergradConfig {
                mode: if self.one_sided { FdMode::OneSided } else { FdMode::Central },
                point: match self.hypergrad {
                    HypergradArg::ExactPoint => HypergradPoint::Exact,
                    HypergradArg::PaperPoint => HypergradPoint::Current,
                },
                fd_epsilon_scale: self.fd_scale,
            },
            freeze: self.freeze.iter().map(|&g| g.into()).collect(),
            magnitude_dist: match self.magnitude_dist {
                MagnitudeArg::Uniform => MagnitudeDist::Uniform,
                MagnitudeArg::Gaussian => MagnitudeDist::Gaussian,
            },
            depth_mode: match self.depth_mode {
                DepthArg::Categorical => DepthMode::Categorical,
                DepthArg::Bernoulli => DepthMode::Bernoulli,
            },
            sampling: self.sampling.into(),
            workers: run.workers,
            seed: run.seed,
            ..SearchConfig::default()
        }
    }
}

fn train_config(run: &RunArgs) -> TrainConfig {
    TrainConfig { epochs: run.epochs, batch_size: run.batch_size, lr: run.lr, workers: run.workers, ..TrainConfig::default() }
}

fn metrics_path(cmd: &SearchCmd) -> PathBuf {
    cmd.metrics.clone().unwrap_or_else(|| cmd.out.with_extension("metrics.csv"))
}

// ---------------------------------------------------------------------------
// commands

/// Run a search and write the policy file; metrics are rewritten after every
/// epoch so a failed run keeps the rows it completed.
pub fn cmd_search(cmd: &SearchCmd) -> Result<()> {
    let cfg = cmd.search.to_config(&cmd.run);
    cfg.validate()?;
    let (train, val) = load_data(&cmd.data)?;
    let metrics = metrics_path(cmd);
    info!("search: {} train / {} val images, {} epochs", train.len(), val.len(), cfg.epochs);
    let k = cfg.max_depth;
    let outcome = search_loop(&cfg, &train, &val, &mut |rows| {
        write_atomic(&metrics, metrics_csv(k, rows).as_bytes())
    })?;
    if outcome.skipped_steps > 0 {
        info!("{} policy steps skipped (zero validation gradient)", outcome.skipped_steps);
    }
    let text = serialize_policy(&outcome.params, EvalSettings::from(&cfg.schedule))?;
    write_atomic(&cmd.out, text.as_bytes())
}

fn read_policy(path: &Path) -> Result<(PolicyParams, EvalSettings)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read policy {}: {e}", path.display())))?;
    deserialize_policy(&text)
}

fn summary_rows(out: &mut String, run: &str, accs: &[f64]) {
    let (mean, half) = mean_ci95(accs);
    let half = half.map(|h| format!("{h:.6}")).unwrap_or_default();
    let _ = writeln!(out, "{run},all,,{mean:.6},{half}");
}

/// Train fresh classifiers with the policy (and optionally without
/// augmentation) and write per-seed accuracies with mean and 95% interval.
pub fn cmd_eval(cmd: &EvalCmd) -> Result<()> {
    let (params, stored) = read_policy(&cmd.policy)?;
    Temperature::new(cmd.t_eval)?;
    let settings = EvalSettings { temperature_eval: cmd.t_eval, sinkhorn_iters: stored.sinkhorn_iters };
    let (train, val) = load_data(&cmd.data)?;
    let tc = train_config(&cmd.run);
    let mut runs = vec![("policy", Augmentation::Policy { params, settings })];
    if cmd.baseline {
        runs.push(("baseline", Augmentation::None));
    }
    let mut out = String::from("run,seed,accuracy,mean,ci95_half_width\n");
    for (name, aug) in &runs {
        let mut accs = Vec::new();
        for &seed in &cmd.seeds.0 {
            let acc = train_and_evaluate(&train, &val, aug, &tc, seed)?;
            info!("{name} seed {seed}: accuracy {acc:.4}");
            let _ = writeln!(out, "{name},{seed},{acc:.6},,");
            accs.push(acc);
        }
        summary_rows(&mut out, name, &accs);
    }
    write_atomic(&cmd.out, out.as_bytes())
}

/// A named search configuration evaluated over seeds.
struct Variant {
    name: String,
    cfg: SearchConfig,
}

fn variants(cmd: &AblateCmd) -> Vec<Variant> {
    let base = cmd.search.to_config(&cmd.run);
    let with = |name: &str, f: &dyn Fn(&mut SearchConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Variant { name: name.to_string(), cfg }
    };
    match cmd.ablation {
        Ablation::RepetitionRate => Vec::new(),
        Ablation::FixedDepth => {
            (1..=base.max_depth).map(|k| with(&format!("depth-{k}"), &|c| c.fixed_depth = Some(k))).collect()
        }
        Ablation::SamplingMode => vec![
            with("per-image", &|c| c.sampling = SamplingMode::PerImage),
            with("per-batch", &|c| c.sampling = SamplingMode::PerBatch),
        ],
        Ablation::FrozenDof => {
            let mut v = vec![with("joint", &|c| c.freeze.clear())];
            for g in ParamGroup::ALL {
                v.push(with(&format!("frozen-{}", g.name()), &|c| c.freeze = vec![g]));
            }
            v
        }
        Ablation::NoWarmup => vec![
            with("warmup", &|c| c.schedule.warmup = WarmupFracs::default()),
            with("no-warmup", &|c| c.schedule.warmup = WarmupFracs::none()),
        ],
        Ablation::MagnitudeDist => vec![
            with("uniform", &|c| c.magnitude_dist = MagnitudeDist::Uniform),
            with("gaussian", &|c| c.magnitude_dist = MagnitudeDist::Gaussian),
        ],
        Ablation::DepthMode => vec![
            with("categorical", &|c| c.depth_mode = DepthMode::Categorical),
            with("bernoulli", &|c| c.depth_mode = DepthMode::Bernoulli),
        ],
    }
}

/// Search then evaluate one variant for one seed.
pub fn search_and_eval(
    cfg: &SearchConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
    tc: &TrainConfig,
    t_eval: f64,
) -> Result<(PolicyParams, f64)> {
    let outcome = search_loop(cfg, train, val, &mut |_| Ok(()))?;
    let settings = EvalSettings { temperature_eval: t_eval, sinkhorn_iters: cfg.schedule.sinkhorn_iters };
    let aug = Augmentation::Policy { params: outcome.params.clone(), settings };
    let acc = train_and_evaluate(train, val, &aug, tc, cfg.seed)?;
    Ok((outcome.params, acc))
}

pub fn cmd_ablate(cmd: &AblateCmd) -> Result<()> {
    let t = Temperature::new(cmd.t_eval)?;
    if cmd.ablation == Ablation::RepetitionRate {
        let (n, k) = (registry().len(), cmd.search.max_depth);
        let pi = vec![0.0; n * k];
        let mut out = String::from("sampler,sinkhorn_iters,samples,rate,std\n");
        for iters in [1, 5, 10, 20] {
            for sampler in [AssignmentSampler::Sinkhorn, AssignmentSampler::Independent] {
                let s = repetition_rate(&pi, n, k, t, iters, sampler, cmd.samples, cmd.run.seed)?;
                let _ = writeln!(out, "{},{iters},{},{:.6},{:.6}", sampler.name(), s.samples, s.rate, s.std);
            }
        }
        return write_atomic(&cmd.out, out.as_bytes());
    }
    let (train, val) = load_data(&cmd.data)?;
    let tc = train_config(&cmd.run);
    let sampling = cmd.ablation == Ablation::SamplingMode;
    let mut out = String::from(if sampling {
        "variant,seed,accuracy,grad_variance\n"
    } else {
        "variant,seed,accuracy\n"
    });
    for v in variants(cmd) {
        v.cfg.validate()?;
        let variance = if sampling {
            let params = v.cfg.initial_policy()?;
            let idx: Vec<usize> = (0..v.cfg.batch_size.min(train.len())).collect();
            let t0 = Temperature::new(v.cfg.schedule.t_start)?;
            Some(policy_gradient_variance(
                &train,
                &idx,
                &params,
                t0,
                v.cfg.schedule.sinkhorn_iters,
                v.cfg.sampling,
                cmd.resamples,
                v.cfg.workers,
                cmd.run.seed,
            )?)
        } else {
            None
        };
        for &seed in &cmd.seeds.0 {
            let cfg = SearchConfig { seed, ..v.cfg.clone() };
            let (_, acc) = search_and_eval(&cfg, &train, &val, &tc, cmd.t_eval)?;
            info!("{} seed {seed}: accuracy {acc:.4}", v.name);
            match variance {
                Some(var) => {
                    let _ = writeln!(out, "{},{seed},{acc:.6},{var:.6e}", v.name);
                }
                None => {
                    let _ = writeln!(out, "{},{seed},{acc:.6}", v.name);
                }
            }
            write_atomic(&cmd.out, out.as_bytes())?;
        }
    }
    write_atomic(&cmd.out, out.as_bytes())
}

/// Depth distribution, top-3 transforms per layer and magnitude intervals.
pub fn cmd_inspect(path: &Path) -> Result<String> {
    let (params, settings) = read_policy(path)?;
    let names: Vec<&str> = registry().iter().map(|s| s.name).collect();
    let (n, k) = (params.num_types, params.max_depth);
    let mut s = String::new();
    let _ = writeln!(s, "types: {n}  layers: {k}  eval temperature: {}  sinkhorn iterations: {}", settings.temperature_eval, settings.sinkhorn_iters);
    let _ = writeln!(s, "depth distribution:");
    for (d, p) in params.depth_probs().iter().enumerate() {
        let _ = writeln!(s, "  depth {d}: {p:.6}");
    }
    let _ = writeln!(s, "top-3 transforms per layer:");
    for (layer, col) in params.layer_marginals(settings.sinkhorn_iters).iter().enumerate() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
        let top: Vec<String> = order.iter().take(3).map(|&i| format!("{} {:.6}", names[i], col[i])).collect();
        let _ = writeln!(s, "  layer {}: {}", layer + 1, top.join(", "));
    }
    let _ = writeln!(s, "magnitude intervals per layer:");
    let iv = params.magnitude_intervals();
    for (i, name) in names.iter().enumerate().take(n) {
        let cells: Vec<String> = (0..k).map(|l| {
            let (lo, hi) = iv[i * k + l];
            format!("[{lo:.6}, {hi:.6}]")
        }).collect();
        let _ = writeln!(s, "  {name:<12} {}", cells.join(" "));
    }
    Ok(s)
}
