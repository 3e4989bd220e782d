//! The `dae` command-line tool.
//!
//! Every command accepts `--config PATH`, a JSON object whose keys are the
//! long flag names in snake_case. Unknown keys are rejected. A flag given on
//! the command line overrides the same key from the file.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use dae_core::data::{split, synth_heteroscedastic, synth_judges, Dataset, MeanFn, NoiseFn, SyntheticSpec};
use dae_core::distributions::{density_curve, DistributionFamily, Grid, Rng};
use dae_core::gradcheck::finite_diff_check;
use dae_core::metrics::{evaluate, quartiles};
use dae_core::model::{Architecture, DaeModel, IntervalSpec, ModelKind, ReadoutMode};
use dae_core::training::{fit, Batch, LossKind, LossWeights, TrainConfig};
use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::report::{ReplicaResult, StabilitySummary};
use crate::{checkpoint, io, report};

const JUDGE_SEED_SALT: u64 = 0x6a75_6467_6573;

#[derive(Debug, Parser)]
#[command(name = "dae", version, about = "Distribution auto-encoder regression toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic heteroscedastic dataset (and optional judge scores)
    Synth(SynthCmd),
    /// Train a model and write the best checkpoint plus training history
    Train(TrainCmd),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalCmd),
    /// Write the predicted score density of records as CSV curves
    SampleDist(SampleDistCmd),
    /// Compare backpropagated gradients with central finite differences
    CheckGrad(CheckGradCmd),
    /// Train independent replicas and summarize the spread of learned variance
    VarianceStability(StabilityCmd),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// JSON config file; flags override its values
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Random seed [default: 0]
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory, created if missing [default: .]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct SynthArgs {
    /// Number of records [default: 5000]
    #[arg(long, value_name = "N")]
    pub n: Option<usize>,
    /// Feature dimension F [default: 8]
    #[arg(long, value_name = "F")]
    pub features: Option<usize>,
    /// Mean function: sine, quadratic, linear [default: sine]
    #[arg(long, value_name = "NAME")]
    pub mean_fn: Option<String>,
    /// Noise function: affine[:a:b], vshape[:floor:slope], constant:s [default: affine:0.05:0.2]
    #[arg(long, value_name = "SPEC")]
    pub noise_fn: Option<String>,
    /// Add seven judge scores and a difficulty degree per record [default: off]
    #[arg(long)]
    pub judges: bool,
    /// Judge noise standard deviation [default: 0.3]
    #[arg(long, value_name = "F")]
    pub judge_noise: Option<f64>,
    /// Lower end of the difficulty-degree range [default: 1.5]
    #[arg(long, value_name = "F")]
    pub dd_min: Option<f64>,
    /// Upper end of the difficulty-degree range [default: 3.5]
    #[arg(long, value_name = "F")]
    pub dd_max: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// Weight of the reconstruction term [default: 0.6]
    #[arg(long, value_name = "F")]
    pub alpha: Option<f64>,
    /// Weight of the log-variance term [default: 0.4]
    #[arg(long, value_name = "F")]
    pub beta: Option<f64>,
    /// Noise family: gaussian, laplace, logistic, student-t[:dof], triangular, logistic-normal [default: gaussian]
    #[arg(long, value_name = "NAME")]
    pub family: Option<String>,
    /// Loss: dae, mse, regression [default: dae]
    #[arg(long, value_name = "KIND")]
    pub loss: Option<String>,
    /// Model: mlp, mt, core [default: mlp]
    #[arg(long, value_name = "KIND")]
    pub model: Option<String>,
    /// Adam learning rate [default: 0.0001]
    #[arg(long, value_name = "F")]
    pub lr: Option<f64>,
    /// Training epochs [default: 200]
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Minibatch size [default: 32]
    #[arg(long, value_name = "N")]
    pub batch: Option<usize>,
    /// Evaluate every N epochs (and at the last epoch) [default: 1]
    #[arg(long, value_name = "N")]
    pub eval_every: Option<usize>,
    /// Comma-separated trunk widths [default: 512,256,128]
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Interval count for the interval model [default: 8]
    #[arg(long, value_name = "K")]
    pub intervals: Option<usize>,
    /// Read-out used for evaluation during training: mean, sample [default: mean]
    #[arg(long, value_name = "MODE")]
    pub mode: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Training data (.csv or .daef)
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Evaluation data; when absent the training data is split
    #[arg(long, value_name = "PATH")]
    pub eval_data: Option<PathBuf>,
    /// Training fraction when splitting [default: 0.75]
    #[arg(long, value_name = "F")]
    pub split: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthCmd {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub synth: SynthArgs,
    /// Also write data.daef in the binary format [default: off]
    #[arg(long)]
    pub binary: bool,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint JSON written by `train`
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset to evaluate (.csv or .daef)
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Read-out: mean, sample [default: mean]
    #[arg(long, value_name = "MODE")]
    pub mode: Option<String>,
    /// Noise family for sample mode [default: from checkpoint]
    #[arg(long, value_name = "NAME")]
    pub family: Option<String>,
}

#[derive(Debug, Args)]
pub struct SampleDistCmd {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint JSON written by `train`
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset holding the records (.csv or .daef)
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Record id; repeat for several records [default: every record]
    #[arg(long = "id", value_name = "ID")]
    pub ids: Vec<String>,
    /// Grid points per curve [default: 201]
    #[arg(long, value_name = "N")]
    pub points: Option<usize>,
    /// Grid half-width in units of sigma [default: 4]
    #[arg(long, value_name = "F")]
    pub half_width: Option<f64>,
    /// Noise family [default: from checkpoint]
    #[arg(long, value_name = "NAME")]
    pub family: Option<String>,
}

#[derive(Debug, Args)]
pub struct CheckGradCmd {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Feature dimension of the probe model [default: 8]
    #[arg(long, value_name = "F")]
    pub features: Option<usize>,
    /// Batch size [default: 4]
    #[arg(long, value_name = "N")]
    pub batch: Option<usize>,
    /// Comma-separated trunk widths [default: 64,32,16]
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Maximum allowed relative error [default: 0.0001]
    #[arg(long, value_name = "F")]
    pub tolerance: Option<f64>,
    /// Break the matmul backward rule to confirm the check can fail [default: off]
    #[arg(long)]
    pub corrupt: bool,
}

#[derive(Debug, Args)]
pub struct StabilityCmd {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub synth: SynthArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of replicas, at least 2 [default: 20]
    #[arg(long, value_name = "R")]
    pub replicas: Option<usize>,
    /// Seed for synthetic data and the split [default: 0]
    #[arg(long, value_name = "N")]
    pub data_seed: Option<u64>,
    /// Give every replica the same seed instead of seed + index [default: off]
    #[arg(long)]
    pub same_seed: bool,
    /// Worker threads [default: all cores]
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

/// Values read from `--config`. Keys mirror the long flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    // synthetic data
    pub n: Option<usize>,
    pub features: Option<usize>,
    pub mean_fn: Option<String>,
    pub noise_fn: Option<String>,
    pub judges: Option<bool>,
    pub judge_noise: Option<f64>,
    pub dd_min: Option<f64>,
    pub dd_max: Option<f64>,
    pub binary: Option<bool>,
    // training
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub family: Option<String>,
    pub loss: Option<String>,
    pub model: Option<String>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub eval_every: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub intervals: Option<usize>,
    pub mode: Option<String>,
    // paths
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub split: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    // command specific
    pub ids: Option<Vec<String>>,
    pub points: Option<usize>,
    pub half_width: Option<f64>,
    pub tolerance: Option<f64>,
    pub corrupt: Option<bool>,
    pub replicas: Option<usize>,
    pub data_seed: Option<u64>,
    pub same_seed: Option<bool>,
    pub threads: Option<usize>,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(CliConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::usage(format!("config {}: {e}", path.display())))
    }
}

fn parse<T: FromStr>(what: &str, s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>()
        .map_err(|e| Error::usage(format!("--{what}: {e}")))
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn out_dir(common: &CommonArgs, cfg: &CliConfig) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn synth_spec(a: &SynthArgs, cfg: &CliConfig, seed: u64) -> Result<SyntheticSpec> {
    let mean_fn = match a.mean_fn.as_deref().or(cfg.mean_fn.as_deref()) {
        Some(s) => parse::<MeanFn>("mean-fn", s)?,
        None => MeanFn::Sine,
    };
    let noise_fn = match a.noise_fn.as_deref().or(cfg.noise_fn.as_deref()) {
        Some(s) => NoiseFn::parse(s).map_err(|e| Error::usage(format!("--noise-fn: {e}")))?,
        None => NoiseFn::default(),
    };
    let spec = SyntheticSpec {
        n: pick(a.n, cfg.n, 5000),
        feature_dim: pick(a.features, cfg.features, 8),
        mean_fn,
        noise_fn,
        seed,
    };
    spec.validate().map_err(Error::usage)?;
    Ok(spec)
}

struct JudgeSettings {
    noise: f64,
    dd_range: (f64, f64),
}

fn judge_settings(a: &SynthArgs, cfg: &CliConfig) -> Option<JudgeSettings> {
    (a.judges || cfg.judges == Some(true)).then(|| JudgeSettings {
        noise: pick(a.judge_noise, cfg.judge_noise, 0.3),
        dd_range: (pick(a.dd_min, cfg.dd_min, 1.5), pick(a.dd_max, cfg.dd_max, 3.5)),
    })
}

/// Synthetic dataset plus ground-truth latent and σ, with judge scores when
/// requested.
pub fn synth_dataset(a: &SynthArgs, cfg: &CliConfig, seed: u64) -> Result<dae_core::data::SyntheticData> {
    let spec = synth_spec(a, cfg, seed)?;
    let mut data = synth_heteroscedastic(&spec)?;
    if let Some(j) = judge_settings(a, cfg) {
        data.dataset = synth_judges(&data.dataset, j.noise, j.dd_range, seed ^ JUDGE_SEED_SALT)
            .map_err(Error::usage)?;
    }
    Ok(data)
}

/// Resolves training flags over config values over defaults.
pub fn train_config(a: &TrainArgs, cfg: &CliConfig, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let family = match a.family.as_deref().or(cfg.family.as_deref()) {
        Some(s) => parse::<DistributionFamily>("family", s)?,
        None => d.family,
    };
    let loss = match a.loss.as_deref().or(cfg.loss.as_deref()) {
        Some(s) => parse::<LossKind>("loss", s)?,
        None => d.loss,
    };
    let model = match a.model.as_deref().or(cfg.model.as_deref()) {
        Some(s) => parse::<ModelKind>("model", s)?,
        None => d.model,
    };
    let eval_mode = match a.mode.as_deref().or(cfg.mode.as_deref()) {
        Some(s) => parse::<ReadoutMode>("mode", s)?,
        None => d.eval_mode,
    };
    let c = TrainConfig {
        epochs: pick(a.epochs, cfg.epochs, d.epochs),
        batch_size: pick(a.batch, cfg.batch, d.batch_size),
        seed,
        loss,
        weights: LossWeights {
            alpha: pick(a.alpha, cfg.alpha, d.weights.alpha),
            beta: pick(a.beta, cfg.beta, d.weights.beta),
        },
        family,
        model,
        lr: pick(a.lr, cfg.lr, d.lr),
        eval_every: pick(a.eval_every, cfg.eval_every, d.eval_every),
        hidden: pick(a.hidden.clone(), cfg.hidden.clone(), d.hidden),
        intervals: pick(a.intervals, cfg.intervals, d.intervals),
        eval_mode,
    };
    c.validate().map_err(Error::usage)?;
    Ok(c)
}

fn load_split(a: &DataArgs, cfg: &CliConfig, seed: u64) -> Result<Option<(Dataset, Dataset)>> {
    let Some(path) = a.data.clone().or_else(|| cfg.data.clone()) else {
        return Ok(None);
    };
    let data = io::load_dataset(&path)?;
    split_or_load(data, a, cfg, seed).map(Some)
}

fn split_or_load(data: Dataset, a: &DataArgs, cfg: &CliConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    match a.eval_data.clone().or_else(|| cfg.eval_data.clone()) {
        Some(p) => Ok((data, io::load_dataset(&p)?)),
        None => {
            let frac = pick(a.split, cfg.split, 0.75);
            if !(frac > 0.0 && frac < 1.0) {
                return Err(Error::usage("--split must lie strictly between 0 and 1"));
            }
            Ok(split(&data, frac, seed)?)
        }
    }
}

fn require_path(flag: Option<PathBuf>, file: Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or(file)
        .ok_or_else(|| Error::usage(format!("--{name} is required")))
}

fn check_width(model: &DaeModel, data: &Dataset) -> Result<()> {
    if model.input_dim() != data.feature_dim() {
        return Err(Error::Data(format!(
            "incompatible checkpoint and dataset: the model expects F={} features, the dataset has F={}",
            model.input_dim(),
            data.feature_dim()
        )));
    }
    Ok(())
}

fn fmt_rho(r: Option<f64>) -> String {
    r.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
}

pub fn cmd_synth(c: &SynthCmd, log: &mut dyn std::io::Write) -> Result<()> {
    let cfg = CliConfig::load(c.common.config.as_deref())?;
    let seed = pick(c.common.seed, cfg.seed, 0);
    let data = synth_dataset(&c.synth, &cfg, seed)?;
    let dir = out_dir(&c.common, &cfg)?;
    io::write_csv(&dir.join("data.csv"), &data.dataset)?;
    if c.binary || cfg.binary == Some(true) {
        io::write_binary(&dir.join("data.daef"), &data.dataset)?;
    }
    let ids: Vec<&str> = data.dataset.records().iter().map(|r| r.id.as_str()).collect();
    io::write_sigma_table(&dir.join("sigma.csv"), &ids, &data.latent, &data.sigma)?;
    writeln!(log, "wrote {} records to {}", data.dataset.len(), dir.display()).ok();
    Ok(())
}

pub fn cmd_train(c: &TrainCmd, log: &mut dyn std::io::Write) -> Result<()> {
    let cfg = CliConfig::load(c.common.config.as_deref())?;
    let seed = pick(c.common.seed, cfg.seed, 0);
    let config = train_config(&c.train, &cfg, seed)?;
    let (train, eval) = load_split(&c.data, &cfg, seed)?
        .ok_or_else(|| Error::usage("--data is required"))?;
    let dir = out_dir(&c.common, &cfg)?;
    let result = fit(&config, &train, &eval)?;
    checkpoint::save(&dir.join("checkpoint.json"), &result.best)?;
    report::write_history(&dir.join("history.csv"), &result.history)?;
    let last = result.history.last().expect("fit records the final epoch");
    writeln!(log, "final eval rho: {} (epoch {})", fmt_rho(last.eval_rho), last.epoch).ok();
    writeln!(
        log,
        "best eval rho: {} (epoch {})",
        fmt_rho(result.best.eval_rho),
        result.best.epoch
    )
    .ok();
    Ok(())
}

pub fn cmd_eval(c: &EvalCmd, log: &mut dyn std::io::Write) -> Result<()> {
    let cfg = CliConfig::load(c.common.config.as_deref())?;
    let ck_path = require_path(c.checkpoint.clone(), cfg.checkpoint.clone(), "checkpoint")?;
    let data_path = require_path(c.data.clone(), cfg.data.clone(), "data")?;
    let mode = match c.mode.as_deref().or(cfg.mode.as_deref()) {
        Some(s) => parse::<ReadoutMode>("mode", s)?,
        None => ReadoutMode::Mean,
    };
    let ck = checkpoint::load(&ck_path)?;
    let family = match c.family.as_deref().or(cfg.family.as_deref()) {
        Some(s) => parse::<DistributionFamily>("family", s)?,
        None => ck.config.family,
    };
    let seed = pick(c.common.seed, cfg.seed, 0);
    let data = io::load_dataset(&data_path)?;
    check_width(&ck.model, &data)?;
    let dir = out_dir(&c.common, &cfg)?;
    let rep = evaluate(&ck.model, &data, mode, &family, &mut Rng::new(seed))?;
    report::write_report_csv(&dir.join("report.csv"), &rep)?;
    report::write_report_json(&dir.join("report.json"), &rep)?;
    writeln!(
        log,
        "rho: {} rmse: {:.6} n: {} mean sigma2: {:.6}",
        fmt_rho(rep.spearman_rho),
        rep.rmse,
        rep.n,
        rep.mean_sigma2
    )
    .ok();
    Ok(())
}

fn safe_file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

pub fn cmd_sample_dist(c: &SampleDistCmd, log: &mut dyn std::io::Write) -> Result<()> {
    let cfg = CliConfig::load(c.common.config.as_deref())?;
    let ck_path = require_path(c.checkpoint.clone(), cfg.checkpoint.clone(), "checkpoint")?;
    let data_path = require_path(c.data.clone(), cfg.data.clone(), "data")?;
    let points = pick(c.points, cfg.points, 201);
    let half_width = pick(c.half_width, cfg.half_width, 4.0);
    if points == 0 {
        return Err(Error::usage("--points must be at least 1"));
    }
    if !(half_width > 0.0 && half_width.is_finite()) {
        return Err(Error::usage("--half-width must be positive"));
    }
    let ck = checkpoint::load(&ck_path)?;
    let family = match c.family.as_deref().or(cfg.family.as_deref()) {
        Some(s) => parse::<DistributionFamily>("family", s)?,
        None => ck.config.family,
    };
    let data = io::load_dataset(&data_path)?;
    check_width(&ck.model, &data)?;
    let ids: Vec<String> = if !c.ids.is_empty() {
        c.ids.clone()
    } else {
        cfg.ids
            .clone()
            .unwrap_or_else(|| data.records().iter().map(|r| r.id.clone()).collect())
    };
    let mut indices = Vec::with_capacity(ids.len());
    for id in &ids {
        let i = data
            .records()
            .iter()
            .position(|r| &r.id == id)
            .ok_or_else(|| Error::Data(format!("unknown record id `{id}`")))?;
        indices.push(i);
    }
    let dir = out_dir(&c.common, &cfg)?;
    let x = data.feature_matrix(&indices);
    // (file suffix, location, scale) per curve, row-major over records
    let mut curves: Vec<Vec<(String, f64, f64)>> = vec![Vec::new(); indices.len()];
    match &ck.model {
        DaeModel::Mlp(m) => {
            let out = m.forward(&x)?;
            for (i, c) in curves.iter_mut().enumerate() {
                c.push((String::new(), out.mu[i], (0.5 * out.logvar[i]).exp()));
            }
        }
        DaeModel::Mt(m) => {
            let heads = m.forward_mt(&x)?;
            for (i, c) in curves.iter_mut().enumerate() {
                for (j, h) in heads.iter().enumerate() {
                    c.push((format!("_judge{j}"), h.mu[i], (0.5 * h.logvar[i]).exp()));
                }
            }
        }
        DaeModel::Core(m) => {
            let out = m.forward(&x)?;
            for ((i, k), c) in out.selected_intervals().into_iter().enumerate().zip(&mut curves) {
                let (l, r) = m.spec().interval(k);
                let width = r - l;
                let loc = l + out.within_mean[i] * width;
                c.push((String::new(), loc, (0.5 * out.within_logvar[i]).exp() * width));
            }
        }
    }
    let mut written = 0;
    for (id, cs) in ids.iter().zip(&curves) {
        for (suffix, mu, sigma) in cs {
            let grid = Grid::around(*mu, *sigma, half_width, points);
            let curve = density_curve(*mu, *sigma, &family, &grid)?;
            let name = format!("density_{}{suffix}.csv", safe_file_stem(id));
            report::write_density(&dir.join(name), &curve)?;
            written += 1;
        }
    }
    writeln!(log, "wrote {written} density curves to {}", dir.display()).ok();
    Ok(())
}

/// Report of one model/loss combination from [`cmd_check_grad`].
pub struct GradCase {
    pub model: ModelKind,
    pub report: dae_core::gradcheck::GradCheckReport,
}

pub fn run_check_grad(
    features: usize,
    batch: usize,
    hidden: &[usize],
    tolerance: f64,
    seed: u64,
    corrupt: bool,
) -> Result<Vec<GradCase>> {
    let spec = SyntheticSpec {
        n: batch,
        feature_dim: features,
        seed,
        ..Default::default()
    };
    let base = synth_heteroscedastic(&spec)?.dataset;
    let judged = synth_judges(&base, 0.3, (1.5, 3.5), seed ^ JUDGE_SEED_SALT)?;
    let rows: Vec<usize> = (0..batch).collect();
    let arch = Architecture {
        input_dim: features,
        hidden: hidden.to_vec(),
    };
    let mut cases = Vec::new();
    for kind in [ModelKind::Mlp, ModelKind::Mt, ModelKind::Core] {
        let (data, spec) = match kind {
            ModelKind::Mt => (&judged, None),
            ModelKind::Core => {
                let (lo, hi) = base.label_range();
                (&base, Some(IntervalSpec::uniform(lo - 0.5, hi + 0.5, 4)?))
            }
            ModelKind::Mlp => (&base, None),
        };
        let model = DaeModel::init(kind, &arch, spec, seed)?;
        let b = Batch::from_dataset(data, &rows);
        for loss in LossKind::ALL {
            let report = finite_diff_check(&model, &b, loss, LossWeights::default(), tolerance, corrupt)?;
            cases.push(GradCase { model: kind, report });
        }
    }
    Ok(cases)
}

pub fn cmd_check_grad(c: &CheckGradCmd, log: &mut dyn std::io::Write) -> Result<()> {
    let cfg = CliConfig::load(c.common.config.as_deref())?;
    let features = pick(c.features, cfg.features, 8);
    let batch = pick(c.batch, cfg.batch, 4);
    let hidden = pick(c.hidden.clone(), cfg.hidden.clone(), vec![64, 32, 16]);
    let tolerance = pick(c.tolerance, cfg.tolerance, 1e-4);
    let seed = pick(c.common.seed, cfg.seed, 0);
    let corrupt = c.corrupt || cfg.corrupt == Some(true);
    if features == 0 || batch < 2 || hidden.is_empty() || hidden.contains(&0) {
        return Err(Error::usage("check-grad needs features >= 1, batch >= 2 and positive widths"));
    }
    let cases = run_check_grad(features, batch, &hidden, tolerance, seed, corrupt)?;
    let mut failed = 0;
    for case in &cases {
        let r = &case.report;
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        writeln!(log, "{verdict} model={} loss={} max_rel_error={:.3e}", case.model, r.loss, r.max_rel_error).ok();
        for p in &r.params {
            writeln!(log, "    {:<28} n={:<6} max_rel_error={:.3e}", p.name, p.elements, p.max_rel_error).ok();
        }
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::Failed(format!(
            "gradient check failed for {failed} of {} cases (tolerance {tolerance:e})",
            cases.len()
        )));
    }
    writeln!(log, "all {} gradient checks passed (tolerance {tolerance:e})", cases.len()).ok();
    Ok(())
}

/// Trains each replica with its own seed and reports them in replica order.
pub fn run_replicas(
    base: &TrainConfig,
    train: &Dataset,
    eval: &Dataset,
    seeds: &[u64],
) -> Result<Vec<ReplicaResult>> {
    seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let config = TrainConfig {
                seed,
                ..base.clone()
            };
            let r = fit(&config, train, eval)?;
            let rep = evaluate(&r.best.model, eval, ReadoutMode::Mean, &config.family, &mut Rng::new(seed))?;
            Ok(ReplicaResult {
                replica: i,
                seed,
                best_epoch: r.best.epoch,
                eval_rho: r.best.eval_rho,
                mean_sigma2: r.best.mean_sigma2,
                mean_sigma: rep.mean_sigma,
            })
        })
        .collect()
}

pub fn summarize(results: &[ReplicaResult]) -> Result<StabilitySummary> {
    let s2: Vec<f64> = results.iter().map(|r| r.mean_sigma2).collect();
    let s: Vec<f64> = results.iter().map(|r| r.mean_sigma).collect();
    Ok(StabilitySummary {
        sigma2: quartiles(&s2)?,
        sigma: quartiles(&s)?,
    })
}

pub fn cmd_variance_stability(c: &StabilityCmd, log: &mut dyn std::io::Write) -> Result<()> {
    let cfg = CliConfig::load(c.common.config.as_deref())?;
    let seed = pick(c.common.seed, cfg.seed, 0);
    let data_seed = pick(c.data_seed, cfg.data_seed, 0);
    let replicas = pick(c.replicas, cfg.replicas, 20);
    if replicas < 2 {
        return Err(Error::usage("--replicas must be at least 2"));
    }
    let config = train_config(&c.train, &cfg, seed)?;
    let (train, eval) = match load_split(&c.data, &cfg, data_seed)? {
        Some(pair) => pair,
        None => {
            let data = synth_dataset(&c.synth, &cfg, data_seed)?.dataset;
            split_or_load(data, &c.data, &cfg, data_seed)?
        }
    };
    let same = c.same_seed || cfg.same_seed == Some(true);
    let seeds: Vec<u64> = (0..replicas as u64)
        .map(|r| if same { seed } else { seed.wrapping_add(r) })
        .collect();
    let results = match c.threads.or(cfg.threads) {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::usage(format!("--threads: {e}")))?
            .install(|| run_replicas(&config, &train, &eval, &seeds))?,
        None => run_replicas(&config, &train, &eval, &seeds)?,
    };
    let summary = summarize(&results)?;
    let dir = out_dir(&c.common, &cfg)?;
    report::write_stability(&dir.join("variance_stability.csv"), &results, &summary)?;
    let (q1, med, q3) = summary.sigma2;
    writeln!(
        log,
        "{replicas} replicas: mean sigma2 q1={q1:.6} median={med:.6} q3={q3:.6}; mean sigma IQR={:.6}",
        summary.iqr_sigma()
    )
    .ok();
    Ok(())
}

pub fn run(cli: &Cli, log: &mut dyn std::io::Write) -> Result<()> {
    match &cli.command {
        Command::Synth(c) => cmd_synth(c, log),
        Command::Train(c) => cmd_train(c, log),
        Command::Eval(c) => cmd_eval(c, log),
        Command::SampleDist(c) => cmd_sample_dist(c, log),
        Command::CheckGrad(c) => cmd_check_grad(c, log),
        Command::VarianceStability(c) => cmd_variance_stability(c, log),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                write!(out, "{text}").ok();
            } else {
                write!(err, "{text}").ok();
            }
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            writeln!(err, "error: {e}").ok();
            e.exit_code()
        }
    }
}
