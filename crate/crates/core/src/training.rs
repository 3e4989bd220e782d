//! Losses, the Adam optimizer and the minibatch training loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autodiff::{Parameter, Tape, Tensor, Var};
use crate::data::Dataset;
use crate::distributions::{DistributionFamily, Rng};
use crate::error::{invalid, Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{
    Architecture, DaeModel, HeadVars, IntervalSpec, ModelKind, OutputVars, ReadoutMode,
    DEFAULT_HIDDEN, DEFAULT_INTERVALS, NUM_JUDGES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LossKind {
    /// Weighted reconstruction + log-variance support loss.
    #[default]
    Dae,
    /// `(y - (μ + σ²))²` ablation.
    Mse,
    /// `(y - μ)²`; the variance head receives no gradient.
    Regression,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Dae => "dae",
            LossKind::Mse => "mse",
            LossKind::Regression => "regression",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dae" => Ok(LossKind::Dae),
            "mse" => Ok(LossKind::Mse),
            "regression" => Ok(LossKind::Regression),
            other => Err(invalid(format!("unknown loss `{other}`"))),
        }
    }
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Dae, LossKind::Mse, LossKind::Regression];
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.6,
            beta: 0.4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(invalid("loss weights must be finite and non-negative"));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(invalid("loss weights must not both be zero"));
        }
        Ok(())
    }
}

fn check_lengths(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { what, left: a, right: b });
    }
    if a == 0 {
        return Err(Error::Empty(what));
    }
    Ok(())
}

/// Mean of `α·(y - μ)²/σ² + β·log σ²`, `σ² = exp(logvar)`.
pub fn dae_loss(mu: &[f64], logvar: &[f64], y: &[f64], w: LossWeights) -> Result<f64> {
    check_lengths("dae_loss", mu.len(), y.len())?;
    check_lengths("dae_loss", logvar.len(), y.len())?;
    let s: f64 = mu
        .iter()
        .zip(logvar)
        .zip(y)
        .map(|((&m, &lv), &t)| w.alpha * (t - m) * (t - m) * libm::exp(-lv) + w.beta * lv)
        .sum();
    Ok(s / y.len() as f64)
}

/// Mean of `(y - (μ + σ²))²`.
pub fn mse_ablation_loss(mu: &[f64], logvar: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths("mse_ablation_loss", mu.len(), y.len())?;
    check_lengths("mse_ablation_loss", logvar.len(), y.len())?;
    let s: f64 = mu
        .iter()
        .zip(logvar)
        .zip(y)
        .map(|((&m, &lv), &t)| {
            let r = t - (m + libm::exp(lv));
            r * r
        })
        .sum();
    Ok(s / y.len() as f64)
}

/// Mean of `(y - μ)²`.
pub fn regression_baseline_loss(mu: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths("regression_baseline_loss", mu.len(), y.len())?;
    let s: f64 = mu.iter().zip(y).map(|(&m, &t)| (t - m) * (t - m)).sum();
    Ok(s / y.len() as f64)
}

fn check_var_lengths(tape: &Tape, what: &'static str, a: Var, b: Var) -> Result<()> {
    check_lengths(what, tape.value(a).len(), tape.value(b).len())
}

/// Tape form of [`dae_loss`].
pub fn dae_loss_var(tape: &mut Tape, mu: Var, logvar: Var, y: Var, w: LossWeights) -> Result<Var> {
    check_var_lengths(tape, "dae_loss", mu, y)?;
    check_var_lengths(tape, "dae_loss", logvar, y)?;
    let r = tape.sub(y, mu)?;
    let r2 = tape.square(r)?;
    let neg = tape.scale(logvar, -1.0);
    let inv_var = tape.exp(neg)?;
    let rec = tape.mul(r2, inv_var)?;
    let rec = tape.scale(rec, w.alpha);
    let sup = tape.scale(logvar, w.beta);
    let per = tape.add(rec, sup)?;
    tape.reduce_mean(per)
}

/// Tape form of [`mse_ablation_loss`].
pub fn mse_ablation_loss_var(tape: &mut Tape, mu: Var, logvar: Var, y: Var) -> Result<Var> {
    check_var_lengths(tape, "mse_ablation_loss", mu, y)?;
    check_var_lengths(tape, "mse_ablation_loss", logvar, y)?;
    let var = tape.exp(logvar)?;
    let pred = tape.add(mu, var)?;
    let r = tape.sub(y, pred)?;
    let r2 = tape.square(r)?;
    tape.reduce_mean(r2)
}

/// Tape form of [`regression_baseline_loss`].
pub fn regression_baseline_loss_var(tape: &mut Tape, mu: Var, y: Var) -> Result<Var> {
    check_var_lengths(tape, "regression_baseline_loss", mu, y)?;
    let r = tape.sub(y, mu)?;
    let r2 = tape.square(r)?;
    tape.reduce_mean(r2)
}

pub fn loss_var(
    tape: &mut Tape,
    kind: LossKind,
    head: HeadVars,
    y: Var,
    w: LossWeights,
) -> Result<Var> {
    match kind {
        LossKind::Dae => dae_loss_var(tape, head.mu, head.logvar, y, w),
        LossKind::Mse => mse_ablation_loss_var(tape, head.mu, head.logvar, y),
        LossKind::Regression => regression_baseline_loss_var(tape, head.mu, y),
    }
}

/// Bias-corrected Adam with lazily allocated moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of `params` from `grads`. Buffers are shaped on the first
    /// call; later calls must pass the same shapes.
    pub fn step_slices(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::LengthMismatch {
                what: "adam parameters vs gradients",
                left: params.len(),
                right: grads.len(),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: vec![p.len()],
                    right: vec![g.len()],
                });
            }
            if let Some(m) = self.m.get(i) {
                if m.len() != p.len() {
                    return Err(Error::Shape {
                        op: "adam_step",
                        left: vec![m.len()],
                        right: vec![p.len()],
                    });
                }
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(Error::LengthMismatch {
                what: "adam parameter count",
                left: self.m.len(),
                right: params.len(),
            });
        }
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
        Ok(())
    }

    /// Updates each parameter from its gradient buffer. A parameter without
    /// a gradient is treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        let zeros: Vec<Vec<f64>> = params
            .iter()
            .map(|p| if p.tensor.grad().is_some() { Vec::new() } else { vec![0.0; p.tensor.len()] })
            .collect();
        let grads: Vec<Vec<f64>> = params
            .iter()
            .zip(&zeros)
            .map(|(p, z)| p.tensor.grad().map_or_else(|| z.clone(), <[f64]>::to_vec))
            .collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut values: Vec<&mut [f64]> = params.iter_mut().map(|p| p.tensor.data_mut()).collect();
        self.step_slices(&mut values, &grad_refs)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub weights: LossWeights,
    pub family: DistributionFamily,
    pub model: ModelKind,
    pub lr: f64,
    pub eval_every: usize,
    /// Trunk widths.
    pub hidden: Vec<usize>,
    /// Interval count for the interval model.
    pub intervals: usize,
    pub eval_mode: ReadoutMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            seed: 0,
            loss: LossKind::Dae,
            weights: LossWeights::default(),
            family: DistributionFamily::Gaussian,
            model: ModelKind::Mlp,
            lr: 1e-4,
            eval_every: 1,
            hidden: DEFAULT_HIDDEN.to_vec(),
            intervals: DEFAULT_INTERVALS,
            eval_mode: ReadoutMode::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(invalid("epochs, batch size and eval_every must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("learning rate must be positive and finite"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(invalid("hidden widths must be non-empty and positive"));
        }
        if self.model == ModelKind::Core && self.intervals == 0 {
            return Err(invalid("interval count must be positive"));
        }
        self.weights.validate()?;
        self.family.validate()
    }
}

/// Features and targets for one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<f64>,
    /// Ascending judge scores per row, when the dataset has judges.
    pub sorted_judges: Option<Vec<[f64; NUM_JUDGES]>>,
}

impl Batch {
    pub fn from_dataset(dataset: &Dataset, indices: &[usize]) -> Self {
        let recs = dataset.records();
        let sorted_judges = dataset.has_judges().then(|| {
            indices
                .iter()
                .map(|&i| {
                    let mut j = recs[i].judges.expect("judge presence is uniform");
                    j.sort_by(f64::total_cmp);
                    j
                })
                .collect()
        });
        Batch {
            x: dataset.feature_matrix(indices),
            labels: indices.iter().map(|&i| recs[i].label).collect(),
            sorted_judges,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Builds the training loss for `model` on `batch` over an existing tape
/// whose parameter leaves are `vars`.
///
/// * mlp: the selected loss on the labels.
/// * mt: head `j` against the `j`-th smallest judge score, averaged over
///   the seven heads.
/// * core: interval cross-entropy on the true interval plus the selected
///   loss on the normalized in-interval offset, summed 1:1.
pub fn batch_loss(
    tape: &mut Tape,
    model: &DaeModel,
    vars: &[Var],
    batch: &Batch,
    kind: LossKind,
    w: LossWeights,
) -> Result<Var> {
    let x = tape.constant(batch.x.clone());
    match model.forward_tape(tape, vars, x)? {
        OutputVars::Single(h) => {
            let y = tape.constant(Tensor::vector(batch.labels.clone()));
            loss_var(tape, kind, h, y, w)
        }
        OutputVars::Judges(heads) => {
            let judges = batch
                .sorted_judges
                .as_ref()
                .ok_or_else(|| Error::Data("the judge model needs judge scores".into()))?;
            let mut total: Option<Var> = None;
            for (j, h) in heads.iter().enumerate() {
                let y = tape.constant(Tensor::vector(judges.iter().map(|r| r[j]).collect()));
                let l = loss_var(tape, kind, *h, y, w)?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let total = total.expect("seven heads");
            Ok(tape.scale(total, 1.0 / NUM_JUDGES as f64))
        }
        OutputVars::Interval(c) => {
            let spec = model.interval_spec().expect("interval model has a spec");
            let classes: Vec<usize> = batch.labels.iter().map(|&y| spec.locate(y)).collect();
            let offsets: Vec<f64> = batch
                .labels
                .iter()
                .zip(&classes)
                .map(|(&y, &k)| spec.normalized_offset(y, k).clamp(0.0, 1.0))
                .collect();
            let xent = tape.softmax_cross_entropy(c.logits, &classes)?;
            let xent = tape.reduce_mean(xent)?;
            let y = tape.constant(Tensor::vector(offsets));
            let head = HeadVars {
                mu: c.within_mean,
                logvar: c.within_logvar,
            };
            let within = loss_var(tape, kind, head, y, w)?;
            tape.add(xent, within)
        }
    }
}

/// Loss value of `model` on `batch` without recording gradients.
pub fn batch_loss_value(model: &DaeModel, batch: &Batch, kind: LossKind, w: LossWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = model
        .parameters()
        .into_iter()
        .map(|p| tape.constant(p.tensor.clone()))
        .collect();
    let l = batch_loss(&mut tape, model, &vars, batch, kind, w)?;
    Ok(tape.value(l).data()[0])
}

fn check_compat(model: &DaeModel, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if dataset.feature_dim() != model.input_dim() {
        return Err(Error::Shape {
            op: "train",
            left: vec![dataset.feature_dim()],
            right: vec![model.input_dim()],
        });
    }
    if model.kind() == ModelKind::Mt && !dataset.has_judges() {
        return Err(Error::Data("the judge model needs judge scores and dd".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Example-weighted mean of the minibatch losses.
    pub mean_loss: f64,
    pub steps: usize,
}

/// One pass over `dataset` in an order shuffled from `(config.seed, epoch)`.
pub fn train_epoch(
    model: &mut DaeModel,
    adam: &mut AdamState,
    dataset: &Dataset,
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    check_compat(model, dataset)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    Rng::derived(config.seed, epoch as u64).shuffle(&mut order);
    let mut total = 0.0;
    let mut steps = 0;
    for idx in order.chunks(config.batch_size) {
        let batch = Batch::from_dataset(dataset, idx);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let loss = batch_loss(&mut tape, model, &vars, &batch, config.loss, config.weights)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Data(format!(
                "training loss became non-finite at epoch {epoch}, step {steps}"
            )));
        }
        tape.backward(loss)?;
        model.zero_grad();
        model.accumulate_grads(&tape, &vars);
        adam.step(&mut model.parameters_mut())?;
        total += value * idx.len() as f64;
        steps += 1;
    }
    Ok(EpochStats {
        mean_loss: total / dataset.len() as f64,
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HistoryRow {
    /// 1-based epoch count.
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_rho: Option<f64>,
    pub mean_sigma2: f64,
}

/// A trained model with the settings and evaluation that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DaeModel,
    pub config: TrainConfig,
    pub epoch: usize,
    pub eval_rho: Option<f64>,
    pub mean_sigma2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Checkpoint with the highest evaluation ρ (the earliest on ties).
    pub best: Checkpoint,
    pub history: Vec<HistoryRow>,
}

/// Interval partition used for the interval model: `k` equal intervals over
/// the training label range.
pub fn interval_spec_for(dataset: &Dataset, k: usize) -> Result<IntervalSpec> {
    let (lo, hi) = dataset.label_range();
    IntervalSpec::uniform(lo, hi, k)
}

pub fn init_model(config: &TrainConfig, train: &Dataset) -> Result<DaeModel> {
    let arch = Architecture {
        input_dim: train.feature_dim(),
        hidden: config.hidden.clone(),
    };
    let spec = match config.model {
        ModelKind::Core => Some(interval_spec_for(train, config.intervals)?),
        _ => None,
    };
    DaeModel::init(config.model, &arch, spec, config.seed)
}

/// Evaluation used during training; sample mode draws from a stream tied
/// to the epoch so reruns see identical noise.
pub fn evaluate_for_epoch(
    model: &DaeModel,
    eval: &Dataset,
    config: &TrainConfig,
    epoch: usize,
) -> Result<EvalReport> {
    let mut rng = Rng::derived(config.seed ^ 0x5eed_e7a1, epoch as u64);
    evaluate(model, eval, config.eval_mode, &config.family, &mut rng)
}

/// Trains for `config.epochs`, evaluating every `eval_every` epochs and at
/// the final epoch, and keeps the best-ρ model.
pub fn fit(config: &TrainConfig, train: &Dataset, eval: &Dataset) -> Result<FitResult> {
    config.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Empty("training or evaluation split"));
    }
    let mut model = init_model(config, train)?;
    check_compat(&model, eval)?;
    let mut adam = AdamState::new(config.lr);
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    for epoch in 1..=config.epochs {
        let stats = train_epoch(&mut model, &mut adam, train, config, epoch)?;
        if epoch % config.eval_every != 0 && epoch != config.epochs {
            continue;
        }
        let report = evaluate_for_epoch(&model, eval, config, epoch)?;
        history.push(HistoryRow {
            epoch,
            train_loss: stats.mean_loss,
            eval_rho: report.spearman_rho,
            mean_sigma2: report.mean_sigma2,
        });
        let better = match (&best, report.spearman_rho) {
            (None, _) => true,
            (Some(b), Some(r)) => b.eval_rho.is_none_or(|br| r > br),
            (Some(_), None) => false,
        };
        if better {
            let mut m = model.clone();
            m.zero_grad();
            best = Some(Checkpoint {
                model: m,
                config: config.clone(),
                epoch,
                eval_rho: report.spearman_rho,
                mean_sigma2: report.mean_sigma2,
            });
        }
    }
    Ok(FitResult {
        best: best.expect("at least one evaluation"),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_heteroscedastic, synth_judges, SyntheticSpec};
    use crate::distributions::Rng;
    use proptest::prelude::*;

    #[test]
    fn dae_loss_examples() {
        let w = LossWeights::default();
        assert!((dae_loss(&[1.0], &[0.0], &[2.0], w).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(dae_loss(&[3.0], &[0.0], &[3.0], w).unwrap(), 0.0);
        let plain = LossWeights { alpha: 1.0, beta: 0.0 };
        let mu = [0.5, -1.0];
        let y = [1.5, 1.0];
        assert_eq!(
            dae_loss(&mu, &[0.0, 0.0], &y, plain).unwrap(),
            regression_baseline_loss(&mu, &y).unwrap()
        );
        assert!(dae_loss(&mu, &[0.0], &y, w).is_err());
    }

    #[test]
    fn mse_and_regression_examples() {
        assert_eq!(mse_ablation_loss(&[1.0], &[0.0], &[2.0]).unwrap(), 0.0);
        assert!(mse_ablation_loss(&[1.0], &[-10.0], &[1.0]).unwrap() < 1e-8);
        assert_eq!(regression_baseline_loss(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        assert!(regression_baseline_loss(&[0.0], &[1.0, 3.0]).is_err());
    }

    #[test]
    fn tape_losses_match_values() {
        let mu = [0.3, -0.2, 1.1];
        let lv = [0.5, -1.0, 0.1];
        let y = [1.0, 0.0, 0.7];
        let w = LossWeights::default();
        let mut t = Tape::new();
        let (m, l, yy) = (
            t.variable(Tensor::vector(mu.to_vec())),
            t.variable(Tensor::vector(lv.to_vec())),
            t.constant(Tensor::vector(y.to_vec())),
        );
        let d = dae_loss_var(&mut t, m, l, yy, w).unwrap();
        let e = mse_ablation_loss_var(&mut t, m, l, yy).unwrap();
        let r = regression_baseline_loss_var(&mut t, m, yy).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-14;
        assert!(close(t.value(d).data()[0], dae_loss(&mu, &lv, &y, w).unwrap()));
        assert!(close(t.value(e).data()[0], mse_ablation_loss(&mu, &lv, &y).unwrap()));
        assert!(close(t.value(r).data()[0], regression_baseline_loss(&mu, &y).unwrap()));
        t.backward(r).unwrap();
        assert!(t.grad(l).is_none() || t.grad(l).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mu = [0.3, -0.2, 1.1];
        let lv = [0.5, -1.0, 0.1];
        let y = [1.0, 0.0, 0.7];
        let w = LossWeights::default();
        for kind in LossKind::ALL {
            let f = |mu: &[f64], lv: &[f64]| match kind {
                LossKind::Dae => dae_loss(mu, lv, &y, w).unwrap(),
                LossKind::Mse => mse_ablation_loss(mu, lv, &y).unwrap(),
                LossKind::Regression => regression_baseline_loss(mu, &y).unwrap(),
            };
            let mut t = Tape::new();
            let m = t.variable(Tensor::vector(mu.to_vec()));
            let l = t.variable(Tensor::vector(lv.to_vec()));
            let yy = t.constant(Tensor::vector(y.to_vec()));
            let loss = loss_var(&mut t, kind, HeadVars { mu: m, logvar: l }, yy, w).unwrap();
            t.backward(loss).unwrap();
            let gm = t.grad(m).unwrap().to_vec();
            let gl = t.grad(l).map_or(vec![0.0; 3], <[f64]>::to_vec);
            let h = 1e-6;
            for i in 0..3 {
                let (mut a, mut b) = (mu.to_vec(), mu.to_vec());
                a[i] += h;
                b[i] -= h;
                let n = (f(&a, &lv) - f(&b, &lv)) / (2.0 * h);
                assert!((n - gm[i]).abs() < 1e-4 * n.abs().max(1.0), "{kind} dmu");
                let (mut a, mut b) = (lv.to_vec(), lv.to_vec());
                a[i] += h;
                b[i] -= h;
                let n = (f(&mu, &a) - f(&mu, &b)) / (2.0 * h);
                assert!((n - gl[i]).abs() < 1e-4 * n.abs().max(1.0), "{kind} dlogvar");
            }
        }
    }

    #[test]
    fn adam_examples() {
        let mut s = AdamState::new(0.1);
        let mut theta = [0.0];
        s.step_slices(&mut [&mut theta], &[&[1.0]]).unwrap();
        assert!((theta[0] + 0.1).abs() < 1e-6);
        assert_eq!(s.steps(), 1);

        let mut z = AdamState::new(0.1);
        let mut p = [1.5, -2.0];
        z.step_slices(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, [1.5, -2.0]);

        // same gradient, advancing t changes the step
        let mut s = AdamState::new(0.1);
        let mut a = [0.0];
        s.step_slices(&mut [&mut a], &[&[1.0]]).unwrap();
        let first = a[0];
        s.step_slices(&mut [&mut a], &[&[0.5]]).unwrap();
        let second = a[0] - first;
        assert_ne!(second, first);
        assert!(s.step_slices(&mut [&mut a], &[&[1.0, 2.0]]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { weights: LossWeights { alpha: 0.0, beta: 0.0 }, ..Default::default() },
            TrainConfig { hidden: vec![], ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 6,
            batch_size: 16,
            seed: 1,
            lr: 3e-3,
            eval_every: 2,
            hidden: vec![16, 8],
            intervals: 4,
            ..Default::default()
        }
    }

    fn tiny_data(n: usize) -> Dataset {
        synth_heteroscedastic(&SyntheticSpec { n, feature_dim: 6, seed: 2, ..Default::default() })
            .unwrap()
            .dataset
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let data = tiny_data(200);
        let run = || {
            let c = tiny_config();
            let mut m = init_model(&c, &data).unwrap();
            let mut adam = AdamState::new(c.lr);
            (1..=20)
                .map(|e| train_epoch(&mut m, &mut adam, &data, &c, e).unwrap().mean_loss)
                .collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|l| l.is_finite()));
        assert!(a[19] < a[0], "{a:?}");
    }

    #[test]
    fn regression_loss_leaves_variance_head_unchanged() {
        let data = tiny_data(64);
        let c = TrainConfig { loss: LossKind::Regression, ..tiny_config() };
        let mut m = init_model(&c, &data).unwrap();
        let before = m.parameter("logvar_head.weight").unwrap().tensor.data().to_vec();
        let mean_before = m.parameter("mean_head.weight").unwrap().tensor.data().to_vec();
        let mut adam = AdamState::new(c.lr);
        for e in 1..=3 {
            train_epoch(&mut m, &mut adam, &data, &c, e).unwrap();
        }
        assert_eq!(m.parameter("logvar_head.weight").unwrap().tensor.data(), &before[..]);
        assert_ne!(m.parameter("mean_head.weight").unwrap().tensor.data(), &mean_before[..]);
    }

    #[test]
    fn fit_history_and_best_bookkeeping() {
        let data = tiny_data(120);
        let (tr, ev) = crate::data::split(&data, 0.75, 0).unwrap();
        let c = TrainConfig { epochs: 7, ..tiny_config() };
        let r = fit(&c, &tr, &ev).unwrap();
        let epochs: Vec<usize> = r.history.iter().map(|h| h.epoch).collect();
        assert_eq!(epochs, vec![2, 4, 6, 7]);
        let max = r.history.iter().filter_map(|h| h.eval_rho).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.best.eval_rho, Some(max));
        let again = evaluate(&r.best.model, &ev, ReadoutMode::Mean, &c.family, &mut Rng::new(0)).unwrap();
        assert_eq!(again.spearman_rho, r.best.eval_rho);
    }

    #[test]
    fn mt_and_core_train() {
        let base = tiny_data(96);
        let judged = synth_judges(&base, 0.2, (2.0, 3.0), 3).unwrap();
        for (model, data) in [(ModelKind::Mt, &judged), (ModelKind::Core, &base)] {
            let c = TrainConfig { model, epochs: 3, eval_every: 1, ..tiny_config() };
            let (tr, ev) = crate::data::split(data, 0.75, 0).unwrap();
            let r = fit(&c, &tr, &ev).unwrap();
            assert_eq!(r.history.len(), 3);
            assert!(r.history.iter().all(|h| h.train_loss.is_finite()));
        }
        let c = TrainConfig { model: ModelKind::Mt, ..tiny_config() };
        let (tr, ev) = crate::data::split(&base, 0.75, 0).unwrap();
        assert!(fit(&c, &tr, &ev).is_err());
    }

    proptest! {
        #[test]
        fn dae_loss_decomposes(
            rows in prop::collection::vec((-3.0f64..3.0, -4.0f64..4.0, -3.0f64..3.0), 1..12),
            alpha in 0.0f64..2.0,
            beta in 0.0f64..2.0,
        ) {
            let mu: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let lv: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let full = dae_loss(&mu, &lv, &y, LossWeights { alpha, beta }).unwrap();
            let rec = dae_loss(&mu, &lv, &y, LossWeights { alpha: 1.0, beta: 0.0 }).unwrap();
            let sup = dae_loss(&mu, &lv, &y, LossWeights { alpha: 0.0, beta: 1.0 }).unwrap();
            prop_assert!((full - (alpha * rec + beta * sup)).abs() <= 1e-12 * full.abs().max(1.0));
        }
    }
}
