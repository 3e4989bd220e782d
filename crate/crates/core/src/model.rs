//! Distribution auto-encoder encoders.
//!
//! Every variant shares a fully connected ReLU trunk. The heads differ:
//!
//! * [`DaeMlpModel`]: one `(μ, log σ²)` pair.
//! * [`DaeMtModel`]: seven pairs, one per judge, combined by the trimmed
//!   judge sum times the difficulty degree.
//! * [`DaeCoreModel`]: interval logits plus an in-interval `(μ, log σ²)` pair
//!   read out over the selected interval.
//!
//! Log-variance outputs are clamped to `[-10, 10]` so `σ² = exp(log σ²)` is
//! always positive and finite.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autodiff::{Parameter, Tape, Tensor, Var};
use crate::distributions::{DistributionFamily, Rng};
use crate::error::{invalid, Error, Result};

/// Bounds applied to every log-variance head output.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
/// Judge panel size for the multi-judge model.
pub const NUM_JUDGES: usize = 7;
/// Trunk widths used for full-size 1024-dimensional features.
pub const DEFAULT_HIDDEN: [usize; 3] = [512, 256, 128];
pub const DEFAULT_FEATURE_DIM: usize = 1024;
pub const DEFAULT_INTERVALS: usize = 8;

// Pre-sigmoid clamp for the in-interval mean; sigmoid is flat to 1e-17 beyond it.
const WITHIN_MEAN_CLAMP: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ModelKind {
    #[default]
    Mlp,
    Mt,
    Core,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Mt => "mt",
            ModelKind::Core => "core",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mlp" => Ok(ModelKind::Mlp),
            "mt" => Ok(ModelKind::Mt),
            "core" => Ok(ModelKind::Core),
            other => Err(invalid(format!("unknown model kind `{other}`"))),
        }
    }
}

/// How a score is read out of the predicted distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ReadoutMode {
    /// `ε = 0`: the distribution's location.
    #[default]
    Mean,
    /// `ε` drawn from the configured family.
    Sample,
}

impl fmt::Display for ReadoutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReadoutMode::Mean => "mean",
            ReadoutMode::Sample => "sample",
        })
    }
}

impl FromStr for ReadoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(ReadoutMode::Mean),
            "sample" => Ok(ReadoutMode::Sample),
            other => Err(invalid(format!("unknown read-out mode `{other}`"))),
        }
    }
}

impl ReadoutMode {
    fn eps(self, family: &DistributionFamily, rng: &mut Rng) -> f64 {
        match self {
            ReadoutMode::Mean => 0.0,
            ReadoutMode::Sample => family.sample(rng),
        }
    }
}

/// Ascending boundaries splitting `[score_min, score_max]` into `K` intervals.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IntervalSpec {
    boundaries: Vec<f64>,
}

impl IntervalSpec {
    pub fn new(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(invalid("interval spec needs at least two boundaries"));
        }
        if boundaries.iter().any(|b| !b.is_finite()) {
            return Err(invalid("interval boundaries must be finite"));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("interval boundaries must be strictly ascending"));
        }
        Ok(IntervalSpec { boundaries })
    }

    /// `k` equal-width intervals over `[min, max]`.
    pub fn uniform(min: f64, max: f64, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(invalid("interval count must be at least 1"));
        }
        let width = max - min;
        let mut b: Vec<f64> = (0..k).map(|i| min + width * i as f64 / k as f64).collect();
        b.push(max);
        Self::new(b)
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn len(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.boundaries.len() < 2
    }

    pub fn score_min(&self) -> f64 {
        self.boundaries[0]
    }

    pub fn score_max(&self) -> f64 {
        self.boundaries[self.boundaries.len() - 1]
    }

    /// `(left, right)` of interval `k`.
    pub fn interval(&self, k: usize) -> (f64, f64) {
        (self.boundaries[k], self.boundaries[k + 1])
    }

    /// Index of the interval containing `y`; out-of-range values map to the
    /// nearest end interval.
    pub fn locate(&self, y: f64) -> usize {
        let inner = &self.boundaries[1..self.boundaries.len() - 1];
        inner.partition_point(|&b| b <= y)
    }

    /// Offset of `y` inside interval `k`, normalized to `[0, 1]` for values
    /// within the interval.
    pub fn normalized_offset(&self, y: f64, k: usize) -> f64 {
        let (l, r) = self.interval(k);
        (y - l) / (r - l)
    }
}

/// `y = w·(r - l) + σ_w·ε·(r - l) + l`, evaluated as the convex combination
/// `(1 - w)·l + w·r` for the location so both endpoints are hit exactly.
pub fn interval_readout(w: f64, sigma_w: f64, eps: f64, left: f64, right: f64) -> f64 {
    let location = ((1.0 - w) * left + w * right).clamp(left, right);
    if eps == 0.0 {
        location
    } else {
        location + sigma_w * eps * (right - left)
    }
}

/// Trimmed judge sum times difficulty degree: drop the two lowest and two
/// highest of seven scores, sum the remaining three, multiply by `dd`.
pub fn aggregate_judges(scores: &[f64], dd: f64) -> Result<f64> {
    if scores.len() != NUM_JUDGES {
        return Err(invalid(format!(
            "expected {NUM_JUDGES} judge scores, got {}",
            scores.len()
        )));
    }
    if !(dd > 0.0 && dd.is_finite()) {
        return Err(invalid("difficulty degree must be positive and finite"));
    }
    let mut sorted = [0.0; NUM_JUDGES];
    sorted.copy_from_slice(scores);
    sorted.sort_by(f64::total_cmp);
    Ok((sorted[2] + sorted[3] + sorted[4]) * dd)
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    weight: Parameter,
    bias: Parameter,
}

impl Linear {
    /// Uniform fan-in init, bound `√(6 / fan_in)`; zero bias.
    fn init(name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = libm::sqrt(6.0 / fan_in as f64);
        let w = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Linear {
            weight: Parameter::new(
                format!("{name}.weight"),
                Tensor::new(vec![fan_in, fan_out], w).expect("shape matches data"),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![fan_out])),
        }
    }

    fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }

    fn apply(tape: &mut Tape, vars: &mut VarCursor<'_>, x: Var) -> Result<Var> {
        let (w, b) = (vars.next(), vars.next());
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }
}

/// Walks the bound parameter vars in `parameters()` order.
struct VarCursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> VarCursor<'a> {
    fn new(vars: &'a [Var]) -> Self {
        VarCursor { vars, pos: 0 }
    }

    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Trunk {
    input_dim: usize,
    layers: Vec<Linear>,
}

impl Trunk {
    fn init(input_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        if input_dim == 0 {
            return Err(invalid("feature dimension must be at least 1"));
        }
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(invalid("trunk widths must be non-empty and positive"));
        }
        let mut fan_in = input_dim;
        let layers = hidden
            .iter()
            .enumerate()
            .map(|(i, &width)| {
                let l = Linear::init(&format!("trunk.{i}"), fan_in, width, rng);
                fan_in = width;
                l
            })
            .collect();
        Ok(Trunk { input_dim, layers })
    }

    fn width(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.bias.tensor.len())
    }

    fn hidden(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.bias.tensor.len()).collect()
    }

    fn forward(&self, tape: &mut Tape, vars: &mut VarCursor<'_>, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::Shape {
                op: "forward",
                left: shape.to_vec(),
                right: vec![self.input_dim],
            });
        }
        let mut h = x;
        for _ in &self.layers {
            let z = Linear::apply(tape, vars, h)?;
            h = tape.relu(z);
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct HeadPair {
    mean: Linear,
    logvar: Linear,
}

impl HeadPair {
    fn init(prefix: &str, width: usize, rng: &mut Rng) -> Self {
        HeadPair {
            mean: Linear::init(&format!("{prefix}mean_head"), width, 1, rng),
            logvar: Linear::init(&format!("{prefix}logvar_head"), width, 1, rng),
        }
    }

    fn forward(tape: &mut Tape, vars: &mut VarCursor<'_>, h: Var) -> Result<HeadVars> {
        let m = tape.value(h).shape()[0];
        let mu = Linear::apply(tape, vars, h)?;
        let mu = tape.reshape(mu, vec![m])?;
        let lv = Linear::apply(tape, vars, h)?;
        let lv = tape.reshape(lv, vec![m])?;
        let logvar = tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        Ok(HeadVars { mu, logvar })
    }
}

/// Tape handles for one `(μ, log σ²)` head, each of shape `[batch]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub mu: Var,
    pub logvar: Var,
}

/// Tape handles for the interval model's outputs.
#[derive(Debug, Clone, Copy)]
pub struct CoreVars {
    /// `[batch × K]` interval logits.
    pub logits: Var,
    /// Sigmoid-squashed in-interval mean, `[batch]`.
    pub within_mean: Var,
    /// Clamped in-interval log-variance, `[batch]`.
    pub within_logvar: Var,
}

#[derive(Debug, Clone, Copy)]
pub enum OutputVars {
    Single(HeadVars),
    Judges([HeadVars; NUM_JUDGES]),
    Interval(CoreVars),
}

/// Plain-value output of one head over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl HeadOutput {
    fn read(tape: &Tape, h: HeadVars) -> Self {
        HeadOutput {
            mu: tape.value(h.mu).data().to_vec(),
            logvar: tape.value(h.logvar).data().to_vec(),
        }
    }

    pub fn sigma2(&self) -> Vec<f64> {
        self.logvar.iter().map(|&lv| libm::exp(lv)).collect()
    }
}

/// Plain-value output of the interval model over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreOutput {
    /// Row-major `[batch × K]`.
    pub logits: Vec<f64>,
    pub intervals: usize,
    /// In-interval mean after the sigmoid, in `(0, 1)`.
    pub within_mean: Vec<f64>,
    pub within_logvar: Vec<f64>,
}

impl CoreOutput {
    /// Arg-max interval per row (first index on ties).
    pub fn selected_intervals(&self) -> Vec<usize> {
        self.logits
            .chunks(self.intervals)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &z)| {
                        if z > best.1 {
                            (i, z)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }
}

/// Single-head distribution auto-encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DaeMlpModel {
    trunk: Trunk,
    head: HeadPair,
}

impl DaeMlpModel {
    pub fn init(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let trunk = Trunk::init(input_dim, hidden, &mut rng)?;
        let head = HeadPair::init("", trunk.width(), &mut rng);
        Ok(DaeMlpModel { trunk, head })
    }

    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<HeadVars> {
        let mut cur = VarCursor::new(vars);
        let h = self.trunk.forward(tape, &mut cur, x)?;
        HeadPair::forward(tape, &mut cur, h)
    }

    /// `(μ, log σ²)` for each row of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<HeadOutput> {
        let (tape, out) = run_inference(self.parameters(), x, |t, v, x| self.forward_tape(t, v, x))?;
        Ok(HeadOutput::read(&tape, out))
    }

    /// Reparameterized scores `μ + ε·σ`, `σ = exp(log σ² / 2)`; `ε = 0` in
    /// mean mode.
    pub fn predict(
        &self,
        x: &Tensor,
        family: &DistributionFamily,
        rng: &mut Rng,
        mode: ReadoutMode,
    ) -> Result<Vec<f64>> {
        family.validate()?;
        let out = self.forward(x)?;
        Ok(out
            .mu
            .iter()
            .zip(&out.logvar)
            .map(|(&mu, &lv)| readout(mu, lv, mode.eps(family, rng)))
            .collect())
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut p: Vec<&Parameter> = self.trunk.layers.iter().flat_map(Linear::params).collect();
        p.extend(self.head.mean.params());
        p.extend(self.head.logvar.params());
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p: Vec<&mut Parameter> =
            self.trunk.layers.iter_mut().flat_map(Linear::params_mut).collect();
        p.extend(self.head.mean.params_mut());
        p.extend(self.head.logvar.params_mut());
        p
    }
}

/// Seven-judge model: shared trunk, one `(μ, log σ²)` head pair per judge.
#[derive(Debug, Clone, PartialEq)]
pub struct DaeMtModel {
    trunk: Trunk,
    heads: Vec<HeadPair>,
}

impl DaeMtModel {
    pub fn init(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let trunk = Trunk::init(input_dim, hidden, &mut rng)?;
        let heads = (0..NUM_JUDGES)
            .map(|j| HeadPair::init(&format!("judge{j}."), trunk.width(), &mut rng))
            .collect();
        Ok(DaeMtModel { trunk, heads })
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
    ) -> Result<[HeadVars; NUM_JUDGES]> {
        let mut cur = VarCursor::new(vars);
        let h = self.trunk.forward(tape, &mut cur, x)?;
        let mut out = [HeadVars { mu: h, logvar: h }; NUM_JUDGES];
        for slot in &mut out {
            *slot = HeadPair::forward(tape, &mut cur, h)?;
        }
        Ok(out)
    }

    /// Per-judge `(μ, log σ²)`; element `j` always belongs to judge `j`.
    pub fn forward_mt(&self, x: &Tensor) -> Result<Vec<HeadOutput>> {
        let (tape, out) = run_inference(self.parameters(), x, |t, v, x| self.forward_tape(t, v, x))?;
        Ok(out.iter().map(|h| HeadOutput::read(&tape, *h)).collect())
    }

    /// Final scores: each judge head is read out, then the trimmed judge sum
    /// is multiplied by the row's difficulty degree. In sample mode, `ε` is
    /// drawn row by row, judge by judge.
    pub fn predict_mt_final(
        &self,
        x: &Tensor,
        dd: &[f64],
        family: &DistributionFamily,
        rng: &mut Rng,
        mode: ReadoutMode,
    ) -> Result<Vec<f64>> {
        family.validate()?;
        let heads = self.forward_mt(x)?;
        let rows = heads[0].mu.len();
        if dd.len() != rows {
            return Err(Error::LengthMismatch {
                what: "difficulty degrees",
                left: dd.len(),
                right: rows,
            });
        }
        (0..rows)
            .map(|i| {
                let mut judges = [0.0; NUM_JUDGES];
                for (j, h) in heads.iter().enumerate() {
                    judges[j] = readout(h.mu[i], h.logvar[i], mode.eps(family, rng));
                }
                aggregate_judges(&judges, dd[i])
            })
            .collect()
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut p: Vec<&Parameter> = self.trunk.layers.iter().flat_map(Linear::params).collect();
        for h in &self.heads {
            p.extend(h.mean.params());
            p.extend(h.logvar.params());
        }
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p: Vec<&mut Parameter> =
            self.trunk.layers.iter_mut().flat_map(Linear::params_mut).collect();
        for h in &mut self.heads {
            p.extend(h.mean.params_mut());
            p.extend(h.logvar.params_mut());
        }
        p
    }
}

/// Interval model: K-way interval selection plus an in-interval
/// distribution read out over the chosen interval.
#[derive(Debug, Clone, PartialEq)]
pub struct DaeCoreModel {
    trunk: Trunk,
    interval_head: Linear,
    within: HeadPair,
    spec: IntervalSpec,
}

impl DaeCoreModel {
    pub fn init(input_dim: usize, hidden: &[usize], spec: IntervalSpec, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let trunk = Trunk::init(input_dim, hidden, &mut rng)?;
        let width = trunk.width();
        let interval_head = Linear::init("interval_head", width, spec.len(), &mut rng);
        let within = HeadPair::init("within_", width, &mut rng);
        Ok(DaeCoreModel {
            trunk,
            interval_head,
            within,
            spec,
        })
    }

    pub fn spec(&self) -> &IntervalSpec {
        &self.spec
    }

    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<CoreVars> {
        let mut cur = VarCursor::new(vars);
        let h = self.trunk.forward(tape, &mut cur, x)?;
        let logits = Linear::apply(tape, &mut cur, h)?;
        let raw = HeadPair::forward(tape, &mut cur, h)?;
        // sigmoid(z) = 1 / (1 + exp(-z))
        let z = tape.clamp(raw.mu, -WITHIN_MEAN_CLAMP, WITHIN_MEAN_CLAMP);
        let neg = tape.scale(z, -1.0);
        let e = tape.exp(neg)?;
        let d = tape.shift(e, 1.0);
        let within_mean = tape.reciprocal(d)?;
        Ok(CoreVars {
            logits,
            within_mean,
            within_logvar: raw.logvar,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<CoreOutput> {
        let (tape, out) = run_inference(self.parameters(), x, |t, v, x| self.forward_tape(t, v, x))?;
        Ok(CoreOutput {
            logits: tape.value(out.logits).data().to_vec(),
            intervals: self.spec.len(),
            within_mean: tape.value(out.within_mean).data().to_vec(),
            within_logvar: tape.value(out.within_logvar).data().to_vec(),
        })
    }

    /// Interval regression read-out: arg-max interval `k`, then
    /// `w·(r-l) + σ_w·ε·(r-l) + l` with `[l, r]` the bounds of `k`.
    pub fn interval_predict(
        &self,
        x: &Tensor,
        family: &DistributionFamily,
        rng: &mut Rng,
        mode: ReadoutMode,
    ) -> Result<Vec<f64>> {
        family.validate()?;
        let out = self.forward(x)?;
        Ok(out
            .selected_intervals()
            .into_iter()
            .enumerate()
            .map(|(i, k)| {
                let (l, r) = self.spec.interval(k);
                let sigma_w = libm::exp(0.5 * out.within_logvar[i]);
                interval_readout(out.within_mean[i], sigma_w, mode.eps(family, rng), l, r)
            })
            .collect())
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut p: Vec<&Parameter> = self.trunk.layers.iter().flat_map(Linear::params).collect();
        p.extend(self.interval_head.params());
        p.extend(self.within.mean.params());
        p.extend(self.within.logvar.params());
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p: Vec<&mut Parameter> =
            self.trunk.layers.iter_mut().flat_map(Linear::params_mut).collect();
        p.extend(self.interval_head.params_mut());
        p.extend(self.within.mean.params_mut());
        p.extend(self.within.logvar.params_mut());
        p
    }
}

/// Architecture shared by all model kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input_dim: DEFAULT_FEATURE_DIM,
            hidden: DEFAULT_HIDDEN.to_vec(),
        }
    }
}

/// Any of the three encoder variants.
#[derive(Debug, Clone, PartialEq)]
pub enum DaeModel {
    Mlp(DaeMlpModel),
    Mt(DaeMtModel),
    Core(DaeCoreModel),
}

impl DaeModel {
    /// Fresh model. `intervals` is required for [`ModelKind::Core`] and
    /// ignored otherwise.
    pub fn init(
        kind: ModelKind,
        arch: &Architecture,
        intervals: Option<IntervalSpec>,
        seed: u64,
    ) -> Result<Self> {
        Ok(match kind {
            ModelKind::Mlp => DaeModel::Mlp(DaeMlpModel::init(arch.input_dim, &arch.hidden, seed)?),
            ModelKind::Mt => DaeModel::Mt(DaeMtModel::init(arch.input_dim, &arch.hidden, seed)?),
            ModelKind::Core => {
                let spec = intervals.ok_or_else(|| invalid("interval model needs an interval spec"))?;
                DaeModel::Core(DaeCoreModel::init(arch.input_dim, &arch.hidden, spec, seed)?)
            }
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            DaeModel::Mlp(_) => ModelKind::Mlp,
            DaeModel::Mt(_) => ModelKind::Mt,
            DaeModel::Core(_) => ModelKind::Core,
        }
    }

    fn trunk(&self) -> &Trunk {
        match self {
            DaeModel::Mlp(m) => &m.trunk,
            DaeModel::Mt(m) => &m.trunk,
            DaeModel::Core(m) => &m.trunk,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.trunk().input_dim
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim(),
            hidden: self.trunk().hidden(),
        }
    }

    pub fn interval_spec(&self) -> Option<&IntervalSpec> {
        match self {
            DaeModel::Core(m) => Some(&m.spec),
            _ => None,
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        match self {
            DaeModel::Mlp(m) => m.parameters(),
            DaeModel::Mt(m) => m.parameters(),
            DaeModel::Core(m) => m.parameters(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            DaeModel::Mlp(m) => m.parameters_mut(),
            DaeModel::Mt(m) => m.parameters_mut(),
            DaeModel::Core(m) => m.parameters_mut(),
        }
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.parameters().into_iter().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.parameters_mut()
            .into_iter()
            .for_each(|p| p.tensor.zero_grad());
    }

    /// Puts every parameter on the tape as a differentiable leaf, in
    /// `parameters()` order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.parameters().into_iter().map(|p| tape.param(p)).collect()
    }

    /// Adds the tape gradients of the bound parameter vars into each
    /// parameter's gradient buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &[Var]) {
        for (p, v) in self.parameters_mut().into_iter().zip(vars) {
            match tape.grad(*v) {
                Some(g) => p.tensor.accumulate_grad(g),
                None => p.tensor.accumulate_grad(&vec![0.0; p.tensor.len()]),
            }
        }
    }

    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<OutputVars> {
        Ok(match self {
            DaeModel::Mlp(m) => OutputVars::Single(m.forward_tape(tape, vars, x)?),
            DaeModel::Mt(m) => OutputVars::Judges(m.forward_tape(tape, vars, x)?),
            DaeModel::Core(m) => OutputVars::Interval(m.forward_tape(tape, vars, x)?),
        })
    }

    /// Replaces every parameter value from `source`, matched by name.
    pub fn load_parameters<'a>(
        &mut self,
        mut source: impl FnMut(&str) -> Option<&'a Tensor>,
    ) -> Result<()> {
        for p in self.parameters_mut() {
            let t = source(&p.name)
                .ok_or_else(|| Error::Data(format!("missing parameter `{}`", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Shape {
                    op: "load_parameters",
                    left: p.tensor.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            p.tensor = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        }
        Ok(())
    }
}

/// `μ + ε·exp(log σ² / 2)`.
pub fn readout(mu: f64, logvar: f64, eps: f64) -> f64 {
    if eps == 0.0 {
        mu
    } else {
        mu + eps * libm::exp(0.5 * logvar)
    }
}

fn run_inference<T>(
    params: Vec<&Parameter>,
    x: &Tensor,
    f: impl FnOnce(&mut Tape, &[Var], Var) -> Result<T>,
) -> Result<(Tape, T)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .into_iter()
        .map(|p| tape.constant(p.tensor.clone()))
        .collect();
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, &vars, xv)?;
    Ok((tape, out))
}

/// Human-readable one-line summary, e.g. `mlp F=8 trunk=[64, 32, 16]`.
pub fn describe(model: &DaeModel) -> String {
    let arch = model.architecture();
    match model.interval_spec() {
        Some(s) => format!(
            "{} F={} trunk={:?} intervals={}",
            model.kind(),
            arch.input_dim,
            arch.hidden,
            s.len()
        ),
        None => format!("{} F={} trunk={:?}", model.kind(), arch.input_dim, arch.hidden),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Architecture {
        Architecture {
            input_dim: 4,
            hidden: vec![8, 6, 5],
        }
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
            .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = DaeModel::init(ModelKind::Mlp, &small(), None, 7).unwrap();
        let b = DaeModel::init(ModelKind::Mlp, &small(), None, 7).unwrap();
        assert_eq!(a, b);
        let c = DaeModel::init(ModelKind::Mlp, &small(), None, 8).unwrap();
        assert_ne!(a, c);
        for p in a.parameters() {
            if p.name.ends_with(".weight") {
                let fan_in = p.tensor.shape()[0] as f64;
                let bound = (6.0 / fan_in).sqrt();
                assert!(p.tensor.data().iter().all(|w| w.abs() <= bound), "{}", p.name);
            } else {
                assert!(p.tensor.data().iter().all(|&b| b == 0.0));
            }
        }
    }

    #[test]
    fn default_architecture_chains_trunk_sizes() {
        let m = DaeMlpModel::init(DEFAULT_FEATURE_DIM, &DEFAULT_HIDDEN, 0).unwrap();
        let shapes: Vec<Vec<usize>> = m.parameters().iter().map(|p| p.tensor.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1024, 512],
                vec![512],
                vec![512, 256],
                vec![256],
                vec![256, 128],
                vec![128],
                vec![128, 1],
                vec![1],
                vec![128, 1],
                vec![1],
            ]
        );
    }

    #[test]
    fn zero_input_gives_zero_mean() {
        let m = DaeMlpModel::init(4, &[8, 6, 5], 3).unwrap();
        let out = m.forward(&Tensor::zeros(vec![2, 4])).unwrap();
        assert_eq!(out.mu, vec![0.0, 0.0]);
        assert_eq!(out.logvar, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_is_batch_consistent() {
        let m = DaeMlpModel::init(4, &[8, 6, 5], 3).unwrap();
        let x = batch(2, 4, 11);
        let both = m.forward(&x).unwrap();
        let first = m
            .forward(&Tensor::matrix(1, 4, x.data()[..4].to_vec()).unwrap())
            .unwrap();
        assert_eq!(first.mu[0], both.mu[0]);
        assert_eq!(first.logvar[0], both.logvar[0]);
        assert!(both.mu.iter().chain(&both.logvar).all(|v| v.is_finite()));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = DaeMlpModel::init(4, &[8, 6, 5], 3).unwrap();
        assert!(matches!(m.forward(&batch(2, 5, 0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn init_rejects_bad_dimensions() {
        assert!(DaeMlpModel::init(0, &[8], 0).is_err());
        assert!(DaeMlpModel::init(3, &[], 0).is_err());
        assert!(DaeMlpModel::init(3, &[4, 0], 0).is_err());
        assert!(DaeModel::init(ModelKind::Core, &small(), None, 0).is_err());
    }

    #[test]
    fn predict_mean_equals_forced_zero_eps() {
        let m = DaeMlpModel::init(4, &[8, 6, 5], 3).unwrap();
        let x = batch(5, 4, 1);
        let g = DistributionFamily::Gaussian;
        let mean = m.predict(&x, &g, &mut Rng::new(0), ReadoutMode::Mean).unwrap();
        let out = m.forward(&x).unwrap();
        let forced: Vec<f64> = out.mu.iter().zip(&out.logvar).map(|(&m, &l)| readout(m, l, 0.0)).collect();
        assert_eq!(mean, forced);
        assert_eq!(mean, out.mu);

        let s1 = m.predict(&x, &g, &mut Rng::new(5), ReadoutMode::Sample).unwrap();
        let s2 = m.predict(&x, &g, &mut Rng::new(5), ReadoutMode::Sample).unwrap();
        assert_eq!(s1, s2);
        assert_ne!(s1, mean);
    }

    #[test]
    fn aggregate_judges_examples() {
        assert_eq!(aggregate_judges(&[2.5; 7], 3.0).unwrap(), 3.0 * 2.5 * 3.0);
        let s = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        assert_eq!(aggregate_judges(&s, 2.0).unwrap(), 24.0);
        let shuffled = [7.0, 1.0, 5.0, 3.0, 6.0, 2.0, 4.0];
        assert_eq!(aggregate_judges(&shuffled, 2.0).unwrap(), 24.0);
        assert!(aggregate_judges(&s[..6], 2.0).is_err());
        assert!(aggregate_judges(&s, 0.0).is_err());
        assert!(aggregate_judges(&s, -1.0).is_err());
    }

    #[test]
    fn mt_heads_are_order_stable_and_share_the_trunk() {
        let mut m = DaeMtModel::init(4, &[8, 6, 5], 2).unwrap();
        let x = batch(3, 4, 4);
        let heads = m.forward_mt(&x).unwrap();
        assert_eq!(heads.len(), NUM_JUDGES);
        assert_eq!(heads, m.forward_mt(&x).unwrap());
        // heads are distinct functions
        assert_ne!(heads[0].mu, heads[1].mu);

        let w = m.parameters_mut().into_iter().find(|p| p.name == "trunk.2.weight").unwrap();
        w.tensor.data_mut().iter_mut().for_each(|v| *v += 0.3);
        let after = m.forward_mt(&x).unwrap();
        for j in 0..NUM_JUDGES {
            assert_ne!(after[j].mu, heads[j].mu, "head {j} unaffected by trunk");
        }
    }

    #[test]
    fn mt_final_composes_heads_and_aggregation() {
        let m = DaeMtModel::init(4, &[8, 6, 5], 2).unwrap();
        let x = batch(3, 4, 4);
        let dd = [1.5, 2.0, 3.2];
        let g = DistributionFamily::Gaussian;
        let got = m.predict_mt_final(&x, &dd, &g, &mut Rng::new(9), ReadoutMode::Sample).unwrap();

        // manual pipeline with the same eps stream
        let heads = m.forward_mt(&x).unwrap();
        let mut rng = Rng::new(9);
        for i in 0..3 {
            let judges: Vec<f64> = heads
                .iter()
                .map(|h| {
                    let eps = g.sample(&mut rng);
                    crate::distributions::reparameterize(h.mu[i], (0.5 * h.logvar[i]).exp(), eps).unwrap()
                })
                .collect();
            assert_eq!(got[i], aggregate_judges(&judges, dd[i]).unwrap());
        }

        let mean = m.predict_mt_final(&x, &dd, &g, &mut Rng::new(0), ReadoutMode::Mean).unwrap();
        let dd2: Vec<f64> = dd.iter().map(|d| 2.0 * d).collect();
        let doubled = m.predict_mt_final(&x, &dd2, &g, &mut Rng::new(0), ReadoutMode::Mean).unwrap();
        for (a, b) in mean.iter().zip(&doubled) {
            assert_eq!(2.0 * a, *b);
        }
        assert!(m.predict_mt_final(&x, &dd[..2], &g, &mut Rng::new(0), ReadoutMode::Mean).is_err());
    }

    #[test]
    fn interval_spec_validation_and_lookup() {
        assert!(IntervalSpec::new(vec![0.0]).is_err());
        assert!(IntervalSpec::new(vec![0.0, 1.0, 1.0]).is_err());
        assert!(IntervalSpec::uniform(0.0, 1.0, 0).is_err());
        let s = IntervalSpec::uniform(0.0, 8.0, 8).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(s.boundaries(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(s.locate(-3.0), 0);
        assert_eq!(s.locate(0.5), 0);
        assert_eq!(s.locate(1.0), 1);
        assert_eq!(s.locate(7.9), 7);
        assert_eq!(s.locate(8.0), 7);
        assert_eq!(s.locate(100.0), 7);
        assert_eq!(s.normalized_offset(2.25, 2), 0.25);
    }

    #[test]
    fn interval_readout_endpoints() {
        let (l, r) = (0.1, 0.3);
        assert_eq!(interval_readout(0.0, 0.7, 0.0, l, r), l);
        assert_eq!(interval_readout(1.0, 0.7, 0.0, l, r), r);
        assert_eq!(interval_readout(0.5, 0.7, 0.0, l, r), (l + r) / 2.0);
        let y = interval_readout(0.25, 0.5, 1.0, 2.0, 4.0);
        assert!((y - (0.25 * 2.0 + 0.5 * 2.0 + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn core_predictions_stay_in_range() {
        let spec = IntervalSpec::uniform(-1.0, 1.0, 4).unwrap();
        let m = DaeCoreModel::init(4, &[8, 6, 5], spec, 1).unwrap();
        let x = batch(64, 4, 2);
        let y = m
            .interval_predict(&x, &DistributionFamily::Gaussian, &mut Rng::new(0), ReadoutMode::Mean)
            .unwrap();
        let out = m.forward(&x).unwrap();
        for (i, k) in out.selected_intervals().into_iter().enumerate() {
            let (l, r) = m.spec().interval(k);
            assert!(y[i] >= l && y[i] <= r);
        }
    }

    #[test]
    fn load_parameters_round_trip() {
        let a = DaeModel::init(ModelKind::Mt, &small(), None, 1).unwrap();
        let mut b = DaeModel::init(ModelKind::Mt, &small(), None, 2).unwrap();
        assert_ne!(a, b);
        b.load_parameters(|name| a.parameter(name).map(|p| &p.tensor)).unwrap();
        assert_eq!(a, b);
        let mut c = DaeModel::init(ModelKind::Mlp, &small(), None, 2).unwrap();
        assert!(c.load_parameters(|name| a.parameter(name).map(|p| &p.tensor)).is_err());
    }

    #[test]
    fn parameter_names_are_unique() {
        let spec = IntervalSpec::uniform(0.0, 1.0, 3).unwrap();
        for m in [
            DaeModel::init(ModelKind::Mlp, &small(), None, 0).unwrap(),
            DaeModel::init(ModelKind::Mt, &small(), None, 0).unwrap(),
            DaeModel::init(ModelKind::Core, &small(), Some(spec), 0).unwrap(),
        ] {
            let mut names: Vec<&str> = m.parameters().iter().map(|p| p.name.as_str()).collect();
            let n = names.len();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), n);
        }
    }
}
