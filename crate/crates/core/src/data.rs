//! In-memory datasets, synthetic generators and train/eval splitting.
//!
//! File formats live in the `dae` crate; this module only deals with values.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::Tensor;
use crate::distributions::Rng;
use crate::error::{invalid, Error, Result};
use crate::model::{aggregate_judges, NUM_JUDGES};

const TAU: f64 = core::f64::consts::TAU;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FeatureRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub label: f64,
    pub judges: Option<[f64; NUM_JUDGES]>,
    pub dd: Option<f64>,
}

impl FeatureRecord {
    pub fn new(id: impl Into<String>, features: Vec<f64>, label: f64) -> Self {
        FeatureRecord {
            id: id.into(),
            features,
            label,
            judges: None,
            dd: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "record `{}`: feature {i} is not finite",
                self.id
            )));
        }
        if !self.label.is_finite() {
            return Err(Error::Data(format!("record `{}`: label is not finite", self.id)));
        }
        match (&self.judges, self.dd) {
            (Some(j), Some(dd)) => {
                if j.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!(
                        "record `{}`: judge score is not finite",
                        self.id
                    )));
                }
                if !(dd > 0.0 && dd.is_finite()) {
                    return Err(Error::Data(format!(
                        "record `{}`: dd must be positive and finite",
                        self.id
                    )));
                }
            }
            (Some(_), None) => {
                return Err(Error::Data(format!(
                    "record `{}`: judges present but dd missing",
                    self.id
                )))
            }
            (None, Some(dd)) => {
                if !(dd > 0.0 && dd.is_finite()) {
                    return Err(Error::Data(format!(
                        "record `{}`: dd must be positive and finite",
                        self.id
                    )));
                }
            }
            (None, None) => {}
        }
        Ok(())
    }
}

/// Records sharing one feature width. Judge scores are present on all
/// records or on none.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dataset {
    feature_dim: usize,
    records: Vec<FeatureRecord>,
}

impl Dataset {
    pub fn new(records: Vec<FeatureRecord>) -> Result<Self> {
        let first = records.first().ok_or(Error::Empty("dataset"))?;
        let feature_dim = first.features.len();
        let with_judges = first.judges.is_some();
        if feature_dim == 0 {
            return Err(Error::Data("records have no features".into()));
        }
        for r in &records {
            r.validate()?;
            if r.features.len() != feature_dim {
                return Err(Error::Data(format!(
                    "record `{}` has {} features, expected {feature_dim}",
                    r.id,
                    r.features.len()
                )));
            }
            if r.judges.is_some() != with_judges {
                return Err(Error::Data(format!(
                    "record `{}`: judge scores must be present on all records or none",
                    r.id
                )));
            }
        }
        Ok(Dataset {
            feature_dim,
            records,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<FeatureRecord> {
        self.records
    }

    pub fn has_judges(&self) -> bool {
        self.records[0].judges.is_some()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn find(&self, id: &str) -> Option<&FeatureRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// `[indices.len() × F]` feature matrix for the given rows.
    pub fn feature_matrix(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            data.extend_from_slice(&self.records[i].features);
        }
        Tensor::matrix(indices.len(), self.feature_dim, data).expect("row widths validated")
    }

    /// Min and max label.
    pub fn label_range(&self) -> (f64, f64) {
        self.records.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r.label), hi.max(r.label))
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(indices.iter().map(|&i| self.records[i].clone()).collect())
    }
}

/// Noise-free part of the synthetic target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MeanFn {
    /// `sin(2πt)`
    #[default]
    Sine,
    /// `(2t - 1)²`
    Quadratic,
    /// `2t - 1`
    Linear,
}

impl MeanFn {
    pub fn eval(self, t: f64) -> f64 {
        match self {
            MeanFn::Sine => libm::sin(TAU * t),
            MeanFn::Quadratic => (2.0 * t - 1.0) * (2.0 * t - 1.0),
            MeanFn::Linear => 2.0 * t - 1.0,
        }
    }
}

impl core::str::FromStr for MeanFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sine" => Ok(MeanFn::Sine),
            "quadratic" => Ok(MeanFn::Quadratic),
            "linear" => Ok(MeanFn::Linear),
            other => Err(invalid(format!("unknown mean function `{other}`"))),
        }
    }
}

impl core::fmt::Display for MeanFn {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            MeanFn::Sine => "sine",
            MeanFn::Quadratic => "quadratic",
            MeanFn::Linear => "linear",
        })
    }
}

/// Ground-truth noise scale `σ(t)` of the synthetic target.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum NoiseFn {
    /// `intercept + slope·t`
    Affine { intercept: f64, slope: f64 },
    /// `floor + slope·|2t - 1|`
    VShape { floor: f64, slope: f64 },
    Constant { sigma: f64 },
}

impl Default for NoiseFn {
    fn default() -> Self {
        NoiseFn::Affine {
            intercept: 0.05,
            slope: 0.2,
        }
    }
}

impl NoiseFn {
    pub fn eval(self, t: f64) -> f64 {
        match self {
            NoiseFn::Affine { intercept, slope } => intercept + slope * t,
            NoiseFn::VShape { floor, slope } => floor + slope * libm::fabs(2.0 * t - 1.0),
            NoiseFn::Constant { sigma } => sigma,
        }
    }

    /// σ must be finite and non-negative on `[0, 1]`. Zero is allowed and
    /// gives noiseless labels.
    pub fn validate(self) -> Result<()> {
        let (a, b) = (self.eval(0.0), self.eval(1.0));
        let mid = self.eval(0.5);
        if [a, b, mid].iter().all(|s| s.is_finite() && *s >= 0.0) {
            Ok(())
        } else {
            Err(invalid(format!("noise function {self:?} is negative or non-finite on [0, 1]")))
        }
    }

    /// Parses `affine`, `affine:0.05:0.2`, `vshape:0.05:0.2`, `constant:0.1`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let name = parts.next().unwrap_or("").to_ascii_lowercase();
        let nums: Vec<f64> = parts
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| invalid(format!("bad noise parameter `{p}`")))
            })
            .collect::<Result<_>>()?;
        let f = match (name.as_str(), nums.as_slice()) {
            ("affine", []) => NoiseFn::default(),
            ("affine", [i, s]) => NoiseFn::Affine {
                intercept: *i,
                slope: *s,
            },
            ("vshape", []) => NoiseFn::VShape {
                floor: 0.05,
                slope: 0.2,
            },
            ("vshape", [f, s]) => NoiseFn::VShape {
                floor: *f,
                slope: *s,
            },
            ("constant", [s]) => NoiseFn::Constant { sigma: *s },
            _ => return Err(invalid(format!("unrecognized noise function `{s}`"))),
        };
        f.validate()?;
        Ok(f)
    }
}

impl core::fmt::Display for NoiseFn {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            NoiseFn::Affine { intercept, slope } => write!(f, "affine:{intercept}:{slope}"),
            NoiseFn::VShape { floor, slope } => write!(f, "vshape:{floor}:{slope}"),
            NoiseFn::Constant { sigma } => write!(f, "constant:{sigma}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticSpec {
    pub n: usize,
    pub feature_dim: usize,
    pub mean_fn: MeanFn,
    pub noise_fn: NoiseFn,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 5000,
            feature_dim: 8,
            mean_fn: MeanFn::Sine,
            noise_fn: NoiseFn::default(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("synthetic n must be at least 1"));
        }
        if self.feature_dim == 0 {
            return Err(invalid("synthetic feature dimension must be at least 1"));
        }
        self.noise_fn.validate()
    }
}

/// Fixed embedding of the latent `t` into `dim` features:
/// `[t, t², sin 2πt, cos 2πt, sin 4πt, cos 4πt, sin 6πt, cos 6πt, ...]`,
/// truncated to `dim`.
pub fn embed_latent(t: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    out.push(t);
    out.push(t * t);
    let mut k = 1.0;
    while out.len() < dim {
        out.push(libm::sin(k * TAU * t));
        out.push(libm::cos(k * TAU * t));
        k += 1.0;
    }
    out.truncate(dim);
    out
}

/// Generated dataset plus the hidden latent and true noise scale per record.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub latent: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// `y = mean_fn(t) + σ(t)·ε` with `t ~ U(0, 1)`, `ε ~ N(0, 1)`. Per record
/// the generator draws `t` then `ε`.
pub fn synth_heteroscedastic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut records = Vec::with_capacity(spec.n);
    let mut latent = Vec::with_capacity(spec.n);
    let mut sigma = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let t = rng.uniform();
        let eps = rng.standard_normal();
        let s = spec.noise_fn.eval(t);
        let label = spec.mean_fn.eval(t) + s * eps;
        records.push(FeatureRecord::new(
            format!("s{i:06}"),
            embed_latent(t, spec.feature_dim),
            label,
        ));
        latent.push(t);
        sigma.push(s);
    }
    Ok(SyntheticData {
        dataset: Dataset::new(records)?,
        latent,
        sigma,
    })
}

/// Adds seven simulated judge scores and a difficulty degree to each record.
///
/// Each judge scores `label + N(0, judge_noise_std²)`, `dd ~ U(dd_range)`,
/// and the label becomes `aggregate_judges(judges, dd)`. Judges therefore
/// score the execution on the original label scale; with zero noise the new
/// label is `3·label·dd`.
pub fn synth_judges(
    dataset: &Dataset,
    judge_noise_std: f64,
    dd_range: (f64, f64),
    seed: u64,
) -> Result<Dataset> {
    if !(judge_noise_std >= 0.0 && judge_noise_std.is_finite()) {
        return Err(invalid("judge noise std must be finite and non-negative"));
    }
    let (lo, hi) = dd_range;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(invalid(format!("invalid dd range [{lo}, {hi}]")));
    }
    let mut rng = Rng::new(seed);
    let mut records = Vec::with_capacity(dataset.len());
    for r in dataset.records() {
        let base = r.label;
        let mut judges = [0.0; NUM_JUDGES];
        for j in &mut judges {
            let e = rng.standard_normal();
            *j = base + judge_noise_std * e;
        }
        let dd = if lo == hi { lo } else { rng.uniform_range(lo, hi) };
        let mut rec = r.clone();
        rec.label = aggregate_judges(&judges, dd)?;
        rec.judges = Some(judges);
        rec.dd = Some(dd);
        records.push(rec);
    }
    Dataset::new(records)
}

/// Shuffled partition of `0..n`: `(train, eval)` index lists, each kept in
/// ascending order. The train side gets `round(fraction·n)` records.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid("split fraction must lie strictly between 0 and 1"));
    }
    let n_train = libm::round(fraction * n as f64) as usize;
    if n_train == 0 || n_train >= n {
        return Err(invalid(format!(
            "split of {n} records at fraction {fraction} leaves an empty side"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut idx);
    let (a, b) = idx.split_at(n_train);
    let (mut train, mut eval) = (a.to_vec(), b.to_vec());
    train.sort_unstable();
    eval.sort_unstable();
    Ok((train, eval))
}

pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, eval) = split_indices(dataset.len(), fraction, seed)?;
    Ok((dataset.subset(&train)?, dataset.subset(&eval)?))
}
