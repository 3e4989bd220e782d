//! Rank correlation, the classical least-squares baseline and evaluation
//! reports.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::distributions::{DistributionFamily, Rng};
use crate::error::{Error, Result};
use crate::model::{DaeModel, ReadoutMode};

/// Average (fractional) 1-based ranks; tied values share the mean of the
/// positions they occupy.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && v[order[j]] == v[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) share rank mean((i+1)..=j)
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Pearson correlation, clamped to `[-1, 1]`.
pub fn pearson(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            what: "correlation inputs",
            left: p.len(),
            right: q.len(),
        });
    }
    if p.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two points"));
    }
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let mq = q.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(q) {
        let (da, db) = (a - mp, b - mq);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input"));
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            what: "spearman inputs",
            left: p.len(),
            right: q.len(),
        });
    }
    if p.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two points"));
    }
    if p.iter().chain(q).any(|v| v.is_nan()) {
        return Err(Error::UndefinedCorrelation("NaN input"));
    }
    pearson(&average_ranks(p), &average_ranks(q))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    /// `β₀` (intercept) followed by one slope per feature column.
    pub coefficients: Vec<f64>,
    /// Classical error-variance estimate for the fit.
    pub sigma2_hat: f64,
    /// Correlation between `Y` and the fitted values.
    pub r: f64,
    pub fitted: Vec<f64>,
}

impl OlsFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.coefficients[0]
            + self.coefficients[1..]
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }
}

/// Least squares `y = β₀ + Σ βⱼ xⱼ` for row-major `x` of shape `[n × k]`.
pub fn fit_ols_baseline(x: &[f64], n: usize, k: usize, y: &[f64]) -> Result<OlsFit> {
    if x.len() != n * k {
        return Err(Error::LengthMismatch {
            what: "design matrix",
            left: x.len(),
            right: n * k,
        });
    }
    if y.len() != n {
        return Err(Error::LengthMismatch {
            what: "response",
            left: y.len(),
            right: n,
        });
    }
    if n < k + 2 {
        return Err(crate::error::invalid("least squares needs n >= k + 2"));
    }
    let design = DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { x[i * k + j - 1] });
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * f64::EPSILON * (n.max(k + 1) as f64);
    if svd.singular_values.iter().any(|&s| s <= tol) {
        return Err(Error::RankDeficient);
    }
    let rhs = DVector::from_column_slice(y);
    let beta = svd.solve(&rhs, tol).map_err(|_| Error::RankDeficient)?;
    let fitted: Vec<f64> = (&design * &beta).iter().copied().collect();
    let r = match pearson(y, &fitted) {
        Ok(r) => r,
        // constant response: the fit is exact
        Err(Error::UndefinedCorrelation(_)) => 1.0,
        Err(e) => return Err(e),
    };
    let sigma2_hat = error_variance_with_r(y, &fitted, r)?;
    Ok(OlsFit {
        coefficients: beta.iter().copied().collect(),
        sigma2_hat,
        r,
        fitted,
    })
}

/// `σ̂² = (1 - r²)/(N - 2) · Σ (yᵢ - ŷᵢ)²`, with `r` the correlation of `Y`
/// and `Ŷ`. A perfect fit (zero residuals) gives exactly 0.
pub fn classical_error_variance(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::LengthMismatch {
            what: "classical error variance",
            left: y.len(),
            right: yhat.len(),
        });
    }
    if y.len() < 3 {
        return Err(crate::error::invalid("classical error variance needs N >= 3"));
    }
    if y == yhat {
        return Ok(0.0);
    }
    let r = pearson(y, yhat)?;
    error_variance_with_r(y, yhat, r)
}

fn error_variance_with_r(y: &[f64], yhat: &[f64], r: f64) -> Result<f64> {
    if y.len() < 3 {
        return Err(crate::error::invalid("classical error variance needs N >= 3"));
    }
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(((1.0 - r * r) / (y.len() - 2) as f64 * sse).max(0.0))
}

/// Type-7 (linear interpolation) quantile of `sorted`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = libm::floor(h) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(q1, median, q3)`.
pub fn quartiles(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("quartiles"));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok((
        quantile_sorted(&s, 0.25),
        quantile_sorted(&s, 0.5),
        quantile_sorted(&s, 0.75),
    ))
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            what: "rmse",
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::Empty("rmse"));
    }
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(libm::sqrt(ss / a.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalRow {
    pub id: String,
    pub y_true: f64,
    pub mu: f64,
    pub sigma2: f64,
    pub y_pred: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    /// `None` when the predictions (or labels) are constant.
    pub spearman_rho: Option<f64>,
    pub rmse: f64,
    pub n: usize,
    pub mean_sigma2: f64,
    /// Mean of `σ = √σ²` over records.
    pub mean_sigma: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Builds the summary from per-record rows.
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("evaluation"));
        }
        let truth: Vec<f64> = rows.iter().map(|r| r.y_true).collect();
        let pred: Vec<f64> = rows.iter().map(|r| r.y_pred).collect();
        let spearman_rho = match spearman(&truth, &pred) {
            Ok(r) => Some(r),
            Err(Error::UndefinedCorrelation(_)) => None,
            Err(e) => return Err(e),
        };
        let n = rows.len();
        let mean_sigma2 = rows.iter().map(|r| r.sigma2).sum::<f64>() / n as f64;
        let mean_sigma = rows.iter().map(|r| libm::sqrt(r.sigma2)).sum::<f64>() / n as f64;
        Ok(EvalReport {
            spearman_rho,
            rmse: rmse(&truth, &pred)?,
            n,
            mean_sigma2,
            mean_sigma,
            rows,
        })
    }
}

const EVAL_CHUNK: usize = 512;

/// Runs the model's read-out on every record.
///
/// Per kind, `mu` and `sigma2` in the rows are:
/// * mlp: head outputs.
/// * mt: the aggregated head means and the mean σ² over the seven heads.
/// * core: the mean-mode interval read-out and `(σ_w·(r - l))²`.
pub fn evaluate(
    model: &DaeModel,
    dataset: &crate::data::Dataset,
    mode: ReadoutMode,
    family: &DistributionFamily,
    rng: &mut Rng,
) -> Result<EvalReport> {
    if dataset.feature_dim() != model.input_dim() {
        return Err(Error::Shape {
            op: "evaluate",
            left: vec![dataset.feature_dim()],
            right: vec![model.input_dim()],
        });
    }
    let mut rows = Vec::with_capacity(dataset.len());
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let x = dataset.feature_matrix(chunk);
        let recs = chunk.iter().map(|&i| &dataset.records()[i]);
        match model {
            DaeModel::Mlp(m) => {
                let out = m.forward(&x)?;
                let pred = m.predict(&x, family, rng, mode)?;
                for (i, r) in recs.enumerate() {
                    rows.push(EvalRow {
                        id: r.id.clone(),
                        y_true: r.label,
                        mu: out.mu[i],
                        sigma2: libm::exp(out.logvar[i]),
                        y_pred: pred[i],
                    });
                }
            }
            DaeModel::Mt(m) => {
                let dd: Vec<f64> = chunk
                    .iter()
                    .map(|&i| {
                        dataset.records()[i].dd.ok_or_else(|| {
                            Error::Data(alloc::format!(
                                "record `{}` has no dd; the judge model needs it",
                                dataset.records()[i].id
                            ))
                        })
                    })
                    .collect::<Result<_>>()?;
                let heads = m.forward_mt(&x)?;
                let means = m.predict_mt_final(&x, &dd, family, rng, ReadoutMode::Mean)?;
                let pred = match mode {
                    ReadoutMode::Mean => means.clone(),
                    ReadoutMode::Sample => m.predict_mt_final(&x, &dd, family, rng, mode)?,
                };
                for (i, r) in recs.enumerate() {
                    let s2 = heads.iter().map(|h| libm::exp(h.logvar[i])).sum::<f64>()
                        / heads.len() as f64;
                    rows.push(EvalRow {
                        id: r.id.clone(),
                        y_true: r.label,
                        mu: means[i],
                        sigma2: s2,
                        y_pred: pred[i],
                    });
                }
            }
            DaeModel::Core(m) => {
                let out = m.forward(&x)?;
                let sel = out.selected_intervals();
                let means = m.interval_predict(&x, family, rng, ReadoutMode::Mean)?;
                let pred = match mode {
                    ReadoutMode::Mean => means.clone(),
                    ReadoutMode::Sample => m.interval_predict(&x, family, rng, mode)?,
                };
                for (i, r) in recs.enumerate() {
                    let (l, rr) = m.spec().interval(sel[i]);
                    let s = libm::exp(0.5 * out.within_logvar[i]) * (rr - l);
                    rows.push(EvalRow {
                        id: r.id.clone(),
                        y_true: r.label,
                        mu: means[i],
                        sigma2: s * s,
                        y_pred: pred[i],
                    });
                }
            }
        }
    }
    EvalReport::from_rows(rows)
}
