//! Central finite-difference check of tape gradients through a full model
//! and loss.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::model::DaeModel;
use crate::training::{batch_loss, batch_loss_value, Batch, LossKind, LossWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    /// Element index of the worst error.
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: LossKind,
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-5)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = libm::fabs(analytic).max(libm::fabs(numeric)).max(1e-5);
    libm::fabs(analytic - numeric) / denom
}

/// Compares every parameter element's backpropagated gradient with a
/// central difference of step `1e-5·(|θ| + 1)`. `corrupt` deliberately
/// breaks the matmul backward rule as a negative control.
pub fn finite_diff_check(
    model: &DaeModel,
    batch: &Batch,
    loss: LossKind,
    weights: LossWeights,
    tolerance: f64,
    corrupt: bool,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    if corrupt {
        tape.corrupt_matmul_backward();
    }
    let vars = model.bind(&mut tape);
    let l = batch_loss(&mut tape, model, &vars, batch, loss, weights)?;
    tape.backward(l)?;
    let analytic: Vec<Vec<f64>> = model
        .parameters()
        .iter()
        .zip(&vars)
        .map(|(p, v)| tape.grad(*v).map_or_else(|| alloc::vec![0.0; p.tensor.len()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let mut probe = model.clone();
    let mut params = Vec::new();
    let mut overall = 0.0f64;
    let names: Vec<String> = model.parameters().iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.into_iter().enumerate() {
        let len = analytic[pi].len();
        let mut worst = (0.0f64, 0usize);
        for j in 0..len {
            let theta = probe.parameters()[pi].tensor.data()[j];
            let h = 1e-5 * (libm::fabs(theta) + 1.0);
            probe.parameters_mut()[pi].tensor.data_mut()[j] = theta + h;
            let up = batch_loss_value(&probe, batch, loss, weights)?;
            probe.parameters_mut()[pi].tensor.data_mut()[j] = theta - h;
            let down = batch_loss_value(&probe, batch, loss, weights)?;
            probe.parameters_mut()[pi].tensor.data_mut()[j] = theta;
            let numeric = (up - down) / (2.0 * h);
            let e = relative_error(analytic[pi][j], numeric);
            if e > worst.0 || e.is_nan() {
                worst = (e, j);
            }
        }
        overall = overall.max(worst.0);
        if worst.0.is_nan() {
            overall = f64::NAN;
        }
        params.push(ParamCheck {
            name,
            elements: len,
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(GradCheckReport {
        loss,
        params,
        max_rel_error: if overall.is_nan() { f64::INFINITY } else { overall },
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_heteroscedastic, synth_judges, SyntheticSpec};
    use crate::model::{Architecture, IntervalSpec, ModelKind};

    fn setup(kind: ModelKind) -> (DaeModel, Batch) {
        let base = synth_heteroscedastic(&SyntheticSpec { n: 4, feature_dim: 5, seed: 1, ..Default::default() })
            .unwrap()
            .dataset;
        let data = if kind == ModelKind::Mt { synth_judges(&base, 0.3, (2.0, 3.0), 1).unwrap() } else { base };
        let arch = Architecture { input_dim: 5, hidden: alloc::vec![6, 4] };
        let spec = (kind == ModelKind::Core).then(|| IntervalSpec::uniform(-1.5, 1.5, 3).unwrap());
        let model = DaeModel::init(kind, &arch, spec, 4).unwrap();
        (model, Batch::from_dataset(&data, &[0, 1, 2, 3]))
    }

    #[test]
    fn all_kinds_and_losses_pass() {
        for kind in [ModelKind::Mlp, ModelKind::Mt, ModelKind::Core] {
            let (m, b) = setup(kind);
            for loss in LossKind::ALL {
                let r = finite_diff_check(&m, &b, loss, LossWeights::default(), 1e-4, false).unwrap();
                assert!(r.passed(), "{kind} {loss}: {}", r.max_rel_error);
                assert_eq!(r.params.len(), m.parameters().len());
            }
        }
    }

    #[test]
    fn corrupted_backward_fails() {
        let (m, b) = setup(ModelKind::Mlp);
        let r = finite_diff_check(&m, &b, LossKind::Dae, LossWeights::default(), 1e-4, true).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-7, 0.0) - 1e-2).abs() < 1e-15);
    }
}
