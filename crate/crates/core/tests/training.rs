use dae_core::data::{split, synth_heteroscedastic, synth_judges, SyntheticSpec};
use dae_core::metrics::evaluate;
use dae_core::model::{ModelKind, ReadoutMode};
use dae_core::training::{fit, LossKind, TrainConfig};
use dae_core::{DistributionFamily, Rng};

fn config(model: ModelKind, loss: LossKind) -> TrainConfig {
    TrainConfig {
        epochs: 15,
        batch_size: 32,
        model,
        loss,
        lr: 3e-3,
        hidden: vec![32, 16],
        ..Default::default()
    }
}

#[test]
fn every_model_learns_the_synthetic_ranking() {
    let data = synth_heteroscedastic(&SyntheticSpec { n: 800, feature_dim: 6, seed: 4, ..Default::default() }).unwrap();
    let judged = synth_judges(&data.dataset, 0.3, (1.5, 3.5), 5).unwrap();
    let (train, eval) = split(&judged, 0.75, 0).unwrap();
    for model in [ModelKind::Mlp, ModelKind::Mt, ModelKind::Core] {
        for loss in LossKind::ALL {
            let r = fit(&config(model, loss), &train, &eval).unwrap();
            let rho = r.best.eval_rho.unwrap();
            assert!(rho > 0.5, "{model} {loss}: rho {rho}");
            let losses: Vec<f64> = r.history.iter().map(|h| h.train_loss).collect();
            assert!(losses.last().unwrap() < &losses[0], "{model} {loss}: {losses:?}");
        }
    }
}

#[test]
fn training_is_deterministic_and_seed_sensitive() {
    let data = synth_heteroscedastic(&SyntheticSpec { n: 300, feature_dim: 4, seed: 1, ..Default::default() }).unwrap();
    let (train, eval) = split(&data.dataset, 0.75, 1).unwrap();
    let c = TrainConfig { epochs: 3, ..config(ModelKind::Mlp, LossKind::Dae) };
    let a = fit(&c, &train, &eval).unwrap();
    let b = fit(&c, &train, &eval).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best.model, b.best.model);
    let other = fit(&TrainConfig { seed: 9, ..c }, &train, &eval).unwrap();
    assert_ne!(a.history, other.history);
}

#[test]
fn sample_mode_spreads_predictions_around_the_mean() {
    let data = synth_heteroscedastic(&SyntheticSpec { n: 400, feature_dim: 4, seed: 2, ..Default::default() }).unwrap();
    let (train, eval) = split(&data.dataset, 0.75, 2).unwrap();
    let r = fit(&TrainConfig { epochs: 10, ..config(ModelKind::Mlp, LossKind::Dae) }, &train, &eval).unwrap();
    let fam = DistributionFamily::Gaussian;
    let mean = evaluate(&r.best.model, &eval, ReadoutMode::Mean, &fam, &mut Rng::new(0)).unwrap();
    let sample = evaluate(&r.best.model, &eval, ReadoutMode::Sample, &fam, &mut Rng::new(0)).unwrap();
    assert!(mean.rows.iter().all(|row| row.y_pred == row.mu));
    let spread: f64 = sample.rows.iter().map(|row| (row.y_pred - row.mu).powi(2) / row.sigma2).sum::<f64>() / sample.n as f64;
    assert!((spread - 1.0).abs() < 0.3, "{spread}");
}
