use dae_core::autodiff::{Tape, Tensor};
use dae_core::distributions::{density_curve, reparameterize, DistributionFamily, Grid, Rng};
use dae_core::metrics::{average_ranks, spearman};
use dae_core::model::{aggregate_judges, interval_readout, IntervalSpec};
use dae_core::training::{dae_loss, LossWeights};
use proptest::prelude::*;

fn family() -> impl Strategy<Value = DistributionFamily> {
    prop_oneof![
        Just(DistributionFamily::Gaussian),
        Just(DistributionFamily::Laplace),
        Just(DistributionFamily::Logistic),
        (2.5f64..30.0).prop_map(|dof| DistributionFamily::StudentT { dof }),
        Just(DistributionFamily::Triangular),
        Just(DistributionFamily::LogisticNormal),
    ]
}

proptest! {
    #[test]
    fn judge_aggregate_is_order_free_and_linear_in_dd(
        mut v in prop::collection::vec(-10.0f64..10.0, 7),
        dd in 0.5f64..5.0,
        seed in any::<u64>(),
    ) {
        let a = aggregate_judges(&v, dd).unwrap();
        Rng::new(seed).shuffle(&mut v);
        prop_assert_eq!(aggregate_judges(&v, dd).unwrap(), a);
        let doubled = aggregate_judges(&v, 2.0 * dd).unwrap();
        prop_assert!((doubled - 2.0 * a).abs() <= 1e-12 * a.abs().max(1.0));
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        prop_assert!(a / dd >= 3.0 * s[1] - 1e-9 && a / dd <= 3.0 * s[5] + 1e-9);
    }

    #[test]
    fn spearman_ignores_monotone_transforms(
        p in prop::collection::vec(-5.0f64..5.0, 3..40),
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let q: Vec<f64> = p.iter().map(|x| x + rng.standard_normal()).collect();
        let (Ok(a), Ok(b)) = (spearman(&p, &q), spearman(&p.iter().map(|x| x.exp()).collect::<Vec<_>>(), &q)) else {
            return Ok(());
        };
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn ranks_sum_to_triangle_number(v in prop::collection::vec(-3i32..3, 1..50)) {
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        let n = v.len() as f64;
        let total: f64 = average_ranks(&v).iter().sum();
        prop_assert!((total - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn density_curves_are_finite_and_peak_near_location(f in family(), mu in -3.0f64..3.0, sigma in 0.05f64..3.0) {
        let grid = Grid::around(mu, sigma, 4.0, 201);
        let curve = density_curve(mu, sigma, &f, &grid).unwrap();
        prop_assert_eq!(curve.len(), 201);
        prop_assert!(curve.iter().all(|(_, d)| d.is_finite() && *d >= 0.0));
        if !matches!(f, DistributionFamily::LogisticNormal) {
            let (y, _) = curve.iter().copied().fold((0.0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
            prop_assert!((y - mu).abs() <= 8.0 * sigma / 200.0 + 1e-9);
        }
    }

    #[test]
    fn reparameterization_is_affine(mu in -5.0f64..5.0, sigma in 0.0f64..4.0, eps in -4.0f64..4.0) {
        prop_assert_eq!(reparameterize(mu, sigma, eps).unwrap(), mu + sigma * eps);
    }

    #[test]
    fn mean_mode_readout_stays_inside_its_interval(
        w in -1.0f64..2.0,
        sw in 0.0f64..3.0,
        k in 0usize..6,
    ) {
        let spec = IntervalSpec::uniform(10.0, 40.0, 6).unwrap();
        let (l, r) = spec.interval(k);
        let y = interval_readout(w, sw, 0.0, l, r);
        prop_assert!(y >= l && y <= r);
    }

    #[test]
    fn dae_loss_is_minimized_at_the_weighted_residual(r in 0.01f64..3.0, step in 0.01f64..1.0) {
        let w = LossWeights { alpha: 0.6, beta: 0.4 };
        let best = (1.5 * r * r).ln();
        let at = |lv: f64| dae_loss(&[0.0], &[lv], &[r], w).unwrap();
        prop_assert!(at(best) <= at(best + step));
        prop_assert!(at(best) <= at(best - step));
    }
}

/// Backprop through a small composite expression against central differences.
#[test]
fn composite_expression_gradient() {
    let x0 = vec![0.3, -1.2, 0.7, 2.1, -0.4, 0.9];
    let f = |x: &[f64]| -> (f64, Vec<f64>) {
        let mut t = Tape::new();
        let a = t.variable(Tensor::matrix(2, 3, x.to_vec()).unwrap());
        let b = t.constant(Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap());
        let m = t.matmul(a, b).unwrap();
        let r = t.relu(m);
        let e = t.exp(m).unwrap();
        let s = t.add(r, e).unwrap();
        let q = t.square(s).unwrap();
        let l = t.log(q).unwrap();
        let loss = t.reduce_mean(l).unwrap();
        t.backward(loss).unwrap();
        (t.value(loss).item().unwrap(), t.grad(a).unwrap().to_vec())
    };
    let (_, g) = f(&x0);
    for i in 0..x0.len() {
        let h = 1e-6;
        let (mut up, mut down) = (x0.clone(), x0.clone());
        up[i] += h;
        down[i] -= h;
        let num = (f(&up).0 - f(&down).0) / (2.0 * h);
        assert!((num - g[i]).abs() < 1e-7 * num.abs().max(1.0), "{i}: {num} vs {}", g[i]);
    }
}
