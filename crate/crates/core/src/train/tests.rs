use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{ModelSpec, Variant};

fn scalar_store(p0: f64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store.register("p", &[1], vec![p0]).unwrap();
    store
}

#[test]
fn mse_examples() {
    assert_eq!(mse_loss(&[1.0, -2.0], &[1.0, -2.0]).unwrap(), 0.0);
    assert_eq!(mse_loss(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 12.5);
    assert_eq!(
        mse_loss(&[1.0, 5.0, -2.0], &[0.5, 1.0, 2.0]).unwrap(),
        mse_loss(&[-2.0, 1.0, 5.0], &[2.0, 0.5, 1.0]).unwrap()
    );
    assert!(matches!(mse_loss(&[1.0], &[1.0, 2.0]), Err(Error::Usage(_))));
}

#[test]
fn mse_node_matches_plain_loss() {
    let mut g = Graph::<f64>::new();
    let p = g.variable(&[2, 2], vec![3.0, 4.0, 1.0, -1.0]).unwrap();
    let t = g.constant(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    let l = mse_node(&mut g, p, t).unwrap();
    assert_eq!(
        g.value(l)[0],
        mse_loss(&[3.0, 4.0, 1.0, -1.0], &[0.0, 0.0, 1.0, 1.0]).unwrap()
    );
    g.backward(l).unwrap();
    assert_eq!(g.grad(p).unwrap(), &[1.5, 2.0, 0.0, -1.0]);
}

#[test]
fn adam_zero_gradient_is_a_fixed_point() {
    let mut store = scalar_store(0.7);
    for t in 1..=5 {
        adam_step(&mut store, &[vec![0.0]], &AdamConfig::default(), t).unwrap();
    }
    assert_eq!(store.flatten(), [0.7]);
}

#[test]
fn adam_constant_gradient_moves_by_lr_per_step() {
    // With a constant gradient the corrected moments equal g and g^2.
    let cfg = AdamConfig::default();
    for g in [2.0, -0.5, 1e-3] {
        let mut store = scalar_store(1.0);
        for t in 1..=3 {
            adam_step(&mut store, &[vec![g]], &cfg, t).unwrap();
        }
        let expected = 1.0 - 3.0 * cfg.learning_rate * g / (f64::abs(g) + cfg.eps);
        assert!((store.flatten()[0] - expected).abs() < 1e-15, "g={g}");
    }
}

#[test]
fn adam_matches_hand_iteration() {
    let cfg = AdamConfig {
        learning_rate: 0.1,
        beta1: 0.5,
        beta2: 0.75,
        eps: 0.0 + 1e-8,
    };
    let mut store = scalar_store(1.0);
    for (t, g) in [(1, 1.0), (2, -2.0), (3, 0.5)] {
        adam_step(&mut store, &[vec![g]], &cfg, t).unwrap();
    }
    // step 1: m = 0.5, v = 0.25, m^ = 1, v^ = 1 -> p = 1 - 0.1 * 1 / (1 + eps)
    let p1 = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
    // step 2: m = 0.25 - 1 = -0.75, v = 0.1875 + 1 = 1.1875
    //         m^ = -0.75 / 0.75 = -1, v^ = 1.1875 / 0.4375
    let p2 = p1 + 0.1 / ((1.1875f64 / 0.4375).sqrt() + 1e-8);
    // step 3: m = -0.375 + 0.25 = -0.125, v = 0.890625 + 0.0625 = 0.953125
    //         m^ = -0.125 / 0.875, v^ = 0.953125 / (1 - 0.421875)
    let p3 = p2 - 0.1 * (-0.125 / 0.875) / ((0.953125f64 / 0.578125).sqrt() + 1e-8);
    assert!(
        (store.flatten()[0] - p3).abs() < 1e-15,
        "{} vs {p3}",
        store.flatten()[0]
    );
}

#[test]
fn adam_rejects_bad_calls() {
    let mut store = scalar_store(1.0);
    let cfg = AdamConfig::default();
    assert!(adam_step(&mut store, &[vec![1.0]], &cfg, 0).is_err());
    assert!(adam_step(&mut store, &[], &cfg, 1).is_err());
    assert!(adam_step(&mut store, &[vec![1.0, 2.0]], &cfg, 1).is_err());
}

#[test]
fn adam_trajectories_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grads: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut a = scalar_store(0.3);
    let mut b = scalar_store(0.3);
    for (t, g) in grads.iter().enumerate() {
        adam_step(&mut a, &[vec![*g]], &AdamConfig::default(), t as u64 + 1).unwrap();
        adam_step(&mut b, &[vec![*g]], &AdamConfig::default(), t as u64 + 1).unwrap();
        assert_eq!(a.flatten()[0].to_bits(), b.flatten()[0].to_bits());
    }
}

#[test]
fn metric_examples() {
    let z = vec![vec![0.0, 0.0]];
    assert_eq!(rmse(&z, &z).unwrap(), 0.0);
    assert_eq!(mae(&z, &z).unwrap(), 0.0);
    let r = rmse(&[vec![3.0], vec![4.0]], &[vec![0.0], vec![0.0]]).unwrap();
    assert!((r - 12.5f64.sqrt()).abs() < 1e-15);
    assert!((r - 3.5355339059327378).abs() < 1e-15);
    assert_eq!(mae(&[vec![3.0, -4.0]], &[vec![0.0, 0.0]]).unwrap(), 3.5);
}

#[test]
fn metric_shape_errors() {
    assert!(matches!(rmse(&[vec![1.0]], &[]), Err(Error::Usage(_))));
    assert!(matches!(mae(&[vec![1.0]], &[vec![1.0, 2.0]]), Err(Error::Usage(_))));
    assert!(matches!(rmse(&[], &[]), Err(Error::Usage(_))));
}

fn random_matrix(rng: &mut ChaCha8Rng, m: usize, tau: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| (0..tau).map(|_| rng.gen_range(-3.0..3.0)).collect())
        .collect()
}

#[test]
fn metric_properties_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let m = rng.gen_range(1..20);
        let tau = rng.gen_range(1..6);
        let a = random_matrix(&mut rng, m, tau);
        let b = random_matrix(&mut rng, m, tau);
        let (r, e) = (rmse(&a, &b).unwrap(), mae(&a, &b).unwrap());
        assert!(r >= e);
        let c: f64 = rng.gen_range(-4.0..4.0);
        let scale = |x: &[Vec<f64>]| -> Vec<Vec<f64>> { x.iter().map(|r| r.iter().map(|v| c * v).collect()).collect() };
        let scaled = mae(&scale(&a), &scale(&b)).unwrap();
        assert!((scaled - c.abs() * e).abs() < 1e-12);
    }
}

fn tiny_task(samples: usize, seed: u64) -> (ModelSpec, Vec<WindowSample>) {
    // Target is a fixed linear map of the last input step.
    let spec = ModelSpec {
        variant: Variant::Tcn,
        n_exog: 2,
        window: 4,
        horizon: 1,
        kernel_size: 1,
        levels: 1,
        hidden: 4,
        dropout: 0.0,
        seed: 1111,
    };
    let coef = [0.5, -0.3, 0.8];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..samples)
        .map(|origin| {
            let input: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = (0..3).map(|c| coef[c] * input[c * 4 + 3]).sum::<f64>();
            WindowSample {
                input,
                target: vec![y],
                origin,
            }
        })
        .collect();
    (spec, data)
}

#[test]
fn zero_epochs_leave_the_model_untouched() {
    let (spec, data) = tiny_task(16, 1);
    let mut model = ForecastModel::<f64>::build(spec).unwrap();
    let before = model.params().flatten();
    let history = train(
        &mut model,
        &data,
        &TrainConfig {
            epochs: 0,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(history.train_loss.is_empty() && history.epoch_seconds.is_empty());
    assert_eq!(model.params().flatten(), before);
}

#[test]
fn mismatched_samples_fail_before_training() {
    let (spec, mut data) = tiny_task(16, 1);
    data[5].input.pop();
    let mut model = ForecastModel::<f64>::build(spec).unwrap();
    let before = model.params().flatten();
    let err = train(
        &mut model,
        &data,
        &TrainConfig {
            epochs: 3,
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(err.is_configuration(), "{err}");
    assert_eq!(model.params().flatten(), before);
    let err = train(&mut model, &[], &TrainConfig::default()).unwrap_err();
    assert!(err.is_configuration());
}

#[test]
fn invalid_train_config_is_rejected() {
    assert!(TrainConfig {
        batch_size: 0,
        ..Default::default()
    }
    .validate()
    .is_err());
    let bad_lr = TrainConfig {
        adam: AdamConfig {
            learning_rate: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    assert!(bad_lr.validate().unwrap_err().is_configuration());
}

#[test]
fn linear_task_is_learned() {
    let (spec, data) = tiny_task(256, 2);
    let mut model = ForecastModel::<f64>::build(spec).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        ..Default::default()
    };
    let h = train(&mut model, &data, &cfg).unwrap();
    assert_eq!(h.train_loss.len(), 200);
    let (first, last) = (h.train_loss[0], h.train_loss[199]);
    assert!(last < 1e-3, "final loss {last}");
    assert!(first >= 100.0 * last, "loss went from {first} to {last}");
    let m = evaluate(&model, &data).unwrap();
    assert!(m.rmse * m.rmse < 1e-3);
}

#[test]
fn identical_runs_give_identical_histories() {
    let (mut spec, data) = tiny_task(100, 3);
    spec.dropout = 0.2;
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 16,
        ..Default::default()
    };
    let run = || {
        let mut model = ForecastModel::<f64>::build(spec.clone()).unwrap();
        let h = train(&mut model, &data, &cfg).unwrap();
        (
            h.train_loss.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            model.params().flatten(),
        )
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(
        pa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        pb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn seeds_change_initialization_and_order_but_not_samples() {
    let (spec, data) = tiny_task(40, 4);
    let a = ForecastModel::<f64>::build(spec.clone()).unwrap();
    let b = ForecastModel::<f64>::build(ModelSpec { seed: 7, ..spec }).unwrap();
    assert_ne!(a.params().flatten(), b.params().flatten());
    for epoch in 0..4 {
        let mut order = epoch_order(data.len(), 1111, epoch);
        assert_ne!(order, epoch_order(data.len(), 1111, epoch + 1));
        order.sort_unstable();
        assert_eq!(order, (0..data.len()).collect::<Vec<_>>());
    }
}

#[test]
fn short_last_batch_is_used() {
    let (spec, data) = tiny_task(10, 5);
    let mut model = ForecastModel::<f64>::build(spec).unwrap();
    let mut trainer = Trainer::new(
        &mut model,
        TrainConfig {
            batch_size: 4,
            ..Default::default()
        },
    )
    .unwrap();
    trainer.run_epoch(&data).unwrap();
    assert_eq!(trainer.step, 3);
}

#[test]
fn epoch_loss_is_the_sample_mean_before_updates() {
    // A learning rate too small to matter makes every batch see the
    // initial model, so the epoch loss equals the full-data MSE.
    let (spec, data) = tiny_task(30, 6);
    let mut model = ForecastModel::<f64>::build(spec).unwrap();
    let truths: Vec<Vec<f64>> = data.iter().map(|s| s.target.clone()).collect();
    let initial = rmse(&predict_samples(&model, &data).unwrap(), &truths).unwrap().powi(2);
    let cfg = TrainConfig {
        batch_size: 7,
        epochs: 1,
        adam: AdamConfig {
            learning_rate: 1e-300,
            ..Default::default()
        },
        ..Default::default()
    };
    let h = train(&mut model, &data, &cfg).unwrap();
    assert!((h.train_loss[0] - initial).abs() < 1e-12);
}
