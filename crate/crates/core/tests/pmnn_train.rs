use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use skillfb::canonical::{KernelBank, DEFAULT_KERNELS};
use skillfb::pmnn::{leave_one_demo_out, pmnn_train, FeedbackDataset, PmnnParams, TrainConfig};
use skillfb::rng;

fn inputs(t: usize, s: usize, r: &mut impl Rng) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = Normal::new(0.0, 1.0).unwrap();
    let x = DMatrix::from_fn(t, s, |_, _| n.sample(r));
    let ph = DMatrix::from_fn(t, 2, |_, j| {
        if j == 0 {
            r.random_range(0.0..1.0)
        } else {
            r.random_range(0.0..0.6)
        }
    });
    (x, ph)
}

fn teacher_data(t: usize, seed: u64) -> (FeedbackDataset, PmnnParams) {
    let mut r = rng::stream(seed, "teacher");
    let bank = KernelBank::equal_time(DEFAULT_KERNELS).unwrap();
    let teacher = PmnnParams::random(4, &[6], bank, vec![0], &mut r).unwrap();
    let (x, ph) = inputs(t, 4, &mut r);
    let shell = FeedbackDataset::new(x.clone(), ph.clone(), DMatrix::zeros(t, 1)).unwrap();
    let y = teacher.predict(&shell).unwrap() * 40.0;
    (FeedbackDataset::new(x, ph, y).unwrap(), teacher)
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        hidden: vec![12],
        epochs: 60,
        learning_rate: 3e-3,
        dropout: 0.0,
        seed,
        overfit_guard: false,
        ..TrainConfig::default()
    }
}

#[test]
fn student_learns_teacher() {
    let (data, teacher) = teacher_data(8000, 1);
    let report = pmnn_train(&data, &teacher.bank, &[0], &small_config(2)).unwrap();
    assert!(report.validation_nmse < 0.1, "{report:?}");
    assert!(report.test_nmse < 0.1);
    assert_eq!(report.metrics.len(), 60);
    assert!(report.diverged.is_none());
    let first = report.metrics[0].validation_nmse;
    assert!(report.validation_nmse < first);
}

#[test]
fn training_is_deterministic() {
    let (data, teacher) = teacher_data(3000, 3);
    let cfg = TrainConfig {
        epochs: 5,
        dropout: 0.5,
        ..small_config(9)
    };
    let a = pmnn_train(&data, &teacher.bank, &[0], &cfg).unwrap();
    let b = pmnn_train(&data, &teacher.bank, &[0], &cfg).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.params, b.params);
    let c = pmnn_train(&data, &teacher.bank, &[0], &TrainConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.metrics, c.metrics);
}

#[test]
fn zero_targets_train_to_zero_output() {
    let mut r = rng::stream(4, "zero");
    let bank = KernelBank::equal_time(DEFAULT_KERNELS).unwrap();
    let (x, ph) = inputs(3000, 3, &mut r);
    let data = FeedbackDataset::new(x, ph, DMatrix::zeros(3000, 1)).unwrap();
    let report = pmnn_train(&data, &bank, &[0], &TrainConfig { epochs: 10, ..small_config(1) }).unwrap();
    assert!(report.validation_nmse.is_nan());
    let pred = report.params.predict(&data).unwrap();
    let mse = pred.norm_squared() / pred.len() as f64;
    assert!(mse < 1e-6, "{mse}");
}

#[test]
fn overfit_guard_rejects_small_datasets() {
    let (data, teacher) = teacher_data(200, 5);
    let cfg = TrainConfig {
        overfit_guard: true,
        ..small_config(0)
    };
    assert!(pmnn_train(&data, &teacher.bank, &[0], &cfg).is_err());
    let cfg = TrainConfig {
        overfit_guard: false,
        epochs: 2,
        ..cfg
    };
    assert!(pmnn_train(&data, &teacher.bank, &[0], &cfg).is_ok());
}

#[test]
fn divergence_keeps_last_finite_checkpoint() {
    let (data, teacher) = teacher_data(3000, 6);
    let cfg = TrainConfig {
        learning_rate: 1e200,
        epochs: 20,
        ..small_config(0)
    };
    let report = pmnn_train(&data, &teacher.bank, &[0], &cfg).unwrap();
    assert!(report.diverged.is_some());
    assert!(report.params.nets[0].hidden[0].weights.iter().all(|v| v.is_finite()));
    assert!(report.params.predict(&data).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn bad_config_is_rejected() {
    let (data, teacher) = teacher_data(3000, 7);
    for cfg in [
        TrainConfig { dropout: 1.0, ..small_config(0) },
        TrainConfig { learning_rate: 0.0, ..small_config(0) },
        TrainConfig { validation_split: 0.6, test_split: 0.5, ..small_config(0) },
    ] {
        assert!(pmnn_train(&data, &teacher.bank, &[0], &cfg).is_err());
    }
    assert!(pmnn_train(&data, &teacher.bank, &[0, 1], &small_config(0)).is_err());
}

#[test]
fn leave_one_out_bookkeeping() {
    let (data, teacher) = teacher_data(3 * 4 * 250, 8);
    let demos: Vec<Vec<FeedbackDataset>> = (0..3)
        .map(|s| {
            (0..4)
                .map(|k| {
                    let start = (s * 4 + k) * 250;
                    data.select(&(start..start + 250).collect::<Vec<_>>())
                })
                .collect()
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 3,
        ..small_config(0)
    };
    let rows = leave_one_demo_out(&demos, &teacher.bank, &[0], &cfg).unwrap();
    assert_eq!(rows.len(), 4);
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(row.held_out, k);
        assert_eq!(row.train_rows, 3 * 3 * 250);
        assert_eq!(row.held_out_rows, 3 * 250);
        for v in [row.train, row.validation, row.test, row.generalization] {
            assert!(v.is_finite());
        }
    }
    assert!(leave_one_demo_out(&demos[..1].iter().map(|s| s[..1].to_vec()).collect::<Vec<_>>(), &teacher.bank, &[0], &cfg).is_err());
}
