use super::*;
use crate::canonical::{KernelBank, DEFAULT_KERNELS};
use crate::dmp::default_steps;
use crate::quat::{quat_exp, RotVec3, Vec3};
use nalgebra::DVector;
use proptest::prelude::{prop_assert, proptest};
use rand::Rng as _;

fn mat(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v)
}

fn random_problem(seed: u64, k: usize, t: usize) -> (Vec<DMatrix<f64>>, Vec<Vec<f64>>, DMatrix<f64>) {
    let mut r = rng::stream(seed, "pi2");
    let samples = (0..k)
        .map(|_| DMatrix::from_fn(3, 2, |_, _| r.random_range(-1.0..1.0)))
        .collect();
    let costs = (0..k)
        .map(|_| (0..t).map(|_| r.random_range(0.0..2.0)).collect())
        .collect();
    let mean = DMatrix::from_fn(3, 2, |_, _| r.random_range(-0.2..0.2));
    (samples, costs, mean)
}

#[test]
fn step_cost_examples() {
    let q = quat_exp(RotVec3(Vec3::new(0.3, -0.2, 0.5)));
    assert_eq!(step_cost(&q, &q), 0.0);
    for axis in [Vec3::x(), Vec3::y(), Vec3::new(1.0, 2.0, -2.0).normalize()] {
        let turned = UnitQuaternion::from_axis_angle(&axis, 0.1) * q;
        assert!((step_cost(&q, &turned) - 0.1).abs() < 1e-12);
        assert!((step_cost(&q, &turned) - step_cost(&turned, &q)).abs() < 1e-15);
    }
}

#[test]
fn uniform_costs_give_sample_mean_and_scatter() {
    let (samples, _, mean) = random_problem(1, 4, 5);
    let costs = vec![vec![0.7; 5]; 4];
    let up = pi2_cma_update(&samples, &costs, &mean, &Pi2Config::default()).unwrap();
    let avg = samples.iter().fold(DMatrix::zeros(3, 2), |a, s| a + s) / 4.0;
    assert!((&up.mean - &avg).amax() < 1e-15);
    assert!(up.probabilities.iter().all(|p| *p == 0.25));
    let mut scatter = DMatrix::zeros(6, 6);
    for s in &samples {
        let d = vectorize(s) - vectorize(&mean);
        scatter += &d * d.transpose() / 4.0;
    }
    assert!((&up.covariance - &scatter).amax() < 1e-15);
}

#[test]
fn tiny_temperature_picks_best_sample_per_time() {
    // Tail sums: sample 1 is cheapest at t = 0, sample 3 at t = 1, 2.
    let costs = vec![
        vec![5.0, 5.0, 5.0, 5.0],
        vec![0.0, 4.0, 4.0, 1.0],
        vec![3.0, 3.0, 3.0, 3.0],
        vec![7.0, 1.0, 1.0, 1.0],
        vec![4.0, 4.0, 4.0, 4.0],
    ];
    let samples: Vec<DMatrix<f64>> = (0..5).map(|k| DMatrix::from_element(2, 1, k as f64)).collect();
    let mean = DMatrix::zeros(2, 1);
    let s = cost_to_go(&costs, CostToGo::Tail);
    let range = (0..4).map(|t| s.column(t).max() - s.column(t).min()).fold(0.0, f64::max);
    let cfg = Pi2Config {
        lambda: Some(1e-9 * range),
        ..Pi2Config::default()
    };
    let up = pi2_cma_update(&samples, &costs, &mean, &cfg).unwrap();
    // Time weights 3, 2, 1, 0 on per-time winners 1, 3, 3.
    let expected = (3.0 * 1.0 + 2.0 * 3.0 + 1.0 * 3.0) / 6.0;
    assert!((up.mean[(0, 0)] - expected).abs() < 1e-12, "{}", up.mean);
}

#[test]
fn two_by_two_hand_case() {
    // K = 2, T = 2, lambda = 1, tail sums: S = [[3, 2], [1, 1]].
    let costs = vec![vec![1.0, 2.0], vec![0.0, 1.0]];
    let samples = vec![mat(1, 1, &[1.0]), mat(1, 1, &[3.0])];
    let mean = mat(1, 1, &[2.0]);
    let cfg = Pi2Config {
        lambda: Some(1.0),
        ..Pi2Config::default()
    };
    let up = pi2_cma_update(&samples, &costs, &mean, &cfg).unwrap();
    let e = (-2.0f64).exp();
    let p0 = e / (e + 1.0);
    let p1 = 1.0 / (e + 1.0);
    assert!((up.probabilities[(0, 0)] - p0).abs() < 1e-12);
    assert!((up.probabilities[(1, 0)] - p1).abs() < 1e-12);
    let f = (-1.0f64).exp();
    assert!((up.probabilities[(0, 1)] - f / (f + 1.0)).abs() < 1e-12);
    // Only t = 0 carries weight.
    let theta = p0 * 1.0 + p1 * 3.0;
    assert!((up.mean[(0, 0)] - theta).abs() < 1e-12);
    let cov = p0 * 1.0 + p1 * 1.0;
    assert!((up.covariance[(0, 0)] - cov).abs() < 1e-12);

    let full = pi2_cma_update(&samples, &costs, &mean, &Pi2Config { cost_to_go: CostToGo::FullSum, ..cfg }).unwrap();
    assert!((full.probabilities[(0, 1)] - p0).abs() < 1e-12);
}

#[test]
fn default_temperature_is_tenth_of_largest_range() {
    let costs = vec![vec![1.0, 2.0], vec![0.0, 1.0]];
    let samples = vec![mat(1, 1, &[1.0]), mat(1, 1, &[3.0])];
    let up = pi2_cma_update(&samples, &costs, &mat(1, 1, &[0.0]), &Pi2Config::default()).unwrap();
    assert!((up.lambda - 0.2).abs() < 1e-15);
}

#[test]
fn update_rejects_bad_input() {
    let (samples, costs, mean) = random_problem(2, 3, 4);
    let cfg = Pi2Config::default();
    assert!(pi2_cma_update(&samples[..1], &costs[..1], &mean, &cfg).is_err());
    assert!(pi2_cma_update(&samples, &costs[..2], &mean, &cfg).is_err());
    let mut ragged = costs.clone();
    ragged[1].pop();
    assert!(pi2_cma_update(&samples, &ragged, &mean, &cfg).is_err());
    let neg = Pi2Config { lambda: Some(0.0), ..cfg };
    assert!(pi2_cma_update(&samples, &costs, &mean, &neg).is_err());
}

#[test]
fn underflow_is_stabilized() {
    let costs = vec![vec![1e6, 1e6], vec![1e6 + 1.0, 1e6]];
    let p = probabilities(&cost_to_go(&costs, CostToGo::Tail), 1e-3);
    assert!(p.iter().all(|v| v.is_finite()));
    assert!((p[(0, 0)] - 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn probabilities_are_normalized(seed in 0u64..1000, k in 2usize..8, t in 2usize..12) {
        let (samples, costs, mean) = random_problem(seed, k, t);
        let up = pi2_cma_update(&samples, &costs, &mean, &Pi2Config::default()).unwrap();
        for c in 0..t {
            prop_assert!((up.probabilities.column(c).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_cost_shift_changes_nothing(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let (samples, costs, mean) = random_problem(seed, 5, 6);
        // A per-step shift moves every sample's cost-to-go by the same amount.
        let shifted: Vec<Vec<f64>> = costs.iter().map(|c| c.iter().map(|v| v + shift).collect()).collect();
        let cfg = Pi2Config { lambda: Some(0.7), ..Pi2Config::default() };
        let a = pi2_cma_update(&samples, &costs, &mean, &cfg).unwrap();
        let b = pi2_cma_update(&samples, &shifted, &mean, &cfg).unwrap();
        prop_assert!((&a.mean - &b.mean).amax() < 1e-9);
        prop_assert!((&a.covariance - &b.covariance).amax() < 1e-9);
    }

    #[test]
    fn new_mean_is_in_the_sample_hull(seed in 0u64..1000) {
        let (samples, costs, mean) = random_problem(seed, 6, 5);
        let up = pi2_cma_update(&samples, &costs, &mean, &Pi2Config::default()).unwrap();
        for i in 0..up.mean.len() {
            let lo = samples.iter().map(|s| s[i]).fold(f64::INFINITY, f64::min);
            let hi = samples.iter().map(|s| s[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(up.mean[i] >= lo - 1e-12 && up.mean[i] <= hi + 1e-12);
        }
    }
}

#[test]
fn zero_covariance_samples_the_mean() {
    let mean = DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64);
    let s = sample_policies(&mean, &DMatrix::zeros(12, 12), 5, &mut rng::stream(0, "t")).unwrap();
    assert!(s.iter().all(|x| *x == mean));
}

#[test]
fn sampling_is_seeded() {
    let mean = DMatrix::zeros(3, 1);
    let cov = DMatrix::identity(3, 3);
    let a = sample_policies(&mean, &cov, 4, &mut rng::stream(3, "t")).unwrap();
    let b = sample_policies(&mean, &cov, 4, &mut rng::stream(3, "t")).unwrap();
    let c = sample_policies(&mean, &cov, 4, &mut rng::stream(4, "t")).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(sample_policies(&mean, &cov, 1, &mut rng::stream(3, "t")).is_err());
    assert!(sample_policies(&mean, &DMatrix::identity(2, 2), 4, &mut rng::stream(3, "t")).is_err());
}

#[test]
fn sample_covariance_matches() {
    let sigma2 = 0.25;
    let mean = DMatrix::from_element(3, 2, 1.0);
    let cov = DMatrix::identity(6, 6) * sigma2;
    let s = sample_policies(&mean, &cov, 10_000, &mut rng::stream(5, "mc")).unwrap();
    let mut est = DMatrix::zeros(6, 6);
    let mu = vectorize(&mean);
    for x in &s {
        let d = vectorize(x) - &mu;
        est += &d * d.transpose();
    }
    est /= s.len() as f64;
    let rel = (&est - &cov).norm() / cov.norm();
    assert!(rel < 0.05, "{rel}");
}

#[test]
fn indefinite_covariance_is_repaired() {
    let mean = DMatrix::zeros(2, 1);
    let cov = mat(2, 2, &[1.0, 0.0, 0.0, -1.0]);
    let s = sample_policies(&mean, &cov, 200, &mut rng::stream(1, "t")).unwrap();
    let spread = s.iter().map(|x| x[1].abs()).fold(0.0, f64::max);
    assert!(spread < 1e-4, "{spread}");
    assert!(s.iter().any(|x| x[0].abs() > 0.1));
}

#[test]
fn block_diagonal_projection() {
    let full = DMatrix::from_fn(4, 4, |i, j| (i * 4 + j) as f64);
    let b = block_diagonal(&full, 2);
    assert_eq!(b[(0, 1)], 1.0);
    assert_eq!(b[(2, 3)], 11.0);
    assert_eq!(b[(0, 2)], 0.0);
    assert_eq!(b[(3, 1)], 0.0);
}

fn bank() -> KernelBank {
    KernelBank::equal_time(DEFAULT_KERNELS).unwrap()
}

fn primitive() -> DmpParams {
    let b = bank();
    let w = DMatrix::from_fn(b.len(), 3, |i, j| 20.0 * ((i + 2 * j) as f64 * 0.4).sin());
    DmpParams::new(
        w,
        0.8,
        UnitQuaternion::identity(),
        quat_exp(RotVec3(Vec3::new(0.0, 0.25, 0.05))),
        b,
    )
    .unwrap()
}

#[test]
fn compressing_a_nominal_rollout_recovers_its_forcing_term() {
    let p = primitive();
    let roll = p.open_loop(default_steps(), p.dt(), |_, _| Vec3::zeros()).unwrap();
    let c = compress_rollout(&roll, &p).unwrap();
    let again = c.open_loop(default_steps(), c.dt(), |_, _| Vec3::zeros()).unwrap();
    for axis in 0..3 {
        let src: Vec<f64> = roll.orientations.iter().map(|q| q.error_to(&p.start)[axis]).collect();
        let out: Vec<f64> = again.orientations.iter().map(|q| q.error_to(&p.start)[axis]).collect();
        let mean = src.iter().sum::<f64>() / src.len() as f64;
        let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / src.len() as f64;
        if var > 1e-12 {
            let mse = src.iter().zip(&out).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / src.len() as f64;
            assert!(mse / var < 0.05, "axis {axis}: {}", mse / var);
        }
    }
    assert_eq!(compress_rollout(&roll, &p).unwrap(), c);
}

#[test]
fn compression_reproduces_a_coupled_trajectory() {
    let p = primitive();
    let coupled = p
        .open_loop(default_steps(), p.dt(), |_, s| Vec3::new(3.0 * s.u, -1.0 * s.u, 0.5))
        .unwrap();
    let c = compress_rollout(&coupled, &p).unwrap();
    let again = c.open_loop(default_steps(), c.dt(), |_, _| Vec3::zeros()).unwrap();
    let worst = coupled
        .orientations
        .iter()
        .zip(&again.orientations)
        .map(|(a, b)| a.angle_to(b))
        .fold(0.0, f64::max);
    assert!(worst < 0.01, "{worst}");
}

#[test]
fn initial_covariance_covers_feedback_axes_only() {
    let p = primitive();
    let n = p.weights.nrows();
    let cov = initial_covariance(&p, &[0], 0.05);
    let rms = (p.weights.norm_squared() / p.weights.len() as f64).sqrt();
    assert!((cov[(0, 0)] - (0.05 * rms).powi(2)).abs() < 1e-12);
    assert_eq!(cov[(n, n)], 0.0);
    assert!((cov.trace() - n as f64 * (0.05 * rms).powi(2)).abs() < 1e-9);
    let d = DVector::from_iterator(3 * n, cov.diagonal().iter().copied());
    assert_eq!(d.iter().filter(|v| **v > 0.0).count(), n);
}
