use super::*;
use crate::canonical::{KernelBank, DEFAULT_KERNELS};
use crate::dmp::{encode_sensor_traces, extract_target_coupling};

fn primitive() -> DmpParams {
    let b = KernelBank::equal_time(DEFAULT_KERNELS).unwrap();
    let w = DMatrix::from_fn(b.len(), 3, |i, j| 30.0 * ((i + 3 * j) as f64 * 0.35).sin());
    DmpParams::new(
        w,
        0.9,
        UnitQuaternion::identity(),
        quat_exp(RotVec3(Vec3::new(0.05, 0.4, -0.1))),
        b,
    )
    .unwrap()
}

struct Fixture {
    testbed: Testbed,
    nominal: DmpParams,
    expected: ExpectedSensorTraces,
}

fn fixture(config: PlantConfig) -> Fixture {
    let testbed = Testbed::new(config).unwrap();
    let nominal = primitive();
    let runs = nominal_runs(&testbed, 1, &nominal, 3, 11).unwrap();
    let expected = encode_sensor_traces(&runs, &nominal.bank).unwrap();
    Fixture {
        testbed,
        nominal,
        expected,
    }
}

impl Fixture {
    fn template(&self, deg: f64) -> Arc<PlantTemplate> {
        Arc::new(self.testbed.template(1, &self.nominal, EnvSetting::from_degrees(deg)).unwrap())
    }

    fn no_fb(&self, deg: f64, runs: usize, seed: u64) -> EvalStats {
        evaluate_setting(&self.template(deg), &self.nominal, &self.expected, None, runs, seed).unwrap()
    }
}

#[test]
fn setting_tags_and_roles() {
    assert_eq!(EnvSetting::from_degrees(6.3).tag(), "6.3deg");
    assert_eq!(EnvSetting::canonical().len(), CANONICAL_SETTINGS.len());
    assert!((EnvSetting::from_degrees(10.0).roll_rad() - 10f64.to_radians()).abs() < 1e-15);
}

#[test]
fn config_validation() {
    assert!(PlantConfig::default().validate().is_ok());
    let bad = [
        PlantConfig { sensor_dim: 0, ..PlantConfig::default() },
        PlantConfig { sensor_noise: -1.0, ..PlantConfig::default() },
        PlantConfig { nonlinear: true, saturation: 0.0, ..PlantConfig::default() },
    ];
    for c in bad {
        assert!(Testbed::new(c).is_err());
    }
}

#[test]
fn flat_board_costs_nothing() {
    let f = fixture(PlantConfig::default());
    let s = f.no_fb(0.0, 2, 1);
    assert!(s.mean < 1e-9, "{}", s.mean);
}

#[test]
fn cost_grows_with_roll() {
    let f = fixture(PlantConfig::default());
    let means: Vec<f64> = CANONICAL_SETTINGS.iter().map(|d| f.no_fb(*d, 2, 3).mean).collect();
    assert!(means.windows(2).all(|w| w[1] > w[0]), "{means:?}");
}

#[test]
fn sensor_shift_is_linear_in_roll() {
    let f = fixture(PlantConfig {
        nonlinear: false,
        ..PlantConfig::default()
    });
    let base = f.testbed.sensor_offset(0.0);
    assert_eq!(base.amax(), 0.0);
    let a = f.testbed.sensor_offset(0.05);
    let b = f.testbed.sensor_offset(0.10);
    assert!((&b - &a * 2.0).amax() < 1e-12);

    // Mean observed shift over a run, channel 0, against the roll angle.
    let steps = default_steps();
    let xs: Vec<f64> = CANONICAL_SETTINGS.iter().map(|d| d.to_radians()).collect();
    let ys: Vec<f64> = CANONICAL_SETTINGS
        .iter()
        .map(|d| {
            let t = f.template(*d);
            let mut p = t.instance(5);
            let mut acc = 0.0;
            for i in 0..steps {
                let o = p.observe(i, &t.nominal_relative[i]).unwrap();
                acc += o.sensors[0] - t.nominal_sensors[(i, 0)];
            }
            acc / steps as f64
        })
        .collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r = cov / (vx * vy).sqrt();
    assert!(r.abs() > 0.99, "{r}");
}

#[test]
fn saturated_sensors_stay_bounded() {
    let cfg = PlantConfig {
        nonlinear: true,
        saturation: 0.1,
        ..PlantConfig::default()
    };
    let t = Testbed::new(cfg).unwrap();
    assert!(t.sensor_offset(1.0).amax() <= 0.1);
    let small = t.sensor_offset(1e-4);
    let lin = t.mixing.column(ROLL_AXIS) * 1e-4;
    assert!((small - lin).amax() < 1e-9);
}

#[test]
fn oracle_cancels_the_tilt() {
    let f = fixture(PlantConfig::default());
    for deg in [5.0, 10.0] {
        let t = f.template(deg);
        let oracle = t.oracle(1.0);
        let with = evaluate_setting(&t, &f.nominal, &f.expected, Some(&oracle), 2, 4).unwrap();
        let without = f.no_fb(deg, 2, 4);
        assert!(with.mean <= 0.05 * without.mean, "{deg}: {} vs {}", with.mean, without.mean);
    }
}

#[test]
fn corrected_demos_need_roll_only() {
    let f = fixture(PlantConfig::default());
    let t = f.template(7.5);
    let demos = generate_corrected_demos(&t, &f.nominal, &f.expected, &f.testbed.config, 3, 9).unwrap();
    assert_eq!(demos.len(), 3);
    for d in &demos {
        let c = extract_target_coupling(d, &f.nominal).unwrap();
        let roll = c.column(ROLL_AXIS).amax();
        let other = c.column(1).amax().max(c.column(2).amax());
        assert!(roll > 0.0 && other < 1e-3 * roll, "roll {roll}, other {other}");
        assert!(d.cost_norm() < f.no_fb(7.5, 1, 9).mean);
    }
    assert!(generate_corrected_demos(&t, &f.nominal, &f.expected, &f.testbed.config, 0, 9)
        .unwrap()
        .is_empty());
    let flat = f.template(0.0);
    assert!(generate_corrected_demos(&flat, &f.nominal, &f.expected, &f.testbed.config, 2, 9).is_err());
}

#[test]
fn evaluation_is_deterministic() {
    let f = fixture(PlantConfig::default());
    let t = f.template(6.3);
    let oracle = t.oracle(0.5);
    let a = evaluate_setting(&t, &f.nominal, &f.expected, Some(&oracle), 3, 21).unwrap();
    let b = evaluate_setting(&t, &f.nominal, &f.expected, Some(&oracle), 3, 21).unwrap();
    assert_eq!(a, b);
    assert!(evaluate_setting(&t, &f.nominal, &f.expected, None, 0, 21).is_err());
}

#[test]
fn noise_seeds_agree_in_distribution() {
    let f = fixture(PlantConfig::default());
    let t = f.template(5.0);
    let read = |seed: u64| -> Vec<f64> {
        let mut p = t.instance(seed);
        (0..200).map(|i| p.observe(i, &t.nominal_relative[i]).unwrap().sensors[3] - t.nominal_sensors[(i, 3)]).collect()
    };
    let (a, b) = (read(1), read(2));
    assert_ne!(a, b);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let bound = 3.0 * f.testbed.config.sensor_noise * (2.0f64 / 200.0).sqrt();
    assert!((mean(&a) - mean(&b)).abs() < bound);
}

#[test]
fn stats_of_known_norms() {
    let s = EvalStats::from_norms(vec![1.0, 3.0]);
    assert_eq!(s.mean, 2.0);
    assert_eq!(s.std, 1.0);
}
