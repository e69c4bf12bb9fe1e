//! Simulated tilt-board scraping plant.
//!
//! The board can be rolled about the world x axis. Its effect on a
//! primitive is an effective tilt profile that starts at zero, peaks at the
//! setting's roll angle and decays again; it is the roll excursion that a
//! coupling term proportional to the phase velocity produces on that
//! primitive, so a phase-modulated feedback model can cancel it exactly. The
//! tactile sensors see the board's roll through a fixed random mixing matrix
//! for as long as the tool is on the board, independently of how well the
//! command compensates. The cost is the angle between the commanded
//! orientation relative to the board and the nominal relative orientation.

mod corpus;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::canonical::CanonicalState;
use crate::dmp::{
    default_steps, unroll, Coupling, DmpParams, ExpectedSensorTraces, FeedbackModel, Observation,
    Plant, Rollout,
};
use crate::error::{Error, Result};
use crate::quat::{quat_exp, RotVec3, UnitQuaternion, Vec3};
use crate::rl::{step_cost, PlantFactory};
use crate::rng;

pub use corpus::{generate_corpus, CorpusConfig, CorpusDemo, AXIS_X, AXIS_Y, AXIS_Z};

/// Tilt-stage roll angles, in degrees.
pub const CANONICAL_SETTINGS: [f64; 7] = [0.0, 2.5, 5.0, 6.3, 7.5, 8.8, 10.0];
pub const SEEN_SETTINGS: [f64; 3] = [5.0, 6.3, 7.5];
pub const INITIALLY_UNSEEN_SETTING: f64 = 10.0;
pub const UNSEEN_SETTING: f64 = 8.8;
pub const DEFAULT_SENSOR_DIM: usize = 38;
/// Corrected demonstrations per setting.
pub const DEMOS_PER_SETTING: usize = 15;
/// Runs averaged by [`evaluate_setting`].
pub const EVAL_RUNS: usize = 8;
/// Axis the board rolls about.
pub const ROLL_AXIS: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SettingRole {
    Default,
    Seen,
    InitiallyUnseen,
    Unseen,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSetting {
    pub roll_deg: f64,
    pub label: SettingRole,
}

impl EnvSetting {
    /// Setting with the role it plays in the canonical experiment. Angles
    /// outside the canonical set count as unseen.
    pub fn from_degrees(roll_deg: f64) -> Self {
        let label = if roll_deg == 0.0 {
            SettingRole::Default
        } else if SEEN_SETTINGS.contains(&roll_deg) {
            SettingRole::Seen
        } else if roll_deg == INITIALLY_UNSEEN_SETTING {
            SettingRole::InitiallyUnseen
        } else {
            SettingRole::Unseen
        };
        EnvSetting { roll_deg, label }
    }

    pub fn canonical() -> Vec<EnvSetting> {
        CANONICAL_SETTINGS.iter().map(|d| Self::from_degrees(*d)).collect()
    }

    pub fn roll_rad(&self) -> f64 {
        self.roll_deg.to_radians()
    }

    /// Directory-friendly name such as `6.3deg`.
    pub fn tag(&self) -> String {
        format!("{}deg", self.roll_deg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantConfig {
    pub seed: u64,
    /// Standard deviation of additive sensor noise.
    pub sensor_noise: f64,
    pub sensor_dim: usize,
    /// Squash each channel's response to the board roll with `tanh`.
    pub nonlinear: bool,
    /// Saturation level of the squashing.
    pub saturation: f64,
    /// Mean fraction of the needed correction applied in corrected
    /// demonstrations, and its spread across demonstrations.
    pub demo_gain: f64,
    pub demo_gain_spread: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            seed: 0,
            sensor_noise: 0.01,
            sensor_dim: DEFAULT_SENSOR_DIM,
            nonlinear: true,
            saturation: 0.075,
            demo_gain: 0.9,
            demo_gain_spread: 0.03,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sensor_noise >= 0.0) || self.sensor_dim == 0 {
            return Err(Error::validation("sensor noise must be >= 0 and sensor_dim > 0"));
        }
        if self.nonlinear && !(self.saturation > 0.0) {
            return Err(Error::validation("saturation must be positive"));
        }
        if !(self.demo_gain_spread >= 0.0) {
            return Err(Error::validation("demo gain spread must be >= 0"));
        }
        Ok(())
    }
}

/// Fixed parts of the simulation shared by all settings and primitives.
#[derive(Clone, Debug)]
pub struct Testbed {
    pub config: PlantConfig,
    /// `S × 3` sensor response to board rotation about each axis.
    pub mixing: DMatrix<f64>,
}

/// The deterministic part of a plant for one primitive at one setting.
#[derive(Clone, Debug)]
pub struct PlantTemplate {
    pub setting: EnvSetting,
    /// `Q_nr`: commanded orientation of the nominal run on the flat board.
    pub nominal_relative: Vec<UnitQuaternion>,
    /// Effective board rotation per step, as a rotation vector. Mostly
    /// roll; primitives that also reorient pick up small pitch and yaw
    /// components.
    pub tilt: Vec<Vec3>,
    /// Sensor readings of the nominal run on the flat board, `T × S`.
    pub nominal_sensors: DMatrix<f64>,
    /// Sensor shift caused by the board roll.
    pub offset: DVector<f64>,
    pub noise: f64,
    /// Coupling gain per radian of roll that cancels the tilt profile.
    pub oracle_gain: f64,
}

impl Testbed {
    pub fn new(config: PlantConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, "testbed/mixing");
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        let mixing = DMatrix::from_fn(config.sensor_dim, 3, |_, _| n.sample(&mut r));
        Ok(Testbed { config, mixing })
    }

    pub fn sensor_dim(&self) -> usize {
        self.config.sensor_dim
    }

    /// Sensor readings of a nominal execution of primitive `index` on the
    /// flat board. Primitive 0 approaches the board and only makes contact
    /// towards its end.
    pub fn nominal_sensors(&self, index: usize, steps: usize) -> DMatrix<f64> {
        let mut r = rng::stream(self.config.seed, &format!("testbed/sensors/{index}"));
        let s = self.config.sensor_dim;
        let level: Vec<f64> = (0..s).map(|_| r.random_range(0.5..1.5)).collect();
        let amp: Vec<f64> = (0..s).map(|_| r.random_range(0.1..0.4)).collect();
        let freq: Vec<f64> = (0..s).map(|_| r.random_range(0.3..1.5)).collect();
        let shift: Vec<f64> = (0..s)
            .map(|_| r.random_range(0.0..std::f64::consts::TAU))
            .collect();
        DMatrix::from_fn(steps, s, |i, j| {
            let x = i as f64 / (steps.max(2) - 1) as f64;
            let wave = level[j] + amp[j] * (std::f64::consts::TAU * freq[j] * x + shift[j]).sin();
            if index == 0 {
                let e = ((x - 0.6) / 0.4).clamp(0.0, 1.0);
                wave * e * e * (3.0 - 2.0 * e)
            } else {
                wave
            }
        })
    }

    /// Sensor shift for a board roll of `theta` radians.
    pub fn sensor_offset(&self, theta: f64) -> DVector<f64> {
        let lin = self.mixing.column(ROLL_AXIS) * theta;
        if self.config.nonlinear {
            let sat = self.config.saturation;
            lin.map(|v| sat * (v / sat).tanh())
        } else {
            lin
        }
    }

    pub fn template(&self, index: usize, nominal: &DmpParams, setting: EnvSetting) -> Result<PlantTemplate> {
        let steps = default_steps();
        let dt = nominal.dt();
        let nominal_run = nominal.open_loop(steps, dt, |_, _| Vec3::zeros())?;
        let deviation = |run: &Rollout| -> Vec<Vec3> {
            run.orientations
                .iter()
                .zip(&nominal_run.orientations)
                .map(|(q, n)| q.error_to(n))
                .collect()
        };
        let unit = nominal.open_loop(steps, dt, |_, s| roll_coupling(s.u))?;
        let peak = deviation(&unit)
            .iter()
            .map(|e| e[ROLL_AXIS])
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if !(peak.abs() > 1e-12) {
            return Err(Error::validation("primitive does not respond to roll coupling"));
        }
        let oracle_gain = 1.0 / peak;
        let theta = setting.roll_rad();
        let tilt = if theta == 0.0 {
            vec![Vec3::zeros(); steps]
        } else {
            let run = nominal.open_loop(steps, dt, |_, s| roll_coupling(theta * oracle_gain * s.u))?;
            deviation(&run)
        };
        Ok(PlantTemplate {
            setting,
            nominal_relative: nominal_run.orientations,
            tilt,
            nominal_sensors: self.nominal_sensors(index, steps),
            offset: self.sensor_offset(theta),
            noise: self.config.sensor_noise,
            oracle_gain,
        })
    }
}

fn roll_coupling(c: f64) -> Vec3 {
    let mut v = Vec3::zeros();
    v[ROLL_AXIS] = c;
    v
}

impl PlantTemplate {
    /// A plant with its own noise stream.
    pub fn instance(self: &Arc<Self>, seed: u64) -> PlantHandle {
        PlantHandle {
            template: Arc::clone(self),
            rng: rng::Rng::seed_from_u64(seed),
            noise: Normal::new(0.0, 1.0).expect("unit normal"),
        }
    }

    /// Board orientation at step `i`.
    pub fn board(&self, i: usize) -> UnitQuaternion {
        quat_exp(RotVec3(self.tilt[i.min(self.tilt.len() - 1)] * 0.5))
    }

    /// The corrective coupling a perfect demonstrator would apply.
    pub fn oracle(&self, gain_fraction: f64) -> OracleFeedback {
        OracleFeedback {
            gain: gain_fraction * self.setting.roll_rad() * self.oracle_gain,
        }
    }
}

impl PlantFactory for Arc<PlantTemplate> {
    fn plant(&self, seed: u64) -> Box<dyn Plant + Send> {
        Box::new(self.instance(seed))
    }
}

/// One simulated execution environment.
pub struct PlantHandle {
    template: Arc<PlantTemplate>,
    rng: rng::Rng,
    noise: Normal<f64>,
}

impl PlantHandle {
    pub fn template(&self) -> &PlantTemplate {
        &self.template
    }
}

impl Plant for PlantHandle {
    fn sensor_dim(&self) -> usize {
        self.template.offset.len()
    }

    fn observe(&mut self, step: usize, command: &UnitQuaternion) -> Result<Observation> {
        let t = &self.template;
        let i = step.min(t.tilt.len() - 1);
        let relative = t.board(i).conjugate() * *command;
        let cost = step_cost(&t.nominal_relative[i], &relative);
        let mut sensors = t.nominal_sensors.row(i).transpose() + &t.offset;
        if t.noise > 0.0 {
            for v in sensors.iter_mut() {
                *v += t.noise * self.noise.sample(&mut self.rng);
            }
        }
        Ok(Observation {
            sensors,
            relative,
            cost,
        })
    }
}

/// Roll coupling `gain * u`, ignoring the sensors.
#[derive(Clone, Copy, Debug)]
pub struct OracleFeedback {
    pub gain: f64,
}

impl FeedbackModel for OracleFeedback {
    fn coupling(&self, _: &DVector<f64>, phase: &CanonicalState) -> Vec3 {
        roll_coupling(self.gain * phase.u)
    }
}

/// Nominal executions on the flat board, for acquiring expected traces.
pub fn nominal_runs(testbed: &Testbed, index: usize, nominal: &DmpParams, n: usize, seed: u64) -> Result<Vec<Rollout>> {
    let template = Arc::new(testbed.template(index, nominal, EnvSetting::from_degrees(0.0))?);
    let blank = ExpectedSensorTraces::zeros(&nominal.bank, testbed.sensor_dim());
    (0..n)
        .map(|k| {
            let mut plant = template.instance(rng::sub_seed(seed, &format!("nominal/{index}/{k}")));
            unroll(nominal, Coupling::None, &blank, &mut plant, None)
        })
        .collect()
}

/// Corrected demonstrations: the nominal primitive executed with a
/// demonstrator's roll correction, a fraction of the ideal one that varies
/// from demonstration to demonstration.
pub fn generate_corrected_demos(
    template: &Arc<PlantTemplate>,
    nominal: &DmpParams,
    expected: &ExpectedSensorTraces,
    config: &PlantConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<Rollout>> {
    if template.setting.roll_deg == 0.0 {
        return Err(Error::validation("corrected demonstrations need a tilted board"));
    }
    let tag = template.setting.tag();
    let spread = Normal::new(config.demo_gain, config.demo_gain_spread)
        .map_err(|e| Error::validation(e.to_string()))?;
    (0..n)
        .map(|k| {
            let mut r = rng::stream(seed, &format!("demo-gain/{tag}/{k}"));
            let oracle = template.oracle(spread.sample(&mut r));
            let mut plant = template.instance(rng::sub_seed(seed, &format!("demo-noise/{tag}/{k}")));
            unroll(nominal, Coupling::Feedback(&oracle), expected, &mut plant, None)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean: f64,
    pub std: f64,
    pub norms: Vec<f64>,
}

impl EvalStats {
    pub fn from_norms(norms: Vec<f64>) -> Self {
        let n = norms.len().max(1) as f64;
        let mean = norms.iter().sum::<f64>() / n;
        let var = norms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        EvalStats {
            mean,
            std: var.sqrt(),
            norms,
        }
    }
}

/// Mean and standard deviation of ‖J‖₂ over `runs` executions with
/// independent sensor noise.
pub fn evaluate_setting(
    template: &Arc<PlantTemplate>,
    nominal: &DmpParams,
    expected: &ExpectedSensorTraces,
    fb: Option<&dyn FeedbackModel>,
    runs: usize,
    seed: u64,
) -> Result<EvalStats> {
    if runs == 0 {
        return Err(Error::validation("evaluation needs at least one run"));
    }
    let tag = template.setting.tag();
    let coupling = fb.map_or(Coupling::None, Coupling::Feedback);
    let norms = (0..runs)
        .map(|k| {
            let mut plant = template.instance(rng::sub_seed(seed, &format!("eval/{tag}/{k}")));
            Ok(unroll(nominal, coupling, expected, &mut plant, None)?.cost_norm())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EvalStats::from_norms(norms))
}

/// Uniform draw helper for the corpus generator.
pub(crate) fn uniform(r: &mut rng::Rng, lo: f64, hi: f64) -> f64 {
    Uniform::new_inclusive(lo, hi).expect("ordered bounds").sample(r)
}

#[cfg(test)]
mod tests;
