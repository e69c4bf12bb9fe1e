//! Synthetic scraping demonstrations: descend onto the board, reorient the
//! tool, scrape forward. Each demo has its own speed, pauses and noise.

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dmp::{differentiate_orientation, Rollout};
use crate::error::{Error, Result};
use crate::quat::{UnitQuaternion, Vec3};
use crate::rng;

use super::uniform;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub demos: usize,
    /// Sampling rate, Hz.
    pub rate: f64,
    /// Range of the per-demo time scale.
    pub time_scale: (f64, f64),
    /// Range of the pauses between and around motions, seconds.
    pub pause: (f64, f64),
    /// Position noise as a fraction of each axis' signal std.
    pub noise: f64,
    /// Descent of the first motion, metres.
    pub descent: (f64, f64),
    /// Pitch of the reorientation, radians.
    pub pitch: f64,
    /// Length and yaw of the scraping stroke.
    pub stroke: f64,
    pub yaw: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            demos: 11,
            rate: 300.0,
            time_scale: (0.85, 1.2),
            pause: (0.3, 0.5),
            noise: 0.01,
            descent: (0.30, 0.10),
            pitch: 0.5,
            stroke: 0.25,
            yaw: 0.1,
        }
    }
}

/// Position signal axes of a demo.
pub const AXIS_X: usize = 0;
pub const AXIS_Y: usize = 1;
pub const AXIS_Z: usize = 2;

/// One demonstration of the whole skill.
#[derive(Clone, Debug)]
pub struct CorpusDemo {
    pub rollout: Rollout,
    /// `T × 3` tool positions.
    pub positions: DMatrix<f64>,
    /// Sample ranges `[start, end]` of the three scripted motions.
    pub motions: [(usize, usize); 3],
}

fn min_jerk(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (10.0 - 15.0 * x + 6.0 * x * x)
}

/// Progress of a motion spanning `[start, end)` seconds at time `t`.
fn progress(t: f64, span: (f64, f64)) -> f64 {
    min_jerk((t - span.0) / (span.1 - span.0))
}

pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Vec<CorpusDemo>> {
    if !(config.rate > 0.0) || !(config.time_scale.0 > 0.0) || config.time_scale.1 < config.time_scale.0 {
        return Err(Error::validation("corpus rate and time scales must be positive"));
    }
    if config.pause.0 < 0.0 || config.pause.1 < config.pause.0 || !(config.noise >= 0.0) {
        return Err(Error::validation("bad corpus pause or noise range"));
    }
    (0..config.demos).map(|l| generate_demo(config, seed, l)).collect()
}

fn generate_demo(config: &CorpusConfig, seed: u64, l: usize) -> Result<CorpusDemo> {
    let mut r = rng::stream(seed, &format!("corpus/{l}"));
    let scale = uniform(&mut r, config.time_scale.0, config.time_scale.1);
    let mut pause = || uniform(&mut r, config.pause.0, config.pause.1);
    let durations = [1.0 * scale, 1.0 * scale, 1.2 * scale];
    let mut clock = pause();
    let mut spans = [(0.0, 0.0); 3];
    for (k, d) in durations.iter().enumerate() {
        spans[k] = (clock, clock + d);
        clock += d + pause();
    }
    let steps = (clock * config.rate).round() as usize + 1;
    let times: Vec<f64> = (0..steps).map(|i| i as f64 / config.rate).collect();

    let start = UnitQuaternion::identity();
    let mut positions = DMatrix::zeros(steps, 3);
    let mut orientations = Vec::with_capacity(steps);
    for (i, t) in times.iter().enumerate() {
        let (p1, p2, p3) = (progress(*t, spans[0]), progress(*t, spans[1]), progress(*t, spans[2]));
        positions[(i, AXIS_X)] = 0.0;
        positions[(i, AXIS_Y)] = config.stroke * p3;
        positions[(i, AXIS_Z)] = config.descent.0 + (config.descent.1 - config.descent.0) * p1;
        let pitch = UnitQuaternion::from_axis_angle(&Vec3::y(), config.pitch * p2);
        let yaw = UnitQuaternion::from_axis_angle(&Vec3::z(), config.yaw * p3);
        orientations.push(yaw * pitch * start);
    }
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    for axis in 0..3 {
        let col = positions.column(axis);
        let mean = col.mean();
        let std = (col.map(|v| (v - mean) * (v - mean)).sum() / steps as f64).sqrt();
        if std > 0.0 {
            for i in 0..steps {
                positions[(i, axis)] += config.noise * std * noise.sample(&mut r);
            }
        }
    }
    let (omega, omegadot) = differentiate_orientation(&times, &orientations)?;
    let mut rollout = Rollout::with_capacity(steps, 0);
    rollout.times = times;
    rollout.orientations = orientations;
    rollout.omega = omega;
    rollout.omegadot = omegadot;
    let index = |t: f64| ((t * config.rate).round() as usize).min(steps - 1);
    let motions = spans.map(|(a, b)| (index(a), index(b)));
    Ok(CorpusDemo {
        rollout,
        positions,
        motions,
    })
}
