use nalgebra::DMatrix;

use crate::canonical::{phase_trajectory, CanonicalState};
use crate::error::{Error, Result};
use crate::quat::{UnitQuaternion, Vec3};

use super::HORIZON_FACTOR;

/// A time-indexed orientation trajectory, optionally with the sensor traces
/// and per-step costs observed while it was executed.
///
/// `sensors` is either empty (0 rows) or `T × S`; `costs` is either empty or
/// length `T`; `phase` is either empty or length `T`.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub times: Vec<f64>,
    pub orientations: Vec<UnitQuaternion>,
    pub omega: Vec<Vec3>,
    pub omegadot: Vec<Vec3>,
    pub sensors: DMatrix<f64>,
    pub costs: Vec<f64>,
    pub phase: Vec<CanonicalState>,
    /// False when execution was aborted; the trajectory is then a prefix.
    pub valid: bool,
}

impl Rollout {
    pub fn with_capacity(steps: usize, sensor_dim: usize) -> Self {
        Rollout {
            times: Vec::with_capacity(steps),
            orientations: Vec::with_capacity(steps),
            omega: Vec::with_capacity(steps),
            omegadot: Vec::with_capacity(steps),
            sensors: DMatrix::zeros(0, sensor_dim),
            costs: Vec::new(),
            phase: Vec::with_capacity(steps),
            valid: true,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn sensor_dim(&self) -> usize {
        self.sensors.ncols()
    }

    pub fn has_sensors(&self) -> bool {
        self.sensors.nrows() > 0
    }

    /// Duration between first and last sample, in seconds.
    pub fn duration(&self) -> f64 {
        match (self.times.first(), self.times.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    /// Mean sample spacing.
    pub fn dt(&self) -> f64 {
        self.duration() / (self.len().max(2) - 1) as f64
    }

    /// Movement time constant implied by the recorded horizon.
    pub fn tau(&self) -> f64 {
        self.duration() / HORIZON_FACTOR
    }

    /// ‖J‖₂ of the per-step cost vector.
    pub fn cost_norm(&self) -> f64 {
        self.costs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if t < 2 {
            return Err(Error::validation(format!("rollout has {t} samples, need at least 2")));
        }
        if self.orientations.len() != t || self.omega.len() != t || self.omegadot.len() != t {
            return Err(Error::shape(format!(
                "rollout trajectories differ in length (t={t}, Q={}, w={}, wd={})",
                self.orientations.len(),
                self.omega.len(),
                self.omegadot.len()
            )));
        }
        if self.has_sensors() && self.sensors.nrows() != t {
            return Err(Error::shape(format!(
                "sensor trace has {} rows for {t} samples",
                self.sensors.nrows()
            )));
        }
        if !self.costs.is_empty() && self.costs.len() != t {
            return Err(Error::shape(format!("{} costs for {t} samples", self.costs.len())));
        }
        if !self.phase.is_empty() && self.phase.len() != t {
            return Err(Error::shape(format!("{} phase samples for {t} samples", self.phase.len())));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::validation("rollout times must be strictly increasing"));
        }
        Ok(())
    }

    /// Phase trajectory recorded during execution, or reconstructed from the
    /// horizon when the rollout was loaded from disk.
    pub fn phase_or_reconstruct(&self) -> Result<Vec<CanonicalState>> {
        if !self.phase.is_empty() {
            if self.phase.len() != self.len() {
                return Err(Error::shape(format!(
                    "{} phase samples for {} trajectory samples",
                    self.phase.len(),
                    self.len()
                )));
            }
            return Ok(self.phase.clone());
        }
        phase_trajectory(self.tau(), self.dt(), self.len())
    }

    /// Sub-trajectory `[start, end)`, re-timed to start at zero.
    pub fn slice(&self, start: usize, end: usize) -> Result<Rollout> {
        if start >= end || end > self.len() {
            return Err(Error::validation(format!(
                "slice [{start}, {end}) out of range for {} samples",
                self.len()
            )));
        }
        let t0 = self.times[start];
        Ok(Rollout {
            times: self.times[start..end].iter().map(|t| t - t0).collect(),
            orientations: self.orientations[start..end].to_vec(),
            omega: self.omega[start..end].to_vec(),
            omegadot: self.omegadot[start..end].to_vec(),
            sensors: if self.has_sensors() {
                self.sensors.rows(start, end - start).into_owned()
            } else {
                DMatrix::zeros(0, self.sensor_dim())
            },
            costs: if self.costs.is_empty() {
                Vec::new()
            } else {
                self.costs[start..end].to_vec()
            },
            phase: Vec::new(),
            valid: self.valid,
        })
    }
}
