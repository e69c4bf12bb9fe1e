use nalgebra::{DMatrix, DVector};

use crate::canonical::CanonicalState;
use crate::error::{Error, Result};
use crate::quat::{UnitQuaternion, Vec3};

use super::{
    acceleration, default_steps, forcing_term, integrate, DmpParams, DmpState,
    ExpectedSensorTraces, Rollout,
};

/// What the environment reports for one commanded orientation.
#[derive(Clone, Debug)]
pub struct Observation {
    pub sensors: DVector<f64>,
    /// Tool orientation relative to the environment.
    pub relative: UnitQuaternion,
    /// Per-step cost `J_t`.
    pub cost: f64,
}

/// A system the primitive is executed against.
pub trait Plant {
    fn sensor_dim(&self) -> usize;
    fn observe(&mut self, step: usize, command: &UnitQuaternion) -> Result<Observation>;
}

/// Maps sensor deviations and phase to a coupling term.
pub trait FeedbackModel: Sync {
    fn coupling(&self, deviation: &DVector<f64>, phase: &CanonicalState) -> Vec3;
}

#[derive(Clone, Copy)]
pub enum Coupling<'a> {
    None,
    Feedback(&'a dyn FeedbackModel),
}

/// Closed-loop execution of one primitive at its default resolution.
///
/// `weights` replaces the nominal forcing weights (a low-dimensional policy
/// sample); it cannot be combined with a feedback model. A plant failure
/// ends the rollout early with `valid = false`.
pub fn unroll(
    nominal: &DmpParams,
    coupling: Coupling<'_>,
    expected: &ExpectedSensorTraces,
    plant: &mut dyn Plant,
    weights: Option<&DMatrix<f64>>,
) -> Result<Rollout> {
    let params = match weights {
        Some(w) => {
            if matches!(coupling, Coupling::Feedback(_)) {
                return Err(Error::validation(
                    "a weight override cannot be combined with a feedback model",
                ));
            }
            nominal.with_weights(w.clone())?
        }
        None => nominal.clone(),
    };
    unroll_from(&params, params.initial_state(), coupling, expected, plant)
}

fn unroll_from(
    params: &DmpParams,
    mut state: DmpState,
    coupling: Coupling<'_>,
    expected: &ExpectedSensorTraces,
    plant: &mut dyn Plant,
) -> Result<Rollout> {
    let s_dim = plant.sensor_dim();
    if expected.sensor_dim() != s_dim {
        return Err(Error::shape(format!(
            "expected traces have {} channels, plant has {s_dim}",
            expected.sensor_dim()
        )));
    }
    let steps = default_steps();
    let dt = params.dt();
    let s_expected = expected.unroll(steps, dt);
    let mut out = Rollout::with_capacity(steps, s_dim);
    let mut sensors: Vec<f64> = Vec::with_capacity(steps * s_dim);
    for i in 0..steps {
        let obs = match plant.observe(i, &state.q) {
            Ok(o) => o,
            Err(e) => {
                log::warn!("plant failed at step {i}: {e}; rollout truncated");
                out.valid = false;
                break;
            }
        };
        if obs.sensors.len() != s_dim {
            return Err(Error::shape(format!(
                "plant returned {} sensor values, expected {s_dim}",
                obs.sensors.len()
            )));
        }
        let phase = state.canonical;
        let c = match coupling {
            Coupling::None => Vec3::zeros(),
            Coupling::Feedback(model) => {
                let ds = &obs.sensors - s_expected.row(i).transpose();
                model.coupling(&ds, &phase)
            }
        };
        let f = forcing_term(params, phase.p, phase.u);
        let acc = acceleration(&state, params, &f, &c);
        out.times.push(i as f64 * dt);
        out.orientations.push(state.q);
        out.omega.push(state.omega);
        out.omegadot.push(acc);
        out.phase.push(phase);
        out.costs.push(obs.cost);
        sensors.extend(obs.sensors.iter());
        if i + 1 < steps {
            state = integrate(state, acc, params, dt);
        }
    }
    let rows = out.times.len();
    out.sensors = DMatrix::from_row_slice(rows, s_dim, &sensors);
    Ok(out)
}

/// One primitive of a chained execution.
pub struct Stage<'a> {
    pub params: &'a DmpParams,
    pub expected: &'a ExpectedSensorTraces,
    pub coupling: Coupling<'a>,
}

/// Executes primitives back to back. Each primitive after the first starts
/// from the orientation and angular velocity at the end of its predecessor.
pub fn unroll_sequence(stages: &[Stage<'_>], plants: &mut [&mut dyn Plant]) -> Result<Vec<Rollout>> {
    if stages.len() != plants.len() {
        return Err(Error::shape(format!(
            "{} stages but {} plants",
            stages.len(),
            plants.len()
        )));
    }
    let mut out: Vec<Rollout> = Vec::with_capacity(stages.len());
    for (stage, plant) in stages.iter().zip(plants.iter_mut()) {
        let mut state = stage.params.initial_state();
        if let Some(prev) = out.last() {
            if !prev.valid {
                break;
            }
            state.q = *prev.orientations.last().expect("valid rollouts are non-empty");
            state.omega = *prev.omega.last().expect("valid rollouts are non-empty");
        }
        let r = unroll_from(stage.params, state, stage.coupling, stage.expected, &mut **plant)?;
        out.push(r);
    }
    Ok(out)
}
