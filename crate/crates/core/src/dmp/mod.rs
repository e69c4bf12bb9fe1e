//! Quaternion DMPs: transformation system, goal evolution, fitting, coupling
//! extraction and closed-loop unrolling. A scalar DMP encodes the expected
//! sensor traces.

mod fit;
mod rollout;
mod scalar;
mod unroll;

pub use fit::{
    differentiate_orientation, extract_target_coupling, fit_forcing_term, fit_forcing_weights,
    mean_orientation,
};
pub use rollout::Rollout;
pub use scalar::{encode_sensor_traces, ExpectedSensorTraces, ScalarDmp};
pub use unroll::{unroll, unroll_sequence, Coupling, FeedbackModel, Observation, Plant, Stage};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::canonical::{step_unchecked, CanonicalState, KernelBank};
use crate::error::{Error, Result};
use crate::quat::{quat_exp, RotVec3, UnitQuaternion, Vec3};
use crate::serde_mat;

pub const ALPHA_OMEGA: f64 = 25.0;
pub const BETA_OMEGA: f64 = ALPHA_OMEGA / 4.0;
pub const ALPHA_GOAL: f64 = ALPHA_OMEGA / 2.0;

/// Unrolls run for `HORIZON_FACTOR * tau` seconds, which also fixes how a
/// recorded trajectory's duration maps back to its time constant.
pub const HORIZON_FACTOR: f64 = 1.1;
/// Integration steps per time constant (`dt = tau / STEPS_PER_TAU`).
pub const STEPS_PER_TAU: usize = 300;

/// Number of samples in a default-resolution unroll.
pub fn default_steps() -> usize {
    (HORIZON_FACTOR * STEPS_PER_TAU as f64).round() as usize + 1
}

/// Parameters of one orientation primitive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmpParams {
    /// `N × 3` forcing-term weights.
    #[serde(with = "serde_mat::row_major")]
    pub weights: DMatrix<f64>,
    pub tau: f64,
    pub start: UnitQuaternion,
    pub goal: UnitQuaternion,
    pub bank: KernelBank,
}

impl DmpParams {
    pub fn new(
        weights: DMatrix<f64>,
        tau: f64,
        start: UnitQuaternion,
        goal: UnitQuaternion,
        bank: KernelBank,
    ) -> Result<Self> {
        let params = DmpParams {
            weights,
            tau,
            start,
            goal,
            bank,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::validation(format!("tau must be positive, got {}", self.tau)));
        }
        if self.weights.nrows() != self.bank.len() || self.weights.ncols() != 3 {
            return Err(Error::shape(format!(
                "weights are {}x{}, expected {}x3",
                self.weights.nrows(),
                self.weights.ncols(),
                self.bank.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::validation("forcing weights must be finite"));
        }
        Ok(())
    }

    /// Same primitive with a different weight matrix.
    pub fn with_weights(&self, weights: DMatrix<f64>) -> Result<Self> {
        Self::new(weights, self.tau, self.start, self.goal, self.bank.clone())
    }

    pub fn dt(&self) -> f64 {
        self.tau / STEPS_PER_TAU as f64
    }

    pub fn initial_state(&self) -> DmpState {
        DmpState::at_rest(self.start, self.goal)
    }

    /// Integrates without a plant; `coupling(step, phase)` supplies `c`.
    pub fn open_loop(
        &self,
        steps: usize,
        dt: f64,
        mut coupling: impl FnMut(usize, &CanonicalState) -> Vec3,
    ) -> Result<Rollout> {
        self.open_loop_from(self.initial_state(), steps, dt, &mut coupling)
    }

    pub(crate) fn open_loop_from(
        &self,
        mut state: DmpState,
        steps: usize,
        dt: f64,
        coupling: &mut dyn FnMut(usize, &CanonicalState) -> Vec3,
    ) -> Result<Rollout> {
        if !(dt > 0.0) {
            return Err(Error::validation("dt must be positive"));
        }
        let mut out = Rollout::with_capacity(steps, 0);
        for i in 0..steps {
            let phase = state.canonical;
            let f = forcing_term(self, phase.p, phase.u);
            let c = coupling(i, &phase);
            let acc = acceleration(&state, self, &f, &c);
            out.times.push(i as f64 * dt);
            out.orientations.push(state.q);
            out.omega.push(state.omega);
            out.omegadot.push(acc);
            out.phase.push(phase);
            if i + 1 < steps {
                state = integrate(state, acc, self, dt);
            }
        }
        Ok(out)
    }
}

/// Full integration state of a quaternion DMP.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DmpState {
    pub q: UnitQuaternion,
    pub omega: Vec3,
    /// Angular acceleration applied during the most recent step.
    pub omegadot: Vec3,
    /// Evolving goal.
    pub goal: UnitQuaternion,
    pub canonical: CanonicalState,
}

impl DmpState {
    pub fn at_rest(q: UnitQuaternion, goal: UnitQuaternion) -> Self {
        DmpState {
            q,
            omega: Vec3::zeros(),
            omegadot: Vec3::zeros(),
            goal,
            canonical: CanonicalState::start(),
        }
    }
}

/// `f = theta^T psi(p) / sum(psi(p)) * u`.
pub fn forcing_term(params: &DmpParams, p: f64, u: f64) -> Vec3 {
    if u == 0.0 {
        return Vec3::zeros();
    }
    let phi = params.bank.phase_modulation(p, u);
    let f = params.weights.tr_mul(&phi);
    Vec3::new(f[0], f[1], f[2])
}

/// Angular acceleration from the transformation system:
/// `tau^2 dw = a (b 2 log(Qg ∘ Q*) - tau w) + f + c`.
pub fn acceleration(state: &DmpState, params: &DmpParams, f: &Vec3, c: &Vec3) -> Vec3 {
    let tau = params.tau;
    let err = state.goal.error_to(&state.q);
    (ALPHA_OMEGA * (BETA_OMEGA * err - tau * state.omega) + f + c) / (tau * tau)
}

fn integrate(state: DmpState, acc: Vec3, params: &DmpParams, dt: f64) -> DmpState {
    let tau = params.tau;
    let omega = state.omega + acc * dt;
    let q = (quat_exp(RotVec3(omega * (dt / 2.0))) * state.q)
        .renormalized()
        .canonical();
    let goal_velocity = ALPHA_GOAL * params.goal.error_to(&state.goal) / tau;
    let goal = (quat_exp(RotVec3(goal_velocity * (dt / 2.0))) * state.goal)
        .renormalized()
        .canonical();
    DmpState {
        q,
        omega,
        omegadot: acc,
        goal,
        canonical: step_unchecked(state.canonical, tau, dt),
    }
}

/// One Euler step of the transformation, goal-evolution and canonical
/// systems. The returned state's `omegadot` is the acceleration applied.
pub fn transformation_step(
    state: DmpState,
    params: &DmpParams,
    f: &Vec3,
    c: &Vec3,
    dt: f64,
) -> Result<DmpState> {
    if !(dt > 0.0) {
        return Err(Error::validation("dt must be positive"));
    }
    let acc = acceleration(&state, params, f, c);
    Ok(integrate(state, acc, params, dt))
}
