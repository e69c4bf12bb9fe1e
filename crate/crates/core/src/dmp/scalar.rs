use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::canonical::{step_unchecked, CanonicalState, KernelBank};
use crate::error::{Error, Result};
use crate::serde_mat;

use super::fit::ridge_solve;
use super::{Rollout, ALPHA_OMEGA, BETA_OMEGA};

/// One-dimensional goal-attractor DMP,
/// `tau^2 y'' = a (b (g - y) - tau y') + f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarDmp {
    #[serde(with = "serde_mat::vector")]
    pub weights: DVector<f64>,
    pub tau: f64,
    pub start: f64,
    pub goal: f64,
}

impl ScalarDmp {
    /// Position trajectory of `steps` samples spaced `dt` apart.
    pub fn unroll(&self, bank: &KernelBank, steps: usize, dt: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(steps);
        let (mut y, mut v) = (self.start, 0.0);
        let mut s = CanonicalState::start();
        for i in 0..steps {
            out.push(y);
            if i + 1 == steps {
                break;
            }
            let f = bank.phase_modulation(s.p, s.u).dot(&self.weights);
            let acc = (ALPHA_OMEGA * (BETA_OMEGA * (self.goal - y) - self.tau * v) + f)
                / (self.tau * self.tau);
            v += acc * dt;
            y += v * dt;
            s = step_unchecked(s, self.tau, dt);
        }
        out
    }
}

/// Response bases of the scalar DMP at a fixed timing: the unroll is
/// `y = start * (1 - h) + goal * h + R w`, where `h` is the zero-forcing
/// step response and column `i` of `R` the response to a unit weight `i`.
fn response_bases(bank: &KernelBank, tau: f64, dt: f64, steps: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = bank.len();
    let mut h = DVector::zeros(steps);
    let mut r = DMatrix::zeros(steps, n);
    let (mut yh, mut vh) = (0.0, 0.0);
    let mut yr = DVector::<f64>::zeros(n);
    let mut vr = DVector::<f64>::zeros(n);
    let mut s = CanonicalState::start();
    for i in 0..steps {
        h[i] = yh;
        r.row_mut(i).copy_from(&yr.transpose());
        if i + 1 == steps {
            break;
        }
        let phi = bank.phase_modulation(s.p, s.u);
        let ah = ALPHA_OMEGA * (BETA_OMEGA * (1.0 - yh) - tau * vh) / (tau * tau);
        vh += ah * dt;
        yh += vh * dt;
        for k in 0..n {
            let a = (ALPHA_OMEGA * (-BETA_OMEGA * yr[k] - tau * vr[k]) + phi[k]) / (tau * tau);
            vr[k] += a * dt;
            yr[k] += vr[k] * dt;
        }
        s = step_unchecked(s, tau, dt);
    }
    (h, r)
}

/// Expected sensor traces of one primitive: one scalar DMP per channel,
/// sharing the primitive's kernel bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectedSensorTraces {
    pub bank: KernelBank,
    pub channels: Vec<ScalarDmp>,
}

impl ExpectedSensorTraces {
    /// All-zero traces, for runs made before any traces were recorded.
    pub fn zeros(bank: &KernelBank, sensor_dim: usize) -> Self {
        let flat = ScalarDmp {
            weights: DVector::zeros(bank.len()),
            tau: 1.0,
            start: 0.0,
            goal: 0.0,
        };
        ExpectedSensorTraces {
            bank: bank.clone(),
            channels: vec![flat; sensor_dim],
        }
    }

    pub fn sensor_dim(&self) -> usize {
        self.channels.len()
    }

    /// `steps × S` matrix of expected values.
    pub fn unroll(&self, steps: usize, dt: f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(steps, self.channels.len());
        for (j, ch) in self.channels.iter().enumerate() {
            let y = ch.unroll(&self.bank, steps, dt);
            out.column_mut(j).copy_from_slice(&y);
        }
        out
    }
}

/// Fits one scalar DMP per sensor channel to the traces of the given
/// rollouts. Weights minimize the position-space squared error of the
/// unrolled DMP against every rollout, which avoids differentiating noisy
/// traces twice.
pub fn encode_sensor_traces(rollouts: &[Rollout], bank: &KernelBank) -> Result<ExpectedSensorTraces> {
    let first = rollouts
        .first()
        .ok_or_else(|| Error::Regression("no rollouts to encode".into()))?;
    let s_dim = first.sensor_dim();
    for r in rollouts {
        r.validate()?;
        if !r.has_sensors() || r.sensor_dim() != s_dim {
            return Err(Error::shape(format!(
                "rollout has {} sensor channels with {} rows, expected {s_dim}",
                r.sensor_dim(),
                r.sensors.nrows()
            )));
        }
    }
    let n = bank.len();
    let tau = rollouts.iter().map(Rollout::tau).sum::<f64>() / rollouts.len() as f64;
    let bases: Vec<(DVector<f64>, DMatrix<f64>)> = rollouts
        .iter()
        .map(|r| response_bases(bank, tau, r.dt(), r.len()))
        .collect();

    let mut channels = Vec::with_capacity(s_dim);
    for j in 0..s_dim {
        let start = rollouts.iter().map(|r| r.sensors[(0, j)]).sum::<f64>() / rollouts.len() as f64;
        let goal = rollouts
            .iter()
            .map(|r| r.sensors[(r.len() - 1, j)])
            .sum::<f64>()
            / rollouts.len() as f64;
        let mut gram = DMatrix::zeros(n, n);
        let mut rhs = DMatrix::zeros(n, 1);
        for (r, (h, basis)) in rollouts.iter().zip(&bases) {
            let resid = DVector::from_fn(r.len(), |i, _| {
                r.sensors[(i, j)] - start * (1.0 - h[i]) - goal * h[i]
            });
            gram += basis.tr_mul(basis);
            rhs.column_mut(0).gemv_tr(1.0, basis, &resid, 1.0);
        }
        let w = ridge_solve(gram, rhs)?;
        channels.push(ScalarDmp {
            weights: w.column(0).into_owned(),
            tau,
            start,
            goal,
        });
    }
    Ok(ExpectedSensorTraces {
        bank: bank.clone(),
        channels,
    })
}
