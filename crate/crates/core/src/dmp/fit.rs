use nalgebra::DMatrix;

use crate::canonical::{CanonicalState, KernelBank};
use crate::error::{Error, Result};
use crate::quat::{UnitQuaternion, Vec3};

use super::{forcing_term, DmpParams, Rollout, ALPHA_OMEGA, BETA_OMEGA};

/// Relative Tikhonov ridge on the regression Gram matrix.
pub(crate) const RIDGE: f64 = 1e-8;

/// Sign-aligned normalized mean of a set of nearby orientations.
pub fn mean_orientation(qs: &[UnitQuaternion]) -> Result<UnitQuaternion> {
    let first = qs
        .first()
        .ok_or_else(|| Error::validation("mean of an empty orientation set"))?;
    let mut r = 0.0;
    let mut q = Vec3::zeros();
    for a in qs {
        let dot = a.r() * first.r() + a.q().dot(first.q());
        let s = if dot < 0.0 { -1.0 } else { 1.0 };
        r += s * a.r();
        q += s * a.q();
    }
    Ok(UnitQuaternion::normalize(r, q)?.canonical())
}

/// Angular velocity and acceleration from sampled orientations.
///
/// `w_t = 2 log(Q_{t+1} ∘ Q_t*) / dt` (the last sample repeats its
/// predecessor), and `dw` is the central difference of `w` smoothed by a
/// centered 5-sample moving average.
pub fn differentiate_orientation(
    times: &[f64],
    orientations: &[UnitQuaternion],
) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let t = times.len();
    if t < 2 || orientations.len() != t {
        return Err(Error::shape(format!(
            "differentiation needs matching series of length >= 2 (times={t}, Q={})",
            orientations.len()
        )));
    }
    let mut omega = Vec::with_capacity(t);
    for i in 0..t - 1 {
        let dt = times[i + 1] - times[i];
        if !(dt > 0.0) {
            return Err(Error::validation(format!("non-increasing time at sample {i}")));
        }
        omega.push(orientations[i + 1].error_to(&orientations[i]) / dt);
    }
    omega.push(omega[t - 2]);

    let mut raw = Vec::with_capacity(t);
    for i in 0..t {
        let (a, b) = (i.saturating_sub(1), (i + 1).min(t - 1));
        raw.push((omega[b] - omega[a]) / (times[b] - times[a]));
    }
    let mut omegadot = Vec::with_capacity(t);
    for i in 0..t {
        let (a, b) = (i.saturating_sub(2), (i + 2).min(t - 1));
        let sum: Vec3 = raw[a..=b].iter().sum();
        omegadot.push(sum / (b - a + 1) as f64);
    }
    Ok((omega, omegadot))
}

/// Forcing-term target of one demonstration with goal `goal` and time
/// constant `tau`: `tau^2 dw - a (b 2 log(g ∘ Q*) - tau w)`.
fn forcing_targets(demo: &Rollout, goal: &UnitQuaternion, tau: f64) -> Vec<Vec3> {
    (0..demo.len())
        .map(|i| {
            let err = goal.error_to(&demo.orientations[i]);
            tau * tau * demo.omegadot[i] - ALPHA_OMEGA * (BETA_OMEGA * err - tau * demo.omega[i])
        })
        .collect()
}

/// Solves `min ‖X W - Y‖² + ridge ‖W‖²` through a Cholesky factorization of
/// the Gram matrix. The ridge is relative to the mean Gram diagonal.
pub(crate) fn ridge_solve(gram: DMatrix<f64>, rhs: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = gram.nrows();
    let scale = gram.trace() / n as f64;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Regression(
            "feature matrix has no excitation (all features zero or non-finite)".into(),
        ));
    }
    let mut g = gram;
    for i in 0..n {
        g[(i, i)] += RIDGE * scale;
    }
    let chol = g.cholesky().ok_or_else(|| {
        Error::Regression("regularized Gram matrix is not positive definite".into())
    })?;
    Ok(chol.solve(&rhs))
}

/// Least-squares forcing weights for demonstrations with given goals and
/// time constants. Features are `psi(p) / sum(psi) * u` at each sample.
pub fn fit_forcing_weights(
    demos: &[Rollout],
    goals: &[UnitQuaternion],
    taus: &[f64],
    bank: &KernelBank,
) -> Result<DMatrix<f64>> {
    if demos.len() != goals.len() || demos.len() != taus.len() {
        return Err(Error::shape("one goal and one tau per demonstration"));
    }
    let samples: usize = demos.iter().map(Rollout::len).sum();
    if samples < 2 {
        return Err(Error::Regression(format!(
            "need at least 2 samples to fit a forcing term, got {samples}"
        )));
    }
    let n = bank.len();
    let mut gram = DMatrix::zeros(n, n);
    let mut rhs = DMatrix::zeros(n, 3);
    for ((demo, goal), &tau) in demos.iter().zip(goals).zip(taus) {
        demo.validate()?;
        let phase = demo_phase(demo, tau)?;
        let targets = forcing_targets(demo, goal, tau);
        for (s, f) in phase.iter().zip(&targets) {
            let phi = bank.phase_modulation(s.p, s.u);
            gram.ger(1.0, &phi, &phi, 1.0);
            for d in 0..3 {
                rhs.column_mut(d).axpy(f[d], &phi, 1.0);
            }
        }
    }
    ridge_solve(gram, rhs)
}

/// Phase of a demonstration. A recorded phase is used when its implied time
/// constant matches `tau`; otherwise the canonical system is re-integrated.
fn demo_phase(demo: &Rollout, tau: f64) -> Result<Vec<CanonicalState>> {
    if !demo.phase.is_empty() && (demo.tau() - tau).abs() <= 1e-9 * tau {
        return demo.phase_or_reconstruct();
    }
    crate::canonical::phase_trajectory(tau, demo.dt(), demo.len())
}

/// Fits a primitive to segmented demonstrations. Each demo uses its own
/// duration and final orientation as goal when computing targets; the
/// primitive's start, goal and tau are the demo means.
pub fn fit_forcing_term(demos: &[Rollout], bank: &KernelBank) -> Result<DmpParams> {
    if demos.is_empty() {
        return Err(Error::Regression("no demonstrations to fit".into()));
    }
    let goals: Vec<UnitQuaternion> = demos
        .iter()
        .map(|d| d.orientations.last().copied().unwrap_or_default())
        .collect();
    let starts: Vec<UnitQuaternion> = demos
        .iter()
        .map(|d| d.orientations.first().copied().unwrap_or_default())
        .collect();
    let taus: Vec<f64> = demos.iter().map(Rollout::tau).collect();
    let weights = fit_forcing_weights(demos, &goals, &taus, bank)?;
    let tau = taus.iter().sum::<f64>() / taus.len() as f64;
    DmpParams::new(
        weights,
        tau,
        mean_orientation(&starts)?,
        mean_orientation(&goals)?,
        bank.clone(),
    )
}

/// Target coupling `c = tau^2 dw - a (b 2 log(Qg ∘ Q*) - tau w) - f` of a
/// corrected demonstration against a previously fitted nominal primitive,
/// using the demo's own duration and phase. Rows are samples.
pub fn extract_target_coupling(demo: &Rollout, nominal: &DmpParams) -> Result<DMatrix<f64>> {
    demo.validate()?;
    let tau = demo.tau();
    let phase = demo_phase(demo, tau)?;
    if phase.len() != demo.len() {
        return Err(Error::validation(format!(
            "phase has {} samples, demo has {}",
            phase.len(),
            demo.len()
        )));
    }
    let targets = forcing_targets(demo, &nominal.goal, tau);
    let mut out = DMatrix::zeros(demo.len(), 3);
    for (i, (s, ft)) in phase.iter().zip(&targets).enumerate() {
        let c = ft - forcing_term(nominal, s.p, s.u);
        out.row_mut(i).copy_from(&c.transpose());
    }
    Ok(out)
}
