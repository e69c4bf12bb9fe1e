//! Second-order canonical system and the phase kernel bank shared by the
//! DMPs and the feedback networks.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ALPHA_U: f64 = 25.0;
pub const BETA_U: f64 = ALPHA_U / 4.0;

/// Default number of phase kernels.
pub const DEFAULT_KERNELS: usize = 25;

/// Kernel centers are placed at equal times over `[0, CENTER_SPAN * tau]`.
const CENTER_SPAN: f64 = 1.5;
/// Kernel standard deviation as a fraction of the gap to the next center.
const WIDTH_FRACTION: f64 = 0.55;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalState {
    /// Phase, starts at 1 and decays to 0.
    pub p: f64,
    /// Phase velocity (scaled by tau), starts at 0 and returns to 0.
    pub u: f64,
    /// `tau * du/dt` from the most recent step.
    pub du: f64,
}

impl CanonicalState {
    pub fn start() -> Self {
        CanonicalState {
            p: 1.0,
            u: 0.0,
            du: 0.0,
        }
    }
}

impl Default for CanonicalState {
    fn default() -> Self {
        Self::start()
    }
}

/// One explicit Euler step of `tau u' = a_u (b_u (0 - p) - u)`, `tau p' = u`.
pub fn canonical_step(s: CanonicalState, tau: f64, dt: f64) -> Result<CanonicalState> {
    if !(tau > 0.0) || !(dt > 0.0) {
        return Err(Error::validation(format!(
            "canonical step needs tau > 0 and dt > 0 (tau={tau}, dt={dt})"
        )));
    }
    Ok(step_unchecked(s, tau, dt))
}

#[inline]
pub(crate) fn step_unchecked(s: CanonicalState, tau: f64, dt: f64) -> CanonicalState {
    let du = ALPHA_U * (BETA_U * (0.0 - s.p) - s.u);
    CanonicalState {
        p: s.p + s.u / tau * dt,
        u: s.u + du / tau * dt,
        du,
    }
}

/// Phase `(p, u)` at each of `steps` samples spaced `dt` apart, starting at
/// the initial state.
pub fn phase_trajectory(tau: f64, dt: f64, steps: usize) -> Result<Vec<CanonicalState>> {
    if !(tau > 0.0) || !(dt > 0.0) {
        return Err(Error::validation(format!(
            "phase trajectory needs tau > 0 and dt > 0 (tau={tau}, dt={dt})"
        )));
    }
    let mut out = Vec::with_capacity(steps);
    let mut s = CanonicalState::start();
    for i in 0..steps {
        out.push(s);
        if i + 1 < steps {
            s = step_unchecked(s, tau, dt);
        }
    }
    Ok(out)
}

/// Gaussian basis functions over the phase variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
}

impl KernelBank {
    /// Centers equally spaced in time along one run of the canonical system.
    pub fn equal_time(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::validation("kernel bank needs at least 2 kernels"));
        }
        let substeps = 400;
        let gap = CENTER_SPAN / (n - 1) as f64;
        let dt = gap / substeps as f64;
        let mut centers = Vec::with_capacity(n);
        let mut s = CanonicalState::start();
        centers.push(s.p);
        for _ in 1..n {
            for _ in 0..substeps {
                s = step_unchecked(s, 1.0, dt);
            }
            centers.push(s.p);
        }
        let mut widths = Vec::with_capacity(n);
        for i in 0..n - 1 {
            let sigma = WIDTH_FRACTION * (centers[i] - centers[i + 1]);
            widths.push(1.0 / (2.0 * sigma * sigma));
        }
        widths.push(widths[n - 2]);
        Self::new(centers, widths)
    }

    pub fn new(centers: Vec<f64>, widths: Vec<f64>) -> Result<Self> {
        if centers.len() != widths.len() || centers.is_empty() {
            return Err(Error::shape(format!(
                "kernel bank with {} centers and {} widths",
                centers.len(),
                widths.len()
            )));
        }
        if widths.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::validation("kernel widths must be positive and finite"));
        }
        Ok(KernelBank { centers, widths })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Raw kernel activations `psi_i(p) = exp(-chi_i (p - mu_i)^2)`.
    pub fn kernels(&self, p: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.centers
                .iter()
                .zip(&self.widths)
                .map(|(mu, chi)| (-chi * (p - mu) * (p - mu)).exp()),
        )
    }

    /// `psi_i(p) / sum_j psi_j(p)`, computed in log space so that far-out
    /// phases (where every kernel underflows) still normalize to one.
    pub fn normalized(&self, p: f64) -> DVector<f64> {
        let logits: Vec<f64> = self
            .centers
            .iter()
            .zip(&self.widths)
            .map(|(mu, chi)| -chi * (p - mu) * (p - mu))
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut v = DVector::from_iterator(logits.len(), logits.iter().map(|l| (l - max).exp()));
        let sum = v.sum();
        v /= sum;
        v
    }

    /// Phase modulation vector `Phi_i = psi_i(p) / sum_j psi_j(p) * u`.
    pub fn phase_modulation(&self, p: f64, u: f64) -> DVector<f64> {
        self.normalized(p) * u
    }
}

pub fn kernels(bank: &KernelBank, p: f64) -> DVector<f64> {
    bank.kernels(p)
}

pub fn phase_modulation(bank: &KernelBank, p: f64, u: f64) -> DVector<f64> {
    bank.phase_modulation(p, u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_time_constants() {
        let s = CanonicalState::start();
        assert!(canonical_step(s, 0.0, 0.01).is_err());
        assert!(canonical_step(s, 1.0, -0.01).is_err());
        assert!(canonical_step(s, f64::NAN, 0.01).is_err());
    }

    #[test]
    fn phase_stays_in_unit_interval_and_converges() {
        for tau in [0.3, 1.0, 2.5] {
            let dt = tau / 1000.0;
            let traj = phase_trajectory(tau, dt, 2001).unwrap();
            assert_eq!(traj[0].u, 0.0);
            assert_eq!(traj[0].p, 1.0);
            for w in traj.windows(2) {
                assert!(w[1].p <= w[0].p + 1e-15, "p increased");
                assert!((0.0..=1.0).contains(&w[1].p));
            }
            let last = traj.last().unwrap();
            assert!(last.p < 0.01 && last.u.abs() < 0.01, "{last:?}");
        }
    }

    #[test]
    fn matches_closed_form_critically_damped_solution() {
        // p(t) = (1 + w t) exp(-w t) with w = sqrt(a_u b_u) / tau.
        let tau = 1.0;
        let dt = 1e-5;
        let traj = phase_trajectory(tau, dt, 100_001).unwrap();
        let w = (ALPHA_U * BETA_U).sqrt() / tau;
        for &i in &[1000usize, 10_000, 50_000, 100_000] {
            let t = i as f64 * dt;
            let exact = (1.0 + w * t) * (-w * t).exp();
            assert!((traj[i].p - exact).abs() < 1e-4, "t={t}");
        }
    }

    #[test]
    fn default_bank_shape() {
        let bank = KernelBank::equal_time(DEFAULT_KERNELS).unwrap();
        assert_eq!(bank.len(), 25);
        assert!((bank.centers[0] - 1.0).abs() < 1e-12);
        for w in bank.centers.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(*bank.centers.last().unwrap() < 1e-5);
        assert!(bank.widths.iter().all(|w| *w > 0.0));
    }

    #[test]
    fn kernel_peaks_and_tails() {
        let bank = KernelBank::equal_time(DEFAULT_KERNELS).unwrap();
        for k in [0, 5, 12] {
            let psi = bank.kernels(bank.centers[k]);
            assert!((psi[k] - 1.0).abs() < 1e-15);
        }
        for p in [1e6, -1e6] {
            assert!(bank.kernels(p).iter().all(|v| *v == 0.0));
            let n = bank.normalized(p);
            assert!((n.sum() - 1.0).abs() < 1e-12);
        }
        // Element-wise oracle at p = 1.
        let psi = bank.kernels(1.0);
        for i in 0..bank.len() {
            let d = 1.0 - bank.centers[i];
            assert_eq!(psi[i], (-bank.widths[i] * d * d).exp());
        }
    }

    #[test]
    fn modulation_matches_direct_formula() {
        let bank = KernelBank::equal_time(DEFAULT_KERNELS).unwrap();
        let (p, u) = (0.5, 0.3);
        let phi = bank.phase_modulation(p, u);
        let psi = bank.kernels(p);
        let sum: f64 = psi.iter().sum();
        for i in 0..bank.len() {
            assert!((phi[i] - psi[i] / sum * u).abs() < 1e-15);
        }
        assert!(bank.phase_modulation(0.7, 0.0).iter().all(|v| *v == 0.0));
    }

    proptest! {
        #[test]
        fn modulation_sums_to_phase_velocity(p in -0.5f64..1.5, u in -10.0f64..10.0) {
            let bank = KernelBank::equal_time(DEFAULT_KERNELS).unwrap();
            let phi = bank.phase_modulation(p, u);
            prop_assert!((phi.sum() - u).abs() < 1e-12);
        }

        #[test]
        fn no_undershoot_beyond_one_step(tau in 0.1f64..5.0, frac in 100usize..2000) {
            let dt = tau / frac as f64;
            let traj = phase_trajectory(tau, dt, 3 * frac).unwrap();
            let max_step = traj.windows(2).map(|w| (w[1].p - w[0].p).abs()).fold(0.0, f64::max);
            prop_assert!(traj.iter().all(|s| s.p >= -max_step));
        }
    }
}
