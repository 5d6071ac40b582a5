//! The change of variables `u_tau = e^tau phi_{1 - e^{-tau}}`.
//!
//! It turns the flow into `du/dtau = u - tau + log[(omega'' + (e^tau - 1)(omega'' + chi'') + u'') / omega'']`,
//! whose residual is evaluated with three-point differences in `tau`.

use std::sync::Arc;

use serde::Serialize;

use super::{FlowState, FlowTrajectory};
use crate::error::{Error, Result};
use crate::geometry::ClassPath;

/// Rescaled states together with the residual of the transformed equation.
#[derive(Debug, Clone, Serialize)]
pub struct RescaledTrajectory {
    /// States indexed by `tau`.
    pub states: Vec<FlowState>,
    /// Sup-norm residual at each state with two neighbours, else `None`.
    pub residuals: Vec<Option<f64>>,
    #[serde(skip)]
    pub path: Arc<ClassPath>,
}

impl RescaledTrajectory {
    pub fn taus(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.t).collect()
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().flatten().fold(0.0, |a, &b| a.max(b))
    }

    /// Right-hand side of the transformed equation at state `k`.
    pub fn rhs(&self, k: usize) -> Result<Vec<f64>> {
        let state = &self.states[k];
        let tau = state.t;
        let sigma = -(-tau).exp_m1();
        let scale = tau.exp();
        let theta = self.path.theta_density(sigma);
        let omega = self.path.omega_density();
        let d2 = state.u.d2();
        theta
            .iter()
            .zip(&d2)
            .zip(omega)
            .zip(state.u.values())
            .enumerate()
            .map(|(i, (((th, d), om), u))| {
                let m = scale * th + d;
                if m > 0.0 {
                    Ok(u - tau + (m / om).ln())
                } else {
                    Err(Error::DegenerateMetric { index: i, value: m })
                }
            })
            .collect()
    }
}

/// Rescales `traj` at the flow times `1 - e^{-tau}` for each `tau` in `taus`,
/// which must all be output times of `traj`.
pub fn time_rescale(traj: &FlowTrajectory, taus: &[f64]) -> Result<RescaledTrajectory> {
    let available = traj.last().t;
    let mut states = Vec::with_capacity(taus.len());
    let mut prev = f64::NEG_INFINITY;
    for &tau in taus {
        if !(tau >= 0.0) || !(tau > prev) {
            return Err(Error::InvalidParameter("taus must be non-negative and increasing".into()));
        }
        prev = tau;
        let sigma = -(-tau).exp_m1();
        let state = traj
            .at(sigma)
            .ok_or(Error::InsufficientCoverage { required: sigma, available })?;
        states.push(FlowState::new(tau, state.u.scaled(tau.exp())));
    }
    let mut rescaled = RescaledTrajectory {
        residuals: vec![None; states.len()],
        states,
        path: Arc::clone(&traj.path),
    };
    for k in 1..rescaled.states.len().saturating_sub(1) {
        let (t0, t1, t2) = (rescaled.states[k - 1].t, rescaled.states[k].t, rescaled.states[k + 1].t);
        let (h0, h1) = (t1 - t0, t2 - t1);
        let (c0, c1, c2) = (-h1 / (h0 * (h0 + h1)), (h1 - h0) / (h0 * h1), h0 / (h1 * (h0 + h1)));
        let rhs = rescaled.rhs(k)?;
        let (u0, u1, u2) = (
            rescaled.states[k - 1].u.values(),
            rescaled.states[k].u.values(),
            rescaled.states[k + 1].u.values(),
        );
        let r = (0..rhs.len())
            .map(|i| (c0 * u0[i] + c1 * u1[i] + c2 * u2[i] - rhs[i]).abs())
            .fold(0.0, f64::max);
        rescaled.residuals[k] = Some(r);
    }
    Ok(rescaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{example_initial_data, run_flow, FlowConfig};
    use crate::geometry::{make_fubini_study, EtaSpec};
    use crate::grid::{RadialProfile, SGrid};

    fn taus() -> Vec<f64> {
        (0..=8).map(|k| 0.05 * k as f64).collect()
    }

    fn sigmas(taus: &[f64]) -> Vec<f64> {
        taus.iter().skip(1).map(|&t| -(-t as f64).exp_m1()).collect()
    }

    #[test]
    fn zero_tau_is_identity() {
        let grid = SGrid::new(-8.0, 8.0, 161).unwrap();
        let path = Arc::new(make_fubini_study(2.0, grid).unwrap().class_path());
        let u0 = example_initial_data(5.0, grid).unwrap();
        let traj = run_flow(&u0, &[0.1], path, &FlowConfig::fixed(1e-2, 0.5)).unwrap();
        let r = time_rescale(&traj, &[0.0]).unwrap();
        assert_eq!(r.states[0].u.values(), u0.values());
    }

    #[test]
    fn stationary_flow_grows_exponentially() {
        let grid = SGrid::new(-8.0, 8.0, 161).unwrap();
        let bg = make_fubini_study(2.0, grid).unwrap().with_eta(EtaSpec::Ricci).unwrap();
        let path = Arc::new(bg.class_path());
        let c = 0.7;
        let ts = taus();
        let traj = run_flow(&RadialProfile::constant(grid, c), &sigmas(&ts), path, &FlowConfig::fixed(1e-3, 1.0)).unwrap();
        let r = time_rescale(&traj, &ts).unwrap();
        for s in &r.states {
            assert!(s.u.values().iter().all(|v| (v - c * s.t.exp()).abs() < 1e-9));
        }
        assert!(r.max_residual() < 1e-3, "{}", r.max_residual());
    }

    #[test]
    fn example_residual_is_small() {
        let grid = SGrid::new(-14.0, 10.0, 481).unwrap();
        let path = Arc::new(make_fubini_study(2.0, grid).unwrap().class_path());
        let ts = taus();
        let traj = run_flow(&example_initial_data(10.0, grid).unwrap(), &sigmas(&ts), path, &FlowConfig::fixed(1e-3, 0.5))
            .unwrap();
        let r = time_rescale(&traj, &ts).unwrap();
        assert!(r.max_residual() < 2e-2, "{}", r.max_residual());
    }

    #[test]
    fn uncovered_times_are_rejected() {
        let grid = SGrid::new(-8.0, 8.0, 81).unwrap();
        let path = Arc::new(make_fubini_study(2.0, grid).unwrap().class_path());
        let traj = run_flow(&RadialProfile::zeros(grid), &[0.1], path, &FlowConfig::fixed(1e-2, 0.5)).unwrap();
        assert!(matches!(
            time_rescale(&traj, &[0.0, 1.0]),
            Err(Error::InsufficientCoverage { .. })
        ));
    }
}
