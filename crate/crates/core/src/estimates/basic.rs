//! Constant-free checks: comparison, the upper bound and the derivative bound.

use std::sync::Arc;

use super::{EstimateReport, Margin, Normalization, BOUND_TOL, ORDERING_TOL};
use crate::error::{Error, Result};
use crate::flow::FlowTrajectory;

fn same_setting(a: &FlowTrajectory, b: &FlowTrajectory) -> bool {
    Arc::ptr_eq(&a.path, &b.path) || *a.path == *b.path
}

/// `max(u_t - v_t) <= max(u_0 - v_0)` at every common output time.
pub fn check_comparison(a: &FlowTrajectory, b: &FlowTrajectory) -> Result<EstimateReport> {
    if !same_setting(a, b) {
        return Err(Error::GridMismatch);
    }
    let mut report = EstimateReport::new("comparison");
    let sup0 = max_difference(a.initial().u.values(), b.initial().u.values());
    report.constant("initial_sup", sup0);
    let nodes = a.path.grid().nodes();
    let mut margin = Margin::new();
    let (mut ts, mut sups) = (Vec::new(), Vec::new());
    for state in &a.states {
        let Some(other) = b.at(state.t) else { continue };
        let (mut worst, mut at) = (f64::NEG_INFINITY, 0);
        for (i, (u, v)) in state.u.values().iter().zip(other.u.values()).enumerate() {
            if u - v > worst {
                worst = u - v;
                at = i;
            }
        }
        margin.update(sup0 - worst, state.t, nodes[at]);
        ts.push(state.t);
        sups.push(worst);
    }
    if ts.len() < 2 {
        return Ok(EstimateReport::skipped("comparison", "trajectories share no output time after t = 0"));
    }
    report.series.insert("t".into(), ts);
    report.series.insert("sup_difference".into(), sups);
    report.record(&margin);
    Ok(report.conclude(margin.at_least(ORDERING_TOL)))
}

fn max_difference(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a - b).fold(f64::NEG_INFINITY, f64::max)
}

/// `phi_t <= sup phi_0 + t log 2` while `theta_t <= 2 omega`.
pub fn check_upper_bound(traj: &FlowTrajectory) -> Result<EstimateReport> {
    let norm = Normalization::of(&traj.path, 0.0, 2.0);
    if !(norm.horizon > 0.0) {
        let mut r = EstimateReport::skipped("upper_bound", "theta_t <= 2 omega fails for every t > 0");
        r.normalization = Some(norm);
        return Ok(r);
    }
    let mut report = EstimateReport::new("upper_bound");
    report.normalization = Some(norm);
    let sup0 = traj.initial().u.max();
    report.constant("initial_sup", sup0);
    let nodes = traj.path.grid().nodes();
    let mut margin = Margin::new();
    let mut checked = 0;
    for state in traj.states.iter().filter(|s| s.t <= norm.horizon * (1.0 + 1e-12)) {
        let bound = sup0 + state.t * std::f64::consts::LN_2;
        for (u, s) in state.u.values().iter().zip(&nodes) {
            margin.update(bound - u, state.t, *s);
        }
        checked += 1;
    }
    report.constant("checked_times", checked as f64);
    report.record(&margin);
    Ok(report.conclude(margin.at_least(BOUND_TOL)))
}

/// `dphi/dt <= (phi_t - phi_0)/t + 1` with the time derivative read from the equation.
pub fn check_derivative_upper(traj: &FlowTrajectory) -> Result<EstimateReport> {
    let mut report = EstimateReport::new("derivative_upper");
    let nodes = traj.path.grid().nodes();
    let u0 = traj.initial().u.values();
    let mut margin = Margin::new();
    for (k, state) in traj.states.iter().enumerate().filter(|(_, s)| s.t > 0.0) {
        let dot = traj.log_density(k)?;
        for (((u, a), d), s) in state.u.values().iter().zip(u0).zip(&dot).zip(&nodes) {
            margin.update((u - a) / state.t + 1.0 - d, state.t, *s);
        }
    }
    if margin.witness.is_none() {
        return Ok(EstimateReport::skipped("derivative_upper", "no output time after t = 0"));
    }
    report.record(&margin);
    Ok(report.conclude(margin.at_least(BOUND_TOL)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{example_initial_data, exact_example_solution, run_flow, FlowConfig};
    use crate::geometry::{make_fubini_study, ClassPath, EtaSpec};
    use crate::grid::{RadialProfile, SGrid};

    fn grid() -> SGrid {
        SGrid::new(-14.0, 10.0, 481).unwrap()
    }

    fn fs_path() -> Arc<ClassPath> {
        Arc::new(make_fubini_study(2.0, grid()).unwrap().class_path())
    }

    fn stationary_path() -> Arc<ClassPath> {
        Arc::new(make_fubini_study(2.0, grid()).unwrap().with_eta(EtaSpec::Ricci).unwrap().class_path())
    }

    const TIMES: [f64; 4] = [0.1, 0.2, 0.4, 0.8];

    #[test]
    fn self_comparison_has_zero_margin() {
        let u0 = example_initial_data(10.0, grid()).unwrap();
        let traj = run_flow(&u0, &TIMES, fs_path(), &FlowConfig::fixed(1e-2, 0.8)).unwrap();
        let r = check_comparison(&traj, &traj).unwrap();
        assert!(r.holds());
        assert_eq!(r.margin, Some(0.0));
    }

    #[test]
    fn shifted_data_stays_shifted() {
        let u0 = example_initial_data(10.0, grid()).unwrap();
        let path = fs_path();
        let a = run_flow(&u0, &TIMES, Arc::clone(&path), &FlowConfig::fixed(1e-2, 0.8)).unwrap();
        let b = run_flow(&u0.shifted(3.0), &TIMES, path, &FlowConfig::fixed(1e-2, 0.8)).unwrap();
        let r = check_comparison(&a, &b).unwrap();
        assert!(r.holds());
        for d in &r.series["sup_difference"] {
            assert!((d + 3.0).abs() < 1e-9, "{d}");
        }
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let other = Arc::new(make_fubini_study(2.0, SGrid::new(-10.0, 10.0, 101).unwrap()).unwrap().class_path());
        let a = run_flow(&RadialProfile::zeros(grid()), &[0.1], fs_path(), &FlowConfig::fixed(1e-2, 0.1)).unwrap();
        let b = run_flow(&RadialProfile::zeros(*other.grid()), &[0.1], other, &FlowConfig::fixed(1e-2, 0.1)).unwrap();
        assert_eq!(check_comparison(&a, &b), Err(Error::GridMismatch));
    }

    #[test]
    fn stationary_flow_bounds() {
        let traj = run_flow(&RadialProfile::zeros(grid()), &TIMES, stationary_path(), &FlowConfig::fixed(1e-2, 0.8))
            .unwrap();
        let up = check_upper_bound(&traj).unwrap();
        assert!(up.holds());
        assert!(up.margin.unwrap().abs() < 1e-12);
        assert_eq!(up.witness.unwrap().t, 0.0);
        let der = check_derivative_upper(&traj).unwrap();
        assert!(der.holds());
        assert!((der.margin.unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn example_flows_satisfy_both_bounds() {
        let times: Vec<f64> = (1..=9).map(|k| 0.1 * k as f64).collect();
        for j in [1.0, 10.0] {
            let u0 = example_initial_data(j, grid()).unwrap();
            let traj = run_flow(&u0, &times, fs_path(), &FlowConfig::fixed(1e-3, 0.9)).unwrap();
            let up = check_upper_bound(&traj).unwrap();
            assert!(up.holds(), "{up:?}");
            assert!(up.normalization.unwrap().horizon >= 0.9);
            assert!(check_derivative_upper(&traj).unwrap().holds());
        }
    }

    #[test]
    fn closed_form_satisfies_the_upper_bound() {
        // phi_{t,1} = -t + (t - 1) log(1 - t) <= t log 2 on [0, 0.9].
        for k in 0..=90 {
            let t = 0.01 * k as f64;
            let v = exact_example_solution(1.0, t, grid()).unwrap().max();
            assert!(v <= t * std::f64::consts::LN_2 + 1e-12, "t = {t}: {v}");
        }
    }
}
