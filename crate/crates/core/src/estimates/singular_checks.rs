//! Checks on the maximal flow of a log pole: Lelong decay, boundedness after
//! the pole dissolves, supersolution domination and the lower bound by a
//! shrinking multiple of the initial datum.

use serde::{Deserialize, Serialize};

use super::{EstimateReport, Margin, BOUND_TOL, ORDERING_TOL};
use crate::error::Result;
use crate::flow::{FlowTrajectory, MaximalFlow};
use crate::geometry::FubiniStudy;
use crate::grid::RadialProfile;
use crate::singular::{lelong_number, supersolution, SingularitySpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LelongDecayParams {
    /// Fit window of the Lelong number.
    pub window: (f64, f64),
    /// Allowed shortfall below `nu_0 - 2t`.
    pub envelope_tol: f64,
    /// Smallest Lelong number counted as positive.
    pub positivity_floor: f64,
    /// Relative band around `nu_0 / 2` excluded from positivity and boundedness.
    pub band: f64,
    /// Relative change of the sup-norm allowed under refinement.
    pub sup_rtol: f64,
    pub supersolution_tol: f64,
    /// Nodes where boundedness and domination are checked.
    pub region: (f64, f64),
}

impl Default for LelongDecayParams {
    fn default() -> Self {
        Self {
            window: (-12.0, -8.0),
            envelope_tol: 0.02,
            positivity_floor: 0.02,
            band: 0.05,
            sup_rtol: 1e-2,
            supersolution_tol: 1e-4,
            region: (-12.0, 10.0),
        }
    }
}

fn sup_norm(u: &RadialProfile, region: (f64, f64)) -> f64 {
    let range = u.grid().window(region.0, region.1);
    u.values()[range].iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// `nu(t) >= nu_0 - 2t`, positivity before `nu_0 / 2`, grid-stable boundedness
/// after it and `phi_t <= (1 - t/a) phi_0 + t log(2 C_0)` for `t <= a`.
pub fn check_lelong_decay(
    maximal: &MaximalFlow,
    fine: Option<&MaximalFlow>,
    spec: &SingularitySpec,
    geometry: &FubiniStudy,
    params: &LelongDecayParams,
) -> Result<EstimateReport> {
    const ID: &str = "lelong_decay";
    let Some(limit) = &maximal.limit else {
        return Ok(EstimateReport::skipped(ID, "maximal flow diverged; no limit to measure"));
    };
    let a = spec.pole_coefficient;
    let nu0 = spec.lelong();
    let mut report = EstimateReport::new(ID);
    report.constant("nu0", nu0);
    let fine_limit = fine.and_then(|f| f.limit.as_ref());
    let bg = geometry.build(*limit.path.grid())?;
    let phi0 = spec.profile_on(*limit.path.grid());
    let nodes = limit.path.grid().nodes();
    let region = limit.path.grid().window(params.region.0, params.region.1);

    let (mut envelope, mut positivity, mut domination) = (Margin::new(), Margin::new(), Margin::new());
    let mut bounded = true;
    let mut assessed_bounded = false;
    let (mut ts, mut nus, mut sups) = (Vec::new(), Vec::new(), Vec::new());
    for state in limit.states.iter().filter(|s| s.t > 0.0) {
        let t = state.t;
        let nu = lelong_number(&state.u, params.window)?.nu;
        envelope.update(nu - (nu0 - 2.0 * t - params.envelope_tol), t, params.window.0);
        if t < (1.0 - params.band) * nu0 / 2.0 {
            positivity.update(nu - params.positivity_floor, t, params.window.0);
        }
        let sup = sup_norm(&state.u, params.region);
        ts.push(t);
        nus.push(nu);
        sups.push(sup);
        if t > (1.0 + params.band) * nu0 / 2.0 {
            match fine_limit.and_then(|f| f.at(t)) {
                Some(other) => {
                    let sup_fine = sup_norm(&other.u, params.region);
                    report.constant(&format!("sup_norm_fine_t{t}"), sup_fine);
                    bounded &= (sup - sup_fine).abs() <= params.sup_rtol * sup.max(1.0);
                    assessed_bounded = true;
                }
                None => report.note(format!("boundedness at t = {t} needs a refined run")),
            }
        }
        if a > 0.0 && t <= a {
            let upper = supersolution(&phi0, 1.0 / a, t, &bg)?;
            report.constant("C0", upper.curvature_bound);
            for i in region.clone() {
                domination.update(upper.profile.get(i) - state.u.get(i), t, nodes[i]);
            }
        }
    }
    report.series.insert("t".into(), ts);
    report.series.insert("nu".into(), nus);
    report.series.insert("sup_norm".into(), sups);
    for (name, m) in [("envelope", &envelope), ("positivity", &positivity), ("domination", &domination)] {
        if m.value.is_finite() {
            report.constant(&format!("{name}_margin"), m.value);
        }
    }
    report.record(&envelope);
    report.record(&positivity);
    report.record(&domination);
    if assessed_bounded {
        report.constant("bounded", if bounded { 1.0 } else { 0.0 });
    }
    let ok = envelope.at_least(0.0)
        && positivity.at_least(0.0)
        && domination.at_least(params.supersolution_tol)
        && bounded;
    Ok(report.conclude(ok))
}

/// `phi_t >= (1 - 2 beta t) phi_0 - C(t)` with `C(t)` fitted on `region`, and
/// `C(t)` shrinking to zero over at least a decade of sampled times.
pub fn check_lower_bound(traj: &FlowTrajectory, phi0: &RadialProfile, beta: f64, region: (f64, f64)) -> Result<EstimateReport> {
    const ID: &str = "lower_bound";
    let t_max = traj.path.t_max();
    if !(2.0 * beta > 1.0 / t_max) {
        return Ok(EstimateReport::skipped(ID, format!("2 beta = {} <= 1/T_max = {}", 2.0 * beta, 1.0 / t_max)));
    }
    let grid = *traj.path.grid();
    let phi0 = phi0.resample(grid);
    let range = grid.window(region.0, region.1);
    let nodes = grid.nodes();
    let (mut ts, mut cs) = (Vec::new(), Vec::new());
    let mut worst = Margin::new();
    for state in traj.states.iter().filter(|s| s.t > 0.0 && 2.0 * beta * s.t < 1.0) {
        let scale = 1.0 - 2.0 * beta * state.t;
        let mut c = f64::NEG_INFINITY;
        for i in range.clone() {
            let gap = scale * phi0.get(i) - state.u.get(i);
            if gap > c {
                c = gap;
                worst.update(-gap, state.t, nodes[i]);
            }
        }
        ts.push(state.t);
        cs.push(c.max(0.0));
    }
    if ts.len() < 2 || ts[ts.len() - 1] < 10.0 * ts[0] {
        return Ok(EstimateReport::skipped(ID, "sampled times span less than a decade"));
    }
    let mut report = EstimateReport::new(ID);
    report.constant("beta", beta);
    let monotone = cs.windows(2).all(|w| w[1] >= w[0] - ORDERING_TOL.max(BOUND_TOL * w[0]));
    let (first, last) = (cs[0], cs[cs.len() - 1]);
    let shrinking = first <= BOUND_TOL || first <= 0.5 * last;
    report.constant("C_first", first);
    report.constant("C_last", last);
    report.series.insert("t".into(), ts);
    report.series.insert("C".into(), cs);
    report.record(&worst);
    if !monotone {
        report.note("C(t) is not monotone in t");
    }
    Ok(report.conclude(monotone && shrinking))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::flow::{run_flow, FlowConfig};
    use crate::geometry::make_fubini_study;
    use crate::grid::SGrid;

    fn decade() -> Vec<f64> {
        [0.01, 0.02, 0.05, 0.1, 0.2, 0.3].to_vec()
    }

    #[test]
    fn constant_data_has_linear_lower_constant() {
        let grid = SGrid::new(-12.0, 12.0, 241).unwrap();
        let path = Arc::new(make_fubini_study(2.0, grid).unwrap().class_path());
        let u0 = RadialProfile::constant(grid, -1.0);
        let traj = run_flow(&u0, &decade(), path, &FlowConfig::fixed(1e-3, 0.3)).unwrap();
        let r = check_lower_bound(&traj, &u0, 1.0, (-12.0, 12.0)).unwrap();
        assert!(r.holds(), "{r:?}");
        // C(t) = -2 beta t phi_0 - phi_t with phi_t = -1 - t + (t - 1) log(1 - t) + O(t^2).
        for (t, c) in r.series["t"].iter().zip(&r.series["C"]) {
            assert!(*c <= 4.0 * t, "t = {t}: {c}");
        }
    }

    #[test]
    fn small_beta_is_skipped() {
        let grid = SGrid::new(-12.0, 12.0, 121).unwrap();
        let path = Arc::new(make_fubini_study(2.0, grid).unwrap().class_path());
        let u0 = RadialProfile::zeros(grid);
        let traj = run_flow(&u0, &decade(), path, &FlowConfig::fixed(1e-2, 0.3)).unwrap();
        assert!(check_lower_bound(&traj, &u0, 0.4, (-12.0, 12.0)).unwrap().is_skipped());
    }
}
