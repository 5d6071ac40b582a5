//! Scalar parabolic Monge–Ampère flow in the radial reduction.
//!
//! The potential `u_t` evolves by `du/dt = log[(theta_t + dd^c u_t) / omega]`,
//! discretized with backward Euler in time and the finite-volume second
//! difference in `s`. Each step is a damped Newton solve whose Jacobian
//! `I - dt diag(1/m) D2` is a tridiagonal M-matrix, so the discrete scheme
//! is monotone and inherits the comparison principle.

mod exact;
mod maximal;
mod rescale;

use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ClassPath;
use crate::grid::{d2_split_into, solve_tridiagonal, two_sum, RadialProfile};

pub use exact::{example_initial_data, exact_example_solution};
pub use maximal::{
    maximal_flow, ApproximantFamily, DepthRule, MaximalFlow, MaximalFlowConfig, MaximalOutcome,
};
pub use rescale::{time_rescale, RescaledTrajectory};

/// Time-step control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DtPolicy {
    Fixed,
    Adaptive {
        target_newton_iters: usize,
        dt_min: f64,
        dt_max: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dt_init: f64,
    pub dt_policy: DtPolicy,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Lower bound kept on `theta_t'' + u''` during Newton updates.
    pub positivity_floor: f64,
    pub t_end: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dt_init: 1e-3,
            dt_policy: DtPolicy::Fixed,
            newton_tol: 1e-11,
            newton_max_iter: 50,
            positivity_floor: 1e-300,
            t_end: 1.0,
        }
    }
}

impl FlowConfig {
    pub fn fixed(dt: f64, t_end: f64) -> Self {
        Self {
            dt_init: dt,
            t_end,
            ..Self::default()
        }
    }

    pub fn validate(&self, path: &ClassPath) -> Result<()> {
        if !(self.dt_init > 0.0) {
            return Err(Error::InvalidParameter(format!("dt_init = {}", self.dt_init)));
        }
        if !(self.newton_tol > 0.0) || self.newton_max_iter == 0 {
            return Err(Error::InvalidParameter("Newton tolerance and iteration cap must be positive".into()));
        }
        if !(self.positivity_floor > 0.0) {
            return Err(Error::InvalidParameter("positivity floor must be positive".into()));
        }
        if !(self.t_end < path.t_max()) {
            return Err(Error::OutOfRange(format!(
                "t_end = {} must be below T_max = {}",
                self.t_end,
                path.t_max()
            )));
        }
        if let DtPolicy::Adaptive { dt_min, dt_max, .. } = self.dt_policy {
            if !(0.0 < dt_min && dt_min <= dt_max) {
                return Err(Error::InvalidParameter("adaptive dt bounds".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub t: f64,
    pub u: RadialProfile,
}

impl FlowState {
    pub fn new(t: f64, u: RadialProfile) -> Self {
        Self { t, u }
    }
}

/// Density of `theta_t + dd^c u` on the grid.
pub fn form_density(state: &FlowState, path: &ClassPath) -> Vec<f64> {
    let mut out = path.theta_density(state.t);
    for (o, d) in out.iter_mut().zip(state.u.d2()) {
        *o += d;
    }
    out
}

/// `log[(theta_t'' + u'') / omega'']` nodewise, i.e. the time derivative of the flow.
pub fn ma_log_density(state: &FlowState, path: &ClassPath) -> Result<Vec<f64>> {
    if state.u.grid() != path.grid() {
        return Err(Error::GridMismatch);
    }
    let dens = form_density(state, path);
    dens.iter()
        .zip(path.omega_density())
        .enumerate()
        .map(|(index, (&m, &w))| {
            if m > 0.0 && m.is_finite() {
                Ok((m / w).ln())
            } else {
                Err(Error::DegenerateMetric { index, value: m })
            }
        })
        .collect()
}

/// Outcome of one accepted implicit step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub newton_iters: usize,
    pub residual: f64,
}

/// Iterate stored as `hi + lo`.
#[derive(Clone)]
struct Split {
    hi: Vec<f64>,
    lo: Vec<f64>,
}

impl Split {
    /// `out = self + alpha * delta`; exact up to the low parts when `alpha`
    /// is a power of two.
    fn add_scaled(&self, alpha: f64, delta: &Split, out: &mut Split) {
        for i in 0..self.hi.len() {
            let (s, e) = two_sum(self.hi[i], alpha * delta.hi[i]);
            let (h, l) = two_sum(s, self.lo[i] + alpha * delta.lo[i] + e);
            out.hi[i] = h;
            out.lo[i] = l;
        }
    }
}

/// Newton correction for `delta - dt diag(1/m) D2 delta = -F`.
///
/// Subtracting consecutive rows gives a tridiagonal M-matrix system for the
/// neighbour differences `e_i = delta_{i+1} - delta_i`, which are then summed
/// with compensation. Solving for `delta` directly would leave round-off of
/// size `eps |delta| / h^2` in `D2 delta`, far above densities of order `e^s`
/// deep in the left chart.
struct DifferenceNewton {
    h: f64,
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    rhs: Vec<f64>,
}

impl DifferenceNewton {
    fn new(n: usize, h: f64) -> Self {
        Self {
            h,
            lower: vec![0.0; n - 1],
            diag: vec![0.0; n - 1],
            upper: vec![0.0; n - 1],
            rhs: vec![0.0; n - 1],
        }
    }

    fn solve(&mut self, dt: f64, m: &[f64], f: &[f64], delta: &mut Split) -> Option<()> {
        let n = m.len();
        let ih2 = 1.0 / (self.h * self.h);
        // Row i of D2 reads alpha_i e_i - beta_i e_{i-1}.
        let alpha = |i: usize| if i == 0 { 2.0 * ih2 } else if i + 1 == n { 0.0 } else { ih2 };
        let beta = |i: usize| if i == 0 { 0.0 } else if i + 1 == n { 2.0 * ih2 } else { ih2 };
        for i in 0..n - 1 {
            let (k0, k1) = (dt / m[i], dt / m[i + 1]);
            self.lower[i] = -k0 * beta(i);
            self.diag[i] = 1.0 + k1 * beta(i + 1) + k0 * alpha(i);
            self.upper[i] = -k1 * alpha(i + 1);
            self.rhs[i] = f[i] - f[i + 1];
        }
        solve_tridiagonal(&self.lower, &self.diag, &self.upper, &mut self.rhs)?;
        let e = &self.rhs;
        delta.hi[0] = -f[0] + dt / m[0] * alpha(0) * e[0];
        delta.lo[0] = 0.0;
        for i in 1..n {
            let (s, err) = two_sum(delta.hi[i - 1], e[i - 1]);
            let (hi, lo) = two_sum(s, delta.lo[i - 1] + err);
            delta.hi[i] = hi;
            delta.lo[i] = lo;
        }
        delta.hi.iter().all(|x| x.is_finite()).then_some(())
    }
}

/// One backward Euler step: solves `v - dt log[(theta_{t+dt}'' + v'') / omega''] = u`.
pub fn step_implicit(state: &FlowState, dt: f64, path: &ClassPath, cfg: &FlowConfig) -> Result<(FlowState, StepInfo)> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt = {dt}")));
    }
    let t1 = state.t + dt;
    if t1 > cfg.t_end * (1.0 + 1e-12) + 1e-14 {
        return Err(Error::OutOfRange(format!("t + dt = {t1} exceeds t_end = {}", cfg.t_end)));
    }
    if state.u.grid() != path.grid() {
        return Err(Error::GridMismatch);
    }
    let grid = *state.u.grid();
    let n = grid.len();
    let h = grid.spacing();
    let (sm, sp) = (state.u.slope_minus, state.u.slope_plus);
    let theta = path.theta_density(t1);
    let omega = path.omega_density();
    let u = Split {
        hi: state.u.values().to_vec(),
        lo: if state.u.low().is_empty() {
            vec![0.0; n]
        } else {
            state.u.low().to_vec()
        },
    };

    let density = |v: &Split, out: &mut [f64]| {
        d2_split_into(&v.hi, Some(&v.lo), sm, sp, h, out);
        for (o, th) in out.iter_mut().zip(&theta) {
            *o += th;
        }
    };
    // Residual in excess of its round-off floor, which is dominated by the
    // neighbour differences entering D2 where the density is tiny.
    let ih2 = 1.0 / (h * h);
    let residual = |v: &Split, m: &[f64], out: &mut [f64]| -> f64 {
        let mut norm: f64 = 0.0;
        for i in 0..n {
            let logm = (m[i] / omega[i]).ln();
            out[i] = ((v.hi[i] - u.hi[i]) + (v.lo[i] - u.lo[i])) - dt * logm;
            let left = if i > 0 { (v.hi[i] - v.hi[i - 1]).abs() } else { 0.0 };
            let right = if i + 1 < n { (v.hi[i + 1] - v.hi[i]).abs() } else { 0.0 };
            let floor = 8.0
                * f64::EPSILON
                * (dt * ((left + right) * ih2 + theta[i]) / m[i] + (v.hi[i] - u.hi[i]).abs() + dt * logm.abs());
            norm = norm.max(out[i].abs() - floor);
        }
        norm.max(0.0)
    };

    let mut v = u.clone();
    let mut m = vec![0.0; n];
    let mut f = vec![0.0; n];
    density(&v, &mut m);
    if m.iter().any(|&x| !(x > 0.0)) {
        // The class shrinks faster than the form allows for the old iterate;
        // flatten it so that theta_{t+dt}'' + lambda u'' > 0.
        let theta_old = path.theta_density(state.t);
        let lambda = 0.5
            * theta.iter().zip(&theta_old).map(|(a, b)| a / b).fold(1.0, f64::min).max(0.0);
        let c = u.hi[n - 1];
        for i in 0..n {
            let (hi, err) = two_sum(c, lambda * (u.hi[i] - c));
            v.hi[i] = hi;
            v.lo[i] = err + lambda * u.lo[i];
        }
        density(&v, &mut m);
    }
    if let Some(index) = m.iter().position(|&x| !(x > 0.0)) {
        return Err(Error::DegenerateMetric { index, value: m[index] });
    }
    let mut norm = residual(&v, &m, &mut f);

    let mut newton = DifferenceNewton::new(n, h);
    let mut delta = Split { hi: vec![0.0; n], lo: vec![0.0; n] };
    let mut trial = u.clone();
    let mut m_trial = vec![0.0; n];
    let mut f_trial = vec![0.0; n];
    let mut iters = 0;
    while norm > cfg.newton_tol {
        if iters >= cfg.newton_max_iter {
            return Err(Error::NewtonFailed { t: t1, iterations: iters, residual: norm });
        }
        iters += 1;
        if newton.solve(dt, &m, &f, &mut delta).is_none() {
            return Err(Error::NewtonFailed { t: t1, iterations: iters, residual: norm });
        }
        // Damp until the form stays above the floor and the residual drops.
        let mut alpha = 1.0;
        loop {
            v.add_scaled(alpha, &delta, &mut trial);
            density(&trial, &mut m_trial);
            let positive = m_trial.iter().all(|&x| x >= cfg.positivity_floor && x.is_finite());
            if positive {
                let trial_norm = residual(&trial, &m_trial, &mut f_trial);
                if trial_norm < (1.0 - 1e-4 * alpha) * norm || alpha < 1.0 / 1024.0 {
                    norm = trial_norm;
                    break;
                }
            }
            alpha *= 0.5;
            if alpha < 1e-12 {
                return Err(Error::NewtonFailed { t: t1, iterations: iters, residual: norm });
            }
        }
        std::mem::swap(&mut v, &mut trial);
        std::mem::swap(&mut m, &mut m_trial);
        std::mem::swap(&mut f, &mut f_trial);
    }
    let u_next = RadialProfile::new(grid, v.hi, sm, sp)?.with_low(v.lo)?;
    Ok((
        FlowState::new(t1, u_next),
        StepInfo { newton_iters: iters, residual: norm },
    ))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub newton_iterations: Vec<usize>,
    pub dt_history: Vec<f64>,
    pub rejected_steps: usize,
    pub max_residual: f64,
}

impl SolverDiagnostics {
    pub fn steps(&self) -> usize {
        self.dt_history.len()
    }

    pub fn total_newton_iterations(&self) -> usize {
        self.newton_iterations.iter().sum()
    }
}

/// States of one flow run at its output times. The first state is the
/// initial datum at `t = 0`.
#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    pub states: Vec<FlowState>,
    pub diagnostics: SolverDiagnostics,
    pub path: Arc<ClassPath>,
}

impl FlowTrajectory {
    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.t).collect()
    }

    pub fn initial(&self) -> &FlowState {
        &self.states[0]
    }

    pub fn last(&self) -> &FlowState {
        self.states.last().expect("trajectory holds the initial state")
    }

    /// State whose time matches `t` up to `1e-9`.
    pub fn at(&self, t: f64) -> Option<&FlowState> {
        self.states.iter().find(|s| (s.t - t).abs() <= 1e-9 * t.abs().max(1.0))
    }

    pub fn log_density(&self, index: usize) -> Result<Vec<f64>> {
        ma_log_density(&self.states[index], &self.path)
    }

    /// `tr_omega(omega_t)`, which in one complex dimension is the density ratio.
    pub fn trace_ratio(&self, index: usize) -> Result<Vec<f64>> {
        Ok(self.log_density(index)?.into_iter().map(f64::exp).collect())
    }

    /// The same trajectory with every state shifted by `c`.
    pub fn shifted(&self, c: f64) -> Self {
        Self {
            states: self
                .states
                .iter()
                .map(|s| FlowState::new(s.t, s.u.shifted(c)))
                .collect(),
            diagnostics: self.diagnostics.clone(),
            path: Arc::clone(&self.path),
        }
    }

    /// CSV with columns `t,s,u,log_density,trace_ratio`; degenerate densities are written as NaN.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t,s,u,log_density,trace_ratio")?;
        let nodes = self.path.grid().nodes();
        let omega = self.path.omega_density();
        for state in &self.states {
            let dens = form_density(state, &self.path);
            for (((s, u), m), w) in nodes.iter().zip(state.u.values()).zip(&dens).zip(omega) {
                let ratio = if *m > 0.0 { m / w } else { f64::NAN };
                writeln!(out, "{:?},{s:?},{u:?},{:?},{ratio:?}", state.t, ratio.ln())?;
            }
        }
        Ok(())
    }
}

/// Integrates the flow from `u0` and samples it at `output_times`.
pub fn run_flow(u0: &RadialProfile, output_times: &[f64], path: Arc<ClassPath>, cfg: &FlowConfig) -> Result<FlowTrajectory> {
    cfg.validate(&path)?;
    if u0.grid() != path.grid() {
        return Err(Error::GridMismatch);
    }
    let mut prev = 0.0;
    for &t in output_times {
        if !(t > prev) || t > cfg.t_end * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "output times must increase within (0, t_end]; got {t} after {prev}"
            )));
        }
        prev = t;
    }

    let mut state = FlowState::new(0.0, u0.clone());
    // Reject initial data that is not strictly theta_0-psh.
    ma_log_density(&state, &path)?;
    let mut states = vec![state.clone()];
    let mut diag = SolverDiagnostics::default();
    let mut dt = cfg.dt_init;

    for &target in output_times {
        while state.t < target {
            let remaining = target - state.t;
            let (step, landing) = if remaining <= dt * (1.0 + 1e-6) {
                (remaining, true)
            } else {
                (dt, false)
            };
            match step_implicit(&state, step, &path, cfg) {
                Ok((mut next, info)) => {
                    if landing {
                        next.t = target;
                    }
                    state = next;
                    diag.newton_iterations.push(info.newton_iters);
                    diag.dt_history.push(step);
                    diag.max_residual = diag.max_residual.max(info.residual);
                    if let DtPolicy::Adaptive { target_newton_iters, dt_max, .. } = cfg.dt_policy {
                        if info.newton_iters < target_newton_iters && !landing {
                            dt = (dt * 1.5).min(dt_max);
                        } else if info.newton_iters > target_newton_iters {
                            dt = (dt * 0.7).max(step.min(dt));
                        }
                    }
                }
                Err(err @ (Error::NewtonFailed { .. } | Error::DegenerateMetric { .. })) => match cfg.dt_policy {
                    DtPolicy::Fixed => return Err(err),
                    DtPolicy::Adaptive { dt_min, .. } => {
                        diag.rejected_steps += 1;
                        if step * 0.5 < dt_min {
                            return Err(err);
                        }
                        dt = step * 0.5;
                    }
                },
                Err(err) => return Err(err),
            }
        }
        states.push(state.clone());
    }
    Ok(FlowTrajectory { states, diagnostics: diag, path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_fubini_study, EtaSpec};
    use crate::grid::SGrid;

    fn path(eta: EtaSpec) -> Arc<ClassPath> {
        let g = SGrid::new(-10.0, 8.0, 361).unwrap();
        Arc::new(make_fubini_study(2.0, g).unwrap().with_eta(eta).unwrap().class_path())
    }

    #[test]
    fn zero_potential_at_time_zero_has_zero_density() {
        let p = path(EtaSpec::Zero);
        let st = FlowState::new(0.0, RadialProfile::zeros(*p.grid()));
        assert!(ma_log_density(&st, &p).unwrap().iter().all(|v| v.abs() < 1e-14));
        let shifted = FlowState::new(0.0, RadialProfile::constant(*p.grid(), 4.2));
        assert!(ma_log_density(&shifted, &p).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn stationary_when_class_is_frozen() {
        let p = path(EtaSpec::Ricci);
        let cfg = FlowConfig::fixed(0.05, 2.0);
        let u0 = RadialProfile::constant(*p.grid(), -1.5);
        let traj = run_flow(&u0, &[0.5, 1.0, 2.0], p, &cfg).unwrap();
        for st in &traj.states {
            for v in st.u.values() {
                assert!((v + 1.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_initial_data_is_rejected() {
        let p = path(EtaSpec::Zero);
        let g = *p.grid();
        // -3 log(1+e^s) makes omega + dd^c u negative.
        let u0 = RadialProfile::from_fn(g, 0.0, -3.0, |s| -3.0 * s.exp().ln_1p()).unwrap();
        let err = run_flow(&u0, &[0.1], p, &FlowConfig::fixed(0.01, 0.5)).unwrap_err();
        assert!(matches!(err, Error::DegenerateMetric { .. }));
    }

    #[test]
    fn t_end_must_stay_below_tmax() {
        let p = path(EtaSpec::Zero);
        let u0 = RadialProfile::zeros(*p.grid());
        let err = run_flow(&u0, &[0.5], p, &FlowConfig::fixed(0.01, 1.0)).unwrap_err();
        assert!(matches!(err, Error::OutOfRange(_)));
    }

    #[test]
    fn adaptive_policy_lands_on_outputs() {
        let p = path(EtaSpec::Zero);
        let g = *p.grid();
        let u0 = RadialProfile::from_fn(g, 0.0, 0.0, |s| 0.5 * (-s * s / 4.0).exp()).unwrap();
        let cfg = FlowConfig {
            dt_init: 0.01,
            dt_policy: DtPolicy::Adaptive { target_newton_iters: 4, dt_min: 1e-6, dt_max: 0.05 },
            t_end: 0.6,
            ..FlowConfig::default()
        };
        let traj = run_flow(&u0, &[0.1, 0.35, 0.6], p, &cfg).unwrap();
        assert_eq!(traj.times(), vec![0.0, 0.1, 0.35, 0.6]);
        assert!(traj.diagnostics.steps() > 3);
    }
}
