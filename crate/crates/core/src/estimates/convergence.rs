//! Stability under perturbations of the initial datum and convergence as `t -> 0`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EstimateReport, Margin, ORDERING_TOL};
use crate::error::{Error, Result};
use crate::flow::{run_flow, ApproximantFamily, FlowConfig, FlowTrajectory};
use crate::geometry::FubiniStudy;
use crate::grid::{RadialProfile, SGrid};
use crate::singular::{solve_ma_radial, SingularitySpec};

/// Sup-norms of `w`, its first and its second difference over `range`.
fn derivative_norms(w: &[f64], h: f64, range: std::ops::Range<usize>) -> (f64, f64, f64) {
    let n = w.len();
    let (mut d0, mut d1, mut d2) = (0.0_f64, 0.0_f64, 0.0_f64);
    for i in range {
        d0 = d0.max(w[i].abs());
        if i > 0 && i + 1 < n {
            d1 = d1.max(((w[i + 1] - w[i - 1]) / (2.0 * h)).abs());
            d2 = d2.max(((w[i + 1] - 2.0 * w[i] + w[i - 1]) / (h * h)).abs());
        }
    }
    (d0, d1, d2)
}

fn difference(a: &RadialProfile, b: &RadialProfile) -> Vec<f64> {
    a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect()
}

/// One perturbed run of the stability sweep.
#[derive(Debug, Clone)]
pub struct StabilityRun {
    pub j: f64,
    pub traj: FlowTrajectory,
}

/// Sup and `C^2` distances to `reference` at time `t` decrease in `j` and end below `tol`.
pub fn check_stability(runs: &[StabilityRun], reference: &FlowTrajectory, t: f64, tol: f64) -> Result<EstimateReport> {
    const ID: &str = "stability";
    if runs.len() < 2 || runs.windows(2).any(|w| !(w[1].j > w[0].j)) {
        return Err(Error::InvalidParameter("stability needs at least two runs with increasing j".into()));
    }
    let grid = *reference.path.grid();
    let available = reference.last().t;
    let target = reference.at(t).ok_or(Error::InsufficientCoverage { required: t, available })?;
    let (mut sup, mut c2, mut first, mut second) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for run in runs {
        if run.traj.path.grid() != &grid {
            return Err(Error::GridMismatch);
        }
        let state = run.traj.at(t).ok_or(Error::InsufficientCoverage {
            required: t,
            available: run.traj.last().t,
        })?;
        let (d0, d1, d2) = derivative_norms(&difference(&state.u, &target.u), grid.spacing(), 0..grid.len());
        sup.push(d0);
        first.push(d1);
        second.push(d2);
        c2.push(d0.max(d1).max(d2));
    }
    let mut report = EstimateReport::new(ID);
    report.constant("t", t);
    report.constant("tol", tol);
    let mut margin = Margin::new();
    for (k, w) in c2.windows(2).enumerate() {
        margin.update(w[0] - w[1], t, runs[k + 1].j);
    }
    for (k, w) in sup.windows(2).enumerate() {
        margin.update(w[0] - w[1], t, runs[k + 1].j);
    }
    let monotone = margin.at_least(ORDERING_TOL);
    let last = (sup[sup.len() - 1], c2[c2.len() - 1]);
    report.constant("sup_last", last.0);
    report.constant("c2_last", last.1);
    report.series.insert("j".into(), runs.iter().map(|r| r.j).collect());
    report.series.insert("sup_distance".into(), sup);
    report.series.insert("c2_distance".into(), c2);
    report.series.insert("d1_distance".into(), first);
    report.series.insert("d2_distance".into(), second);
    report.record(&margin);
    if !monotone {
        report.note("distances are not monotone in j");
    }
    Ok(report.conclude(monotone && last.0 <= tol && last.1 <= tol))
}

/// Whether derivatives must converge too.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroBranch {
    /// Continuous datum: uniform convergence on the region.
    Continuous,
    /// `e^{gamma phi_0}` smooth: first and second differences converge as well.
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroConvergenceParams {
    /// Largest dyadic time `t_0`; the sequence is `t_0 2^{-k}`.
    pub t0: f64,
    pub levels: usize,
    pub region: (f64, f64),
    pub branch: ZeroBranch,
    pub tol: f64,
}

impl ZeroConvergenceParams {
    pub fn times(&self) -> Vec<f64> {
        (0..=self.levels).map(|k| self.t0 * 0.5_f64.powi(k as i32)).collect()
    }
}

/// Monotone sequence `u_t = phi_t + C t - t log t + t log 4 >= u_{t/2}` and
/// convergence of `phi_t` to `phi0` on the region along `t_0 2^{-k}`.
///
/// `C` is the smallest constant with `phi_t >= phi_s + (t - s)(log(t - s) - C)`
/// over all pairs of output times in `[0, t_0]`.
pub fn check_zero_convergence(traj: &FlowTrajectory, phi0: &RadialProfile, params: &ZeroConvergenceParams) -> Result<EstimateReport> {
    const ID: &str = "zero_convergence";
    let grid = *traj.path.grid();
    let phi0 = if phi0.grid() == &grid { phi0.clone() } else { phi0.resample(grid) };
    let range = grid.window(params.region.0, params.region.1);
    if range.len() < 3 {
        return Err(Error::OutOfRange(format!("region {:?} holds fewer than three nodes", params.region)));
    }
    let nodes = grid.nodes();
    let available = traj.last().t;
    let mut dyadic = Vec::new();
    for t in params.times() {
        let state = traj.at(t).ok_or(Error::InsufficientCoverage { required: t, available })?;
        dyadic.push(state);
    }

    let pool: Vec<_> = traj.states.iter().filter(|s| s.t <= params.t0 * (1.0 + 1e-12)).collect();
    let mut c = f64::NEG_INFINITY;
    for (b, late) in pool.iter().enumerate() {
        for early in &pool[..b] {
            let dt = late.t - early.t;
            for i in range.clone() {
                c = c.max(dt.ln() - (late.u.get(i) - early.u.get(i)) / dt);
            }
        }
    }
    let mut report = EstimateReport::new(ID);
    report.constant("C", c);
    let u = |t: f64, v: f64| v + c * t - t * t.ln() + t * 4.0_f64.ln();
    let mut monotone = Margin::new();
    for w in dyadic.windows(2) {
        let (big, small) = (w[0], w[1]);
        for i in range.clone() {
            monotone.update(u(big.t, big.u.get(i)) - u(small.t, small.u.get(i)), big.t, nodes[i]);
        }
    }
    report.record(&monotone);

    let h = grid.spacing();
    let (mut ts, mut d0s, mut d1s, mut d2s) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for state in &dyadic {
        let (d0, d1, d2) = derivative_norms(&difference(&state.u, &phi0), h, range.clone());
        ts.push(state.t);
        d0s.push(d0);
        d1s.push(d1);
        d2s.push(d2);
    }
    let last = |v: &Vec<f64>| v[v.len() - 1];
    let shrinking = d0s.windows(2).all(|w| w[1] <= w[0] + ORDERING_TOL);
    let mut ok = monotone.at_least(ORDERING_TOL) && shrinking && last(&d0s) <= params.tol;
    report.constant("sup_last", last(&d0s));
    if params.branch == ZeroBranch::Analytic {
        report.constant("d1_last", last(&d1s));
        report.constant("d2_last", last(&d2s));
        ok &= last(&d1s) <= params.tol && last(&d2s) <= params.tol;
    }
    if !shrinking {
        report.note("sup-distance to phi0 does not decrease along the dyadic times");
    }
    report.series.insert("t".into(), ts);
    report.series.insert("sup_distance".into(), d0s);
    report.series.insert("d1_distance".into(), d1s);
    report.series.insert("d2_distance".into(), d2s);
    Ok(report.conclude(ok))
}

/// Density `f = kappa e^{-psi_minus}` with `psi_minus = -b log(1 + e^{-s})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HfData {
    pub minus_pole: f64,
    /// `kappa`; `None` normalizes `f` to the mass of `omega`.
    pub scale: Option<f64>,
}

impl HfData {
    /// Samples of `f` for `psi_minus` given on the grid.
    fn density(&self, psi_minus: &RadialProfile, omega: &[f64]) -> Vec<f64> {
        let raw: Vec<f64> = psi_minus.values().iter().map(|p| (-p).exp()).collect();
        let kappa = self.scale.unwrap_or_else(|| {
            let grid = psi_minus.grid();
            let fw: Vec<f64> = raw.iter().zip(omega).map(|(a, b)| a * b).collect();
            let mass: f64 = omega.iter().zip(grid.weights()).map(|(o, w)| o * w).sum();
            let m: f64 = fw.iter().zip(grid.weights()).map(|(v, w)| v * w).sum();
            mass / m
        });
        raw.into_iter().map(|v| kappa * v).collect()
    }
}

/// Flows started from the solutions of `omega + dd^c u = f_j omega`, where
/// `f_j` replaces `psi_minus` by its approximant at depth `j`.
#[derive(Debug, Clone)]
pub struct HfRuns {
    pub phi0: RadialProfile,
    pub runs: Vec<StabilityRun>,
    /// Sup over the region of `|phi_{0,j} - phi0|`.
    pub initial_gaps: Vec<f64>,
}

pub fn hf_pipeline(
    data: &HfData,
    geometry: &FubiniStudy,
    grid: SGrid,
    j_list: &[f64],
    times: &[f64],
    flow: &FlowConfig,
    region: (f64, f64),
) -> Result<HfRuns> {
    let bg = geometry.build(grid)?;
    let omega = crate::grid::d2(&bg.g0);
    let spec = SingularitySpec::pole(data.minus_pole, grid)?;
    let phi0 = solve_ma_radial(&data.density(&spec.profile(), &omega), &bg)?;
    let path = Arc::new(bg.class_path());
    let family = ApproximantFamily::default();
    let range = grid.window(region.0, region.1);
    let results: Vec<Result<(StabilityRun, f64)>> = j_list
        .par_iter()
        .map(|&j| {
            let psi_j = family.initial_data(&spec, j, grid)?;
            let phi0j = solve_ma_radial(&data.density(&psi_j, &omega), &bg)?;
            let gap = range.clone().map(|i| (phi0j.get(i) - phi0.get(i)).abs()).fold(0.0, f64::max);
            let traj = run_flow(&phi0j, times, Arc::clone(&path), flow)?;
            Ok((StabilityRun { j, traj }, gap))
        })
        .collect();
    let mut runs = Vec::with_capacity(results.len());
    let mut initial_gaps = Vec::with_capacity(results.len());
    for r in results {
        let (run, gap) = r?;
        runs.push(run);
        initial_gaps.push(gap);
    }
    Ok(HfRuns { phi0, runs, initial_gaps })
}

/// Convergence to `phi0` away from the pole for the deepest regularization,
/// with the regularized initial data approaching `phi0` as `j` grows.
pub fn check_h_f_convergence(runs: &HfRuns, params: &ZeroConvergenceParams) -> Result<EstimateReport> {
    let deepest = runs
        .runs
        .last()
        .ok_or_else(|| Error::InvalidParameter("no regularized runs".into()))?;
    let mut report = check_zero_convergence(&deepest.traj, &runs.phi0, params)?;
    report.theorem = "h_f_convergence".into();
    report.constant("j", deepest.j);
    let gaps_shrink = runs.initial_gaps.windows(2).all(|w| w[1] <= w[0] + ORDERING_TOL);
    report.series.insert("j".into(), runs.runs.iter().map(|r| r.j).collect());
    report.series.insert("initial_gap".into(), runs.initial_gaps.clone());
    if !gaps_shrink {
        report.note("regularized data do not approach phi0 monotonically");
        report.verdict = super::Verdict::Fails;
    }
    Ok(report)
}
