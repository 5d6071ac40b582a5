//! Maximal flow from singular data as the decreasing limit of smooth flows.
//!
//! The approximants `phi_{0,j}` cut the pole off at depth `m_j` and decrease
//! to the singular profile as `j` grows. All of them live on one grid deep
//! enough for the largest depth, so the discrete comparison principle orders
//! the flows exactly and the limit in `j` is taken nodewise.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_flow, FlowConfig, FlowState, FlowTrajectory};
use crate::error::{Error, Result};
use crate::geometry::{softplus, ClassPath, FubiniStudy};
use crate::grid::{fit_line, RadialProfile, SGrid};
use crate::singular::SingularitySpec;

/// How the cut-off depth grows with `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthRule {
    /// `m_j = j`.
    Linear,
    /// `m_j = log j`, the pattern of the closed-form example.
    Logarithmic,
}

/// `phi_{0,j} = (a/p) log(e^{p s} + e^{-p m_j}) - a log(1 + e^s) + tail`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproximantFamily {
    pub sharpness: f64,
    pub depth: DepthRule,
}

impl Default for ApproximantFamily {
    fn default() -> Self {
        Self {
            sharpness: 1.0,
            depth: DepthRule::Linear,
        }
    }
}

impl ApproximantFamily {
    pub fn depth_of(&self, j: f64) -> f64 {
        match self.depth {
            DepthRule::Linear => j,
            DepthRule::Logarithmic => j.ln(),
        }
    }

    /// The `j`-th approximant of `spec` sampled on `grid`.
    pub fn initial_data(&self, spec: &SingularitySpec, j: f64, grid: SGrid) -> Result<RadialProfile> {
        let p = self.sharpness;
        if !(p > 0.0) {
            return Err(Error::InvalidParameter(format!("sharpness must be positive, got {p}")));
        }
        let a = spec.pole_coefficient;
        let m = self.depth_of(j);
        let tail = &spec.bounded_tail;
        RadialProfile::from_offset_fn(grid, 0.0, 0.0, -a * m, |s| {
            a * (softplus(p * (s + m)) / p - softplus(s)) + tail.value_at(s)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaximalFlowConfig {
    pub flow: FlowConfig,
    pub family: ApproximantFamily,
    /// Extra depth kept left of the deepest cut-off, in `s` units.
    pub margin: f64,
    /// Deepest admissible grid end.
    pub depth_floor: f64,
    /// Window on which convergence in `j` is measured.
    pub window: (f64, f64),
    /// Target accuracy of the limit on the window.
    pub tol: f64,
    /// Point where divergence is measured.
    pub probe: f64,
    /// Allowed increase `phi_{t,j+1} - phi_{t,j}` before non-monotonicity is flagged.
    pub monotone_tol: f64,
    /// Minimal decrease per unit depth counted as divergence.
    pub divergence_rate: f64,
}

impl Default for MaximalFlowConfig {
    fn default() -> Self {
        Self {
            flow: FlowConfig::default(),
            family: ApproximantFamily::default(),
            margin: 8.0,
            depth_floor: -40.0,
            window: (-1.0, 5.0),
            tol: 1e-4,
            probe: 0.0,
            monotone_tol: 1e-8,
            divergence_rate: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaximalOutcome {
    /// Finite limit. `stopped_at` is the first `j` whose increment fell below
    /// `tol / 4` on the window; `residuals` is the extrapolation residual per
    /// output time.
    Converged { stopped_at: Option<f64>, residuals: Vec<f64> },
    /// `1/(2c) >= T_max`: the flows run off to `-inf`. `rates` are the slopes
    /// of `phi_{t,j}(probe)` against the depth `m_j` and `offsets[k][i]` is
    /// `phi_{t_k,j_i}(probe) - rate_k m_{j_i}` with the rate taken as `-t`.
    Diverged {
        rates: Vec<f64>,
        offsets: Vec<Vec<f64>>,
        detected: bool,
    },
}

#[derive(Debug, Clone)]
pub struct MaximalFlow {
    pub j_list: Vec<f64>,
    pub depths: Vec<f64>,
    pub runs: Vec<FlowTrajectory>,
    /// Extrapolated limit on the shared grid; `None` in the divergent case.
    pub limit: Option<FlowTrajectory>,
    pub outcome: MaximalOutcome,
    /// Largest `phi_{t,j_{i+1}} - phi_{t,j_i}` over all nodes and times.
    pub monotonicity_defect: f64,
    pub monotone: bool,
    /// Sup over the window of `|phi_{t,j_i} - phi_{t,j_{i-1}}|`, indexed `[time][i-1]`.
    pub increments: Vec<Vec<f64>>,
}

impl MaximalFlow {
    pub fn grid(&self) -> &SGrid {
        self.runs[0].path.grid()
    }

    pub fn times(&self) -> Vec<f64> {
        self.runs[0].times()
    }

    /// `phi_{t,j}(s)` of run `i` at output index `k`.
    pub fn value(&self, i: usize, k: usize, s: f64) -> f64 {
        self.runs[i].states[k].u.value_at(s)
    }
}

/// Grid sharing the right end and spacing of `base`, extended left to `s_min`.
fn extend_left(base: &SGrid, s_min: f64) -> Result<SGrid> {
    if s_min >= base.s_min() {
        return Ok(*base);
    }
    let h = base.spacing();
    let extra = ((base.s_min() - s_min) / h - 1e-9).ceil() as usize;
    let n = base.len() + extra;
    SGrid::new(base.s_max() - (n - 1) as f64 * h, base.s_max(), n)
}

/// Builds the maximal flow of `spec` from the approximants `j_list`.
pub fn maximal_flow(
    spec: &SingularitySpec,
    geometry: &FubiniStudy,
    j_list: &[f64],
    output_times: &[f64],
    cfg: &MaximalFlowConfig,
) -> Result<MaximalFlow> {
    if j_list.is_empty() || j_list.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter("j_list must be non-empty and increasing".into()));
    }
    let family = cfg.family;
    let depths: Vec<f64> = j_list.iter().map(|&j| family.depth_of(j)).collect();
    if depths[0] < 0.0 {
        return Err(Error::InvalidParameter("approximant depths must be non-negative".into()));
    }
    let m_max = *depths.last().expect("non-empty");
    let grid = extend_left(spec.grid(), -m_max - cfg.margin)?;
    if grid.s_min() < cfg.depth_floor {
        return Err(Error::WindowGuard(format!(
            "depth {m_max} plus margin {} needs s_min = {}, below the floor {}",
            cfg.margin,
            grid.s_min(),
            cfg.depth_floor
        )));
    }
    if !(grid.s_min() < cfg.window.0 && cfg.window.0 < cfg.window.1 && cfg.window.1 <= grid.s_max()) {
        return Err(Error::WindowGuard(format!("measurement window {:?} outside the grid", cfg.window)));
    }
    let path = Arc::new(geometry.class_path(grid)?);
    let divergent = spec.pole_coefficient >= path.t_max();

    let runs: Vec<FlowTrajectory> = j_list
        .par_iter()
        .map(|&j| {
            let u0 = family.initial_data(spec, j, grid)?;
            run_flow(&u0, output_times, Arc::clone(&path), &cfg.flow)
        })
        .collect::<Result<_>>()?;

    let n_times = runs[0].states.len();
    let mut defect = f64::NEG_INFINITY;
    for pair in runs.windows(2) {
        for k in 0..n_times {
            let (a, b) = (pair[0].states[k].u.values(), pair[1].states[k].u.values());
            for (x, y) in a.iter().zip(b) {
                defect = defect.max(y - x);
            }
        }
    }
    let window = grid.window(cfg.window.0, cfg.window.1);
    let increments: Vec<Vec<f64>> = (0..n_times)
        .map(|k| {
            runs.windows(2)
                .map(|pair| {
                    let (a, b) = (pair[0].states[k].u.values(), pair[1].states[k].u.values());
                    window.clone().map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
                })
                .collect()
        })
        .collect();

    let probes: Vec<Vec<f64>> = (0..n_times)
        .map(|k| runs.iter().map(|r| r.states[k].u.value_at(cfg.probe)).collect())
        .collect();
    let detected = divergence_detected(&probes, &depths, &runs[0].times(), cfg.divergence_rate);

    let (limit, outcome) = if divergent {
        let times = runs[0].times();
        let rates = probes.iter().map(|row| slope(&depths, row)).collect();
        let offsets = probes
            .iter()
            .zip(&times)
            .map(|(row, &t)| row.iter().zip(&depths).map(|(v, m)| v + t * m).collect())
            .collect();
        (None, MaximalOutcome::Diverged { rates, offsets, detected })
    } else {
        let used = (1..runs.len())
            .find(|&i| increments.iter().skip(1).all(|row| row[i - 1] < cfg.tol / 4.0))
            .map(|i| i + 1);
        let stopped_at = used.map(|n| j_list[n - 1]);
        let used = used.unwrap_or(runs.len());
        let (limit, residuals) = extrapolate(spec, &runs[..used], &depths[..used], &path, window);
        (Some(limit), MaximalOutcome::Converged { stopped_at, residuals })
    };

    Ok(MaximalFlow {
        j_list: j_list.to_vec(),
        depths,
        monotone: defect <= cfg.monotone_tol,
        monotonicity_defect: defect,
        runs,
        limit,
        outcome,
        increments,
    })
}

/// Decrease of at least `rate` per unit depth between every pair of
/// successive approximants at every positive time, without flattening.
fn divergence_detected(probes: &[Vec<f64>], depths: &[f64], times: &[f64], rate: f64) -> bool {
    if depths.len() < 3 {
        return false;
    }
    let mut any = false;
    for (row, &t) in probes.iter().zip(times) {
        if t <= 0.0 {
            continue;
        }
        any = true;
        let drops: Vec<f64> = row
            .windows(2)
            .zip(depths.windows(2))
            .map(|(v, m)| (v[0] - v[1]) / (m[1] - m[0]))
            .collect();
        if drops.iter().any(|&d| d < rate) || drops[drops.len() - 1] < 0.5 * drops[0] {
            return false;
        }
    }
    any
}

fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    }
}

/// Largest extrapolation step, in units of the last increment.
const MAX_EXTRAPOLATION: f64 = 10.0;

/// Limit of `x` as the depth grows, from the last three samples under the
/// model `L + C m^{-r}`. Falls back to the last sample when the increments
/// do not shrink like a power law, and never moves further than
/// [`MAX_EXTRAPOLATION`] last increments.
fn power_law_limit(m: [f64; 3], x: [f64; 3]) -> f64 {
    let (d1, d2) = (x[1] - x[0], x[2] - x[1]);
    if d2 == 0.0 || d1 == 0.0 {
        return x[2];
    }
    let rho = d2 / d1;
    let ratio = |r: f64| (m[2].powf(-r) - m[1].powf(-r)) / (m[1].powf(-r) - m[0].powf(-r));
    let rho_max = (m[2] / m[1]).ln() / (m[1] / m[0]).ln();
    if !(rho > 0.0 && rho < rho_max) {
        return x[2];
    }
    let (mut lo, mut hi) = (1e-9, 60.0);
    if rho <= ratio(hi) {
        return x[2];
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ratio(mid) > rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r = 0.5 * (lo + hi);
    let c = d2 / (m[2].powf(-r) - m[1].powf(-r));
    let step = (c * m[2].powf(-r)).clamp(-MAX_EXTRAPOLATION * d2.abs(), MAX_EXTRAPOLATION * d2.abs());
    x[2] - step
}

fn extrapolate(
    spec: &SingularitySpec,
    runs: &[FlowTrajectory],
    depths: &[f64],
    path: &Arc<ClassPath>,
    window: std::ops::Range<usize>,
) -> (FlowTrajectory, Vec<f64>) {
    let grid = *path.grid();
    let n = grid.len();
    let last = runs.len() - 1;
    let mut states = Vec::with_capacity(runs[0].states.len());
    let mut residuals = Vec::with_capacity(runs[0].states.len());
    for k in 0..runs[0].states.len() {
        let t = runs[0].states[k].t;
        if t == 0.0 {
            states.push(FlowState::new(0.0, spec.profile_on(grid)));
            residuals.push(0.0);
            continue;
        }
        let column = |i: usize| runs[i].states[k].u.values();
        let triple = |end: usize, node: usize| {
            let x = [column(end - 2)[node], column(end - 1)[node], column(end)[node]];
            power_law_limit([depths[end - 2], depths[end - 1], depths[end]], x)
        };
        let mut values = Vec::with_capacity(n);
        let mut residual = 0.0_f64;
        for node in 0..n {
            let (value, previous) = match last {
                0 => (column(0)[node], column(0)[node]),
                1 => (column(1)[node], column(0)[node]),
                2 => (triple(2, node), column(2)[node]),
                _ => (triple(last, node), triple(last - 1, node)),
            };
            if window.contains(&node) {
                residual = residual.max((value - previous).abs());
            }
            values.push(value);
        }
        let tail_cells = ((1.0 / grid.spacing()).round() as usize).clamp(2, n - 1);
        let slope_minus = fit_line(&grid, &values, 0..tail_cells + 1).map_or(0.0, |(s, _)| s.max(0.0));
        let u = RadialProfile::new(grid, values, slope_minus, 0.0).expect("finite iterates");
        states.push(FlowState::new(t, u));
        residuals.push(residual);
    }
    let trajectory = FlowTrajectory {
        states,
        diagnostics: runs[last].diagnostics.clone(),
        path: Arc::clone(path),
    };
    (trajectory, residuals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::EtaSpec;

    fn fs() -> FubiniStudy {
        FubiniStudy::new(2.0, EtaSpec::Zero)
    }

    #[test]
    fn power_law_recovers_exact_model() {
        let m = [10.0, 20.0, 30.0];
        let x = m.map(|m: f64| 1.5 + 0.7 * m.powf(-1.3));
        assert!((power_law_limit(m, x) - 1.5).abs() < 1e-10);
        assert_eq!(power_law_limit(m, [1.0, 1.0, 1.0]), 1.0);
    }

    #[test]
    fn example_family_matches_closed_form_data() {
        let grid = SGrid::new(-14.0, 10.0, 241).unwrap();
        let spec = SingularitySpec::pole(2.0, grid).unwrap();
        let family = ApproximantFamily {
            sharpness: 1.0,
            depth: DepthRule::Logarithmic,
        };
        let u = family.initial_data(&spec, 100.0, grid).unwrap();
        let exact = super::super::example_initial_data(100.0, grid).unwrap();
        for (a, b) in u.values().iter().zip(exact.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bounded_data_needs_no_approximation() {
        let grid = SGrid::new(-10.0, 10.0, 161).unwrap();
        let tail = RadialProfile::from_fn(grid, 0.0, 0.0, |s| 0.3 / (1.0 + (-s).exp())).unwrap();
        let spec = SingularitySpec::new(0.0, tail.clone()).unwrap();
        let cfg = MaximalFlowConfig {
            flow: FlowConfig::fixed(1e-2, 0.5),
            margin: 0.0,
            ..Default::default()
        };
        let flow = maximal_flow(&spec, &fs(), &[1.0, 2.0, 3.0], &[0.1, 0.2], &cfg).unwrap();
        let direct = run_flow(&tail, &[0.1, 0.2], Arc::new(fs().class_path(grid).unwrap()), &cfg.flow).unwrap();
        let limit = flow.limit.unwrap();
        for (a, b) in limit.states.iter().zip(&direct.states).skip(1) {
            for (x, y) in a.u.values().iter().zip(b.u.values()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(flow.monotone);
        assert!(matches!(flow.outcome, MaximalOutcome::Converged { stopped_at: Some(_), .. }));
    }

    #[test]
    fn window_guard_rejects_deep_cutoffs() {
        let grid = SGrid::new(-10.0, 10.0, 161).unwrap();
        let spec = SingularitySpec::pole(0.2, grid).unwrap();
        let err = maximal_flow(&spec, &fs(), &[10.0, 40.0], &[0.1], &MaximalFlowConfig::default());
        assert!(matches!(err, Err(Error::WindowGuard(_))));
    }

    #[test]
    fn example_family_diverges_at_log_rate() {
        let grid = SGrid::new(-14.0, 10.0, 481).unwrap();
        let spec = SingularitySpec::pole(2.0, grid).unwrap();
        let cfg = MaximalFlowConfig {
            flow: FlowConfig::fixed(5e-3, 0.6),
            family: ApproximantFamily {
                sharpness: 1.0,
                depth: DepthRule::Logarithmic,
            },
            ..Default::default()
        };
        let flow = maximal_flow(&spec, &fs(), &[10.0, 100.0, 1000.0], &[0.25, 0.5], &cfg).unwrap();
        assert!(flow.monotone, "defect {}", flow.monotonicity_defect);
        match flow.outcome {
            MaximalOutcome::Diverged { rates, detected, .. } => {
                assert!(detected);
                assert!((rates[1] + 0.25).abs() < 0.05, "{rates:?}");
                assert!((rates[2] + 0.5).abs() < 0.05, "{rates:?}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
