//! Stage-by-stage execution of an experiment and artifact emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use krf_core::capacity::{
    cap_psi, capacity_decay, kolodziej_extinction, reverse_recursion_decay, write_decay_csv, CapProblem, DecayFunction,
    Extinction, LpCertificate,
};
use krf_core::estimates::sweep::{alternating_perturbation, random_ordered_pair, random_smooth_data, CURVATURE_BUDGET};
use krf_core::estimates::{
    check_c0_lower, check_c2, check_comparison, check_derivative_upper, check_dot_lower, check_h_f_convergence,
    check_lelong_decay, check_lower_bound, check_more_estimates, check_stability, check_upper_bound,
    check_zero_convergence, hf_pipeline, write_summary_csv, ContextParams, EstimateContext, EstimateReport, HfData,
    HfRuns, MoreEstimatesData, Normalization, ScaledProfile, StabilityRun, Verdict, Witness, NORMALIZATION,
};
use krf_core::flow::{
    example_initial_data, exact_example_solution, maximal_flow, run_flow, ApproximantFamily, DepthRule, FlowConfig,
    FlowTrajectory, MaximalFlow, MaximalFlowConfig, MaximalOutcome,
};
use krf_core::geometry::{FubiniStudy, ClassPath};
use krf_core::grid::{RadialProfile, SGrid};
use krf_core::singular::SingularitySpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{CheckSpec, ExperimentConfig, Format, InitialData};

/// Name of the marker left in a run directory whose run failed.
pub const FAILED_MARKER: &str = "FAILED";

/// Independent random streams of one seed.
const SWEEP_STREAM: u64 = 1;
const PAIR_STREAM: u64 = 2;
const CAPACITY_STREAM: u64 = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub seconds: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportEntry {
    pub file: String,
    pub theorem: String,
    pub status: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub tool: String,
    pub version: String,
    /// SHA-256 of the compact JSON of the effective config.
    pub config_hash: String,
    pub seed: u64,
    pub grid_refine: usize,
    pub status: String,
    pub stages: Vec<StageTiming>,
    pub reports: Vec<ReportEntry>,
    /// SHA-256 of every CSV, keyed by path relative to the run directory.
    pub tables: BTreeMap<String, String>,
    pub diagnostics: BTreeMap<String, Value>,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub reports: Vec<EstimateReport>,
    pub manifest: Manifest,
}

impl RunSummary {
    /// Reports with a `fails` verdict; skipped checks do not count.
    pub fn failures(&self) -> Vec<&EstimateReport> {
        self.reports.iter().filter(|r| r.failed()).collect()
    }

    pub fn by_theorem(&self, id: &str) -> Vec<&EstimateReport> {
        self.reports.iter().filter(|r| r.theorem == id).collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    sha256_hex(serde_json::to_string(config).expect("config serializes").as_bytes())
}

enum Primary {
    Single { u0: RadialProfile, traj: FlowTrajectory },
    Maximal { spec: SingularitySpec, flow: MaximalFlow },
    Sweep(Vec<FlowTrajectory>),
    Hf(HfRuns),
}

impl Primary {
    fn trajectories(&self) -> Vec<(String, &FlowTrajectory)> {
        match self {
            Self::Single { traj, .. } => vec![("trajectory".into(), traj)],
            Self::Maximal { flow, .. } => match &flow.limit {
                Some(limit) => vec![("trajectory_limit".into(), limit)],
                None => flow
                    .j_list
                    .iter()
                    .zip(&flow.runs)
                    .map(|(j, r)| (format!("trajectory_j{j}"), r))
                    .collect(),
            },
            Self::Sweep(trajs) => trajs
                .iter()
                .enumerate()
                .map(|(k, t)| (format!("trajectory_{k:02}"), t))
                .collect(),
            Self::Hf(runs) => runs
                .runs
                .iter()
                .map(|r| (format!("trajectory_j{}", r.j), &r.traj))
                .collect(),
        }
    }
}

/// Output of one stage: reports, CSV tables and manifest diagnostics.
#[derive(Default)]
struct StageOutput {
    reports: Vec<EstimateReport>,
    tables: Vec<(String, String)>,
    diagnostics: Vec<(String, Value)>,
}

impl StageOutput {
    fn report(r: EstimateReport) -> Self {
        Self {
            reports: vec![r],
            ..Self::default()
        }
    }
}

struct Session<'a> {
    cfg: &'a ExperimentConfig,
    base: PathBuf,
    geometry: FubiniStudy,
    grid: SGrid,
    flow: FlowConfig,
    primary: Option<Primary>,
    fine: Option<Primary>,
}

fn verdict_name(v: &Verdict) -> &'static str {
    match v {
        Verdict::Holds => "holds",
        Verdict::Fails => "fails",
        Verdict::Skipped { .. } => "skipped",
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn read_profile(path: &Path, grid: SGrid) -> Result<RadialProfile> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut nodes = Vec::new();
    let mut values = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(',').map(str::trim);
        let (Some(a), Some(b)) = (cols.next(), cols.next()) else {
            bail!("{}:{}: expected two columns", path.display(), k + 1);
        };
        match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(s), Ok(v)) => {
                nodes.push(s);
                values.push(v);
            }
            _ if k == 0 => continue,
            _ => bail!("{}:{}: not a number", path.display(), k + 1),
        }
    }
    if nodes.len() < 3 {
        bail!("{}: need at least three samples", path.display());
    }
    let source = SGrid::from_nodes(&nodes)?;
    let n = values.len();
    let left = (values[1] - values[0]) / (nodes[1] - nodes[0]);
    let right = (values[n - 1] - values[n - 2]) / (nodes[n - 1] - nodes[n - 2]);
    Ok(RadialProfile::new(source, values, left, right)?.resample(grid))
}

impl<'a> Session<'a> {
    fn new(cfg: &'a ExperimentConfig, base: &Path) -> Result<Self> {
        Ok(Self {
            cfg,
            base: base.to_path_buf(),
            geometry: cfg.geometry(),
            grid: cfg.grid()?,
            flow: cfg.flow.config(),
            primary: None,
            fine: None,
        })
    }

    fn path_on(&self, grid: SGrid) -> Result<Arc<ClassPath>> {
        Ok(Arc::new(self.geometry.class_path(grid)?))
    }

    fn smooth_profile(&self, data: &InitialData, grid: SGrid) -> Result<RadialProfile> {
        Ok(match *data {
            InitialData::Constant { value } => RadialProfile::constant(grid, value),
            InitialData::Bump { amplitude, width, offset } => RadialProfile::from_fn(grid, 0.0, 0.0, |s| {
                amplitude * (-s * s / (2.0 * width * width)).exp() + offset
            })?,
            InitialData::Kink { kappa, center } => RadialProfile::from_fn(grid, 0.0, 0.0, |s| {
                -kappa * (1.0 + (-(s - center).abs()).exp()).ln()
            })?,
            InitialData::ProfileFile { ref path } => read_profile(&self.base.join(path), grid)?,
            _ => bail!("{} initial data is not a single bounded profile", data.kind()),
        })
    }

    fn spec_and_config(&self, grid: SGrid) -> Result<(SingularitySpec, MaximalFlowConfig, Vec<f64>)> {
        let base = MaximalFlowConfig {
            flow: self.flow,
            ..MaximalFlowConfig::default()
        };
        Ok(match &self.cfg.initial_data {
            InitialData::Pole { a, j_list, family, window } => (
                SingularitySpec::pole(*a, grid)?,
                MaximalFlowConfig {
                    family: *family,
                    window: *window,
                    ..base
                },
                j_list.clone(),
            ),
            InitialData::ExampleFamily { j_list } => (
                SingularitySpec::pole(2.0, grid)?,
                MaximalFlowConfig {
                    family: ApproximantFamily {
                        sharpness: 1.0,
                        depth: DepthRule::Logarithmic,
                    },
                    ..base
                },
                j_list.clone(),
            ),
            other => bail!("{} initial data has no pole", other.kind()),
        })
    }

    fn compute_primary(&self, grid: SGrid, flow: FlowConfig) -> Result<Primary> {
        let times = &self.cfg.flow.times;
        let data = &self.cfg.initial_data;
        Ok(match data {
            InitialData::Pole { .. } | InitialData::ExampleFamily { .. } => {
                let (spec, mcfg, j_list) = self.spec_and_config(grid)?;
                let mcfg = MaximalFlowConfig { flow, ..mcfg };
                let flow = maximal_flow(&spec, &self.geometry, &j_list, times, &mcfg)?;
                Primary::Maximal { spec, flow }
            }
            InitialData::Hf {
                minus_pole,
                scale,
                j_list,
                gap_region,
            } => {
                let hf = HfData {
                    minus_pole: *minus_pole,
                    scale: *scale,
                };
                Primary::Hf(hf_pipeline(&hf, &self.geometry, grid, j_list, times, &flow, *gap_region)?)
            }
            InitialData::RandomSweep { samples } => {
                let path = self.path_on(grid)?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
                rng.set_stream(SWEEP_STREAM);
                let data: Vec<RadialProfile> = (0..*samples)
                    .map(|_| random_smooth_data(grid, path.omega_density(), CURVATURE_BUDGET, &mut rng))
                    .collect();
                let trajs: Result<Vec<FlowTrajectory>> = data
                    .par_iter()
                    .map(|u0| Ok(run_flow(u0, times, Arc::clone(&path), &flow)?))
                    .collect();
                Primary::Sweep(trajs?)
            }
            _ => {
                let u0 = self.smooth_profile(data, grid)?;
                let traj = run_flow(&u0, times, self.path_on(grid)?, &flow)?;
                Primary::Single { u0, traj }
            }
        })
    }

    fn ensure_primary(&mut self) -> Result<&Primary> {
        if self.primary.is_none() {
            self.primary = Some(self.compute_primary(self.grid, self.flow)?);
        }
        Ok(self.primary.as_ref().expect("primary computed"))
    }

    /// The primary run once more with half the grid spacing and time step.
    fn ensure_fine(&mut self) -> Result<()> {
        self.ensure_primary()?;
        if self.fine.is_none() {
            let flow = FlowConfig {
                dt_init: self.flow.dt_init / 2.0,
                ..self.flow
            };
            self.fine = Some(self.compute_primary(self.grid.refined(2), flow)?);
        }
        Ok(())
    }

    fn primary_diagnostics(&self) -> Vec<(String, Value)> {
        let Some(p) = &self.primary else { return Vec::new() };
        let mut out = Vec::new();
        match p {
            Primary::Single { traj, .. } => out.push(("solver".into(), json!(traj.diagnostics))),
            Primary::Maximal { flow, .. } => {
                out.push(("maximal_outcome".into(), json!(flow.outcome)));
                out.push(("maximal_monotone".into(), json!(flow.monotone)));
                out.push(("maximal_monotonicity_defect".into(), json!(flow.monotonicity_defect)));
                out.push(("maximal_grid".into(), json!(flow.grid())));
                let iters: Vec<usize> = flow.runs.iter().map(|r| r.diagnostics.total_newton_iterations()).collect();
                out.push(("newton_iterations".into(), json!(iters)));
            }
            Primary::Sweep(trajs) => {
                let iters: Vec<usize> = trajs.iter().map(|r| r.diagnostics.total_newton_iterations()).collect();
                out.push(("newton_iterations".into(), json!(iters)));
            }
            Primary::Hf(runs) => {
                out.push(("hf_initial_gaps".into(), json!(runs.initial_gaps)));
            }
        }
        out
    }

    fn run_check(&mut self, check: &CheckSpec) -> Result<StageOutput> {
        match check {
            CheckSpec::ExactRegression {
                j_list,
                times,
                tol,
                halving_band,
            } => self.exact_regression(j_list, times, *tol, *halving_band),
            CheckSpec::TmaxObstruction { t, probe, variation_tol } => self.obstruction(*t, *probe, *variation_tol),
            CheckSpec::Comparison { pairs } => self.comparison(*pairs),
            CheckSpec::UpperBound | CheckSpec::DerivativeUpper => {
                let upper = matches!(check, CheckSpec::UpperBound);
                let primary = self.ensure_primary()?;
                let reports: Result<Vec<EstimateReport>> = primary
                    .trajectories()
                    .into_iter()
                    .map(|(name, traj)| {
                        let mut r = if upper {
                            check_upper_bound(traj)?
                        } else {
                            check_derivative_upper(traj)?
                        };
                        r.notes.push(format!("run: {name}"));
                        Ok(r)
                    })
                    .collect();
                Ok(StageOutput {
                    reports: reports?,
                    ..StageOutput::default()
                })
            }
            CheckSpec::LelongDecay { params } => {
                self.ensure_fine()?;
                let (Some(Primary::Maximal { spec, flow }), Some(Primary::Maximal { flow: fine, .. })) =
                    (&self.primary, &self.fine)
                else {
                    bail!("lelong decay needs a maximal flow");
                };
                let params = params.unwrap_or_default();
                let r = check_lelong_decay(flow, Some(fine), spec, &self.geometry, &params)?;
                Ok(StageOutput::report(r))
            }
            CheckSpec::SequenceIndependence { family, times, tol } => self.sequence_independence(*family, times, *tol),
            CheckSpec::C0Lower { context } | CheckSpec::DotLower { context } | CheckSpec::C2 { context } => {
                self.regularity(check, *context)
            }
            CheckSpec::MoreEstimates {
                phi1,
                phi2,
                delta,
                c1,
                t_end,
            } => {
                let (spec, ctx) = self.context(None)?;
                let data = MoreEstimatesData {
                    phi1: ScaledProfile {
                        spec: spec.clone(),
                        scale: phi1.scale,
                        shift: phi1.shift,
                    },
                    phi2: ScaledProfile {
                        spec: spec.clone(),
                        scale: phi2.scale,
                        shift: phi2.shift,
                    },
                    delta: *delta,
                    c1: c1.unwrap_or(1.0 / spec.pole_coefficient),
                    t_end: t_end.unwrap_or(ctx.params.t_big),
                };
                let (coarse, fine) = self.runs_for(&ctx)?;
                let r = check_more_estimates(&refs(&coarse), &refs(&fine), &data)?;
                Ok(StageOutput::report(r))
            }
            CheckSpec::LowerBound { beta, region } => {
                let primary = self.ensure_primary()?;
                let r = match primary {
                    Primary::Single { u0, traj } => check_lower_bound(traj, u0, *beta, *region)?,
                    Primary::Maximal { spec, flow } => match &flow.limit {
                        Some(limit) => check_lower_bound(limit, &spec.profile_on(*limit.path.grid()), *beta, *region)?,
                        None => EstimateReport::skipped("lower_bound", "maximal flow diverged; no limit to bound"),
                    },
                    _ => bail!("lower bound needs a single datum or a pole"),
                };
                Ok(StageOutput::report(r))
            }
            CheckSpec::Stability { j_list, t, tol } => self.stability(j_list, *t, *tol),
            CheckSpec::ZeroConvergence { params, datum } => {
                let mut r = match datum {
                    Some(d) => {
                        let u0 = self.smooth_profile(d, self.grid)?;
                        let mut times = params.times();
                        times.reverse();
                        let flow = FlowConfig {
                            t_end: params.t0,
                            ..self.flow
                        };
                        let traj = run_flow(&u0, &times, self.path_on(self.grid)?, &flow)?;
                        let mut r = check_zero_convergence(&traj, &u0, params)?;
                        r.notes.push(format!("datum: {}", d.kind()));
                        r
                    }
                    None => match self.ensure_primary()? {
                        Primary::Single { u0, traj } => check_zero_convergence(traj, u0, params)?,
                        Primary::Maximal { spec, flow } => match &flow.limit {
                            Some(limit) => check_zero_convergence(limit, &spec.profile_on(*limit.path.grid()), params)?,
                            None => EstimateReport::skipped("zero_convergence", "maximal flow diverged"),
                        },
                        _ => bail!("zero convergence needs a single datum or a pole"),
                    },
                };
                if datum.is_none() {
                    r.notes.push(format!("datum: {}", self.cfg.initial_data.kind()));
                }
                Ok(StageOutput::report(r))
            }
            CheckSpec::HfConvergence { params } => match self.ensure_primary()? {
                Primary::Hf(runs) => {
                    let r = check_h_f_convergence(runs, params)?;
                    Ok(StageOutput::report(r))
                }
                _ => bail!("h_f convergence needs hf initial data"),
            },
            CheckSpec::CapacityExactness { tol } => self.capacity_exactness(*tol),
            CheckSpec::CapacityMonotone { pairs } => self.capacity_monotone(*pairs),
            CheckSpec::CapacityDecay { levels } => self.capacity_decay(levels),
            CheckSpec::KolodziejExtinction {
                c,
                t0,
                theta,
                levels,
                dt,
                t_end,
            } => {
                let d = reverse_recursion_decay(*c, *t0, *theta, *levels, *dt, *t_end)?;
                Ok(kolodziej_stage("kolodziej_extinction", &d, *t0, true))
            }
            CheckSpec::KolodziejWitness { t0, dt, t_end } => {
                let count = (t_end / dt).round() as usize + 1;
                let times: Vec<f64> = (0..count).map(|k| k as f64 * dt).collect();
                let values = times.iter().map(|t| (-t).exp()).collect();
                let d = DecayFunction::with_fitted_constant(times, values)?;
                Ok(kolodziej_stage("kolodziej_witness", &d, *t0, false))
            }
        }
    }

    fn exact_regression(&self, j_list: &[f64], times: &[f64], tol: f64, band: f64) -> Result<StageOutput> {
        let grid = self.grid;
        let path = self.path_on(grid)?;
        let t_end = times[times.len() - 1];
        let dt = self.flow.dt_init;
        let runs: Result<Vec<(FlowTrajectory, FlowTrajectory)>> = j_list
            .par_iter()
            .map(|&j| {
                let u0 = example_initial_data(j, grid)?;
                let run = |dt: f64| run_flow(&u0, times, Arc::clone(&path), &FlowConfig { dt_init: dt, t_end, ..self.flow });
                Ok((run(dt)?, run(dt / 2.0)?))
            })
            .collect();
        let runs = runs?;
        let mut report = EstimateReport::new("exact_regression");
        let mut csv = String::from("j,t,error,error_half_dt,ratio\n");
        let (mut worst, mut at) = (0.0_f64, Witness { t: 0.0, s: 0.0 });
        let (mut rmin, mut rmax) = (f64::INFINITY, f64::NEG_INFINITY);
        let nodes = grid.nodes();
        for (&j, (a, b)) in j_list.iter().zip(&runs) {
            for &t in times {
                let exact = exact_example_solution(j, t, grid)?;
                let ua = &a.at(t).ok_or_else(|| anyhow!("missing output time {t}"))?.u;
                let ub = &b.at(t).ok_or_else(|| anyhow!("missing output time {t}"))?.u;
                let ea = sup_diff(ua.values(), exact.values());
                let eb = sup_diff(ub.values(), exact.values());
                if ea > worst {
                    worst = ea;
                    let i = (0..grid.len())
                        .max_by(|&x, &y| {
                            (ua.get(x) - exact.get(x)).abs().total_cmp(&(ua.get(y) - exact.get(y)).abs())
                        })
                        .unwrap_or(0);
                    at = Witness { t, s: nodes[i] };
                }
                let ratio = ea / eb;
                if ea > 1e-10 {
                    rmin = rmin.min(ratio);
                    rmax = rmax.max(ratio);
                }
                csv.push_str(&format!("{j:?},{t:?},{ea:?},{eb:?},{ratio:?}\n"));
            }
        }
        report.constant("max_error", worst);
        report.constant("tol", tol);
        report.constant("dt", dt);
        report.constant("min_halving_ratio", rmin);
        report.constant("max_halving_ratio", rmax);
        report.margin = Some(tol - worst);
        report.witness = Some(at);
        let halving = rmin >= 2.0 * (1.0 - band) && rmax <= 2.0 * (1.0 + band);
        if !halving {
            report.notes.push(format!("error ratio under dt/2 in [{rmin}, {rmax}], outside 2(1 ± {band})"));
        }
        Ok(StageOutput {
            reports: vec![report.conclude(worst <= tol && halving)],
            tables: vec![("exact_regression.csv".into(), csv)],
            ..StageOutput::default()
        })
    }

    fn obstruction(&mut self, t: f64, probe: f64, tol: f64) -> Result<StageOutput> {
        let Primary::Maximal { spec, flow } = self.ensure_primary()? else {
            bail!("the obstruction check needs the example family");
        };
        let mut report = EstimateReport::new("t_max_obstruction");
        report.constant("pole_coefficient", spec.pole_coefficient);
        report.constant("t_max", flow.runs[0].path.t_max());
        let mut phis = Vec::new();
        let mut offsets = Vec::new();
        for (run, &m) in flow.runs.iter().zip(&flow.depths) {
            let state = run.at(t).ok_or_else(|| anyhow!("missing output time {t}"))?;
            let v = state.u.value_at(probe);
            phis.push(v);
            offsets.push(v + t * m);
        }
        let (lo, hi) = offsets.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let spread = hi - lo;
        let mean = offsets.iter().sum::<f64>() / offsets.len() as f64;
        let depth_range = flow.depths[flow.depths.len() - 1] - flow.depths[0];
        let drift = spread / (t * depth_range);
        let relative = spread / mean.abs();
        let decreasing = phis.windows(2).all(|w| w[1] < w[0]);
        let detected = matches!(flow.outcome, MaximalOutcome::Diverged { detected: true, .. });
        report.constant("offset_spread", spread);
        report.constant("drift_normalized_variation", drift);
        report.constant("relative_variation", relative);
        report.constant("variation_tol", tol);
        report.constant("divergence_detected", if detected { 1.0 } else { 0.0 });
        report.margin = Some(tol - drift);
        report.notes.push(format!(
            "offsets phi_t(probe) + t m_j vary by {spread:.4} against a drift t (m_max - m_min) = {:.4}; relative to their mean the variation is {:.1}%",
            t * depth_range,
            100.0 * relative
        ));
        if !decreasing {
            report.notes.push("phi_{t,j}(probe) does not decrease in j".into());
        }
        report.series.insert("j".into(), flow.j_list.clone());
        report.series.insert("phi".into(), phis);
        report.series.insert("offset".into(), offsets);
        Ok(StageOutput::report(report.conclude(drift <= tol && decreasing && detected)))
    }

    fn comparison(&self, pairs: usize) -> Result<StageOutput> {
        let grid = self.grid;
        let path = self.path_on(grid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(PAIR_STREAM);
        let data: Vec<(RadialProfile, RadialProfile)> =
            (0..pairs).map(|_| random_ordered_pair(grid, path.omega_density(), &mut rng)).collect();
        let times = &self.cfg.flow.times;
        let reports: Result<Vec<EstimateReport>> = data
            .par_iter()
            .enumerate()
            .map(|(k, (u0, v0))| {
                let a = run_flow(u0, times, Arc::clone(&path), &self.flow)?;
                let b = run_flow(v0, times, Arc::clone(&path), &self.flow)?;
                let mut r = check_comparison(&a, &b)?;
                r.notes.push(format!("pair {k}"));
                Ok(r)
            })
            .collect();
        Ok(StageOutput {
            reports: reports?,
            ..StageOutput::default()
        })
    }

    fn sequence_independence(&mut self, family: ApproximantFamily, times: &[f64], tol: f64) -> Result<StageOutput> {
        let grid = self.grid;
        let (spec, mcfg, j_list) = self.spec_and_config(grid)?;
        let second = maximal_flow(&spec, &self.geometry, &j_list, &self.cfg.flow.times, &MaximalFlowConfig { family, ..mcfg })?;
        let Primary::Maximal { flow: first, .. } = self.ensure_primary()? else {
            bail!("sequence independence needs a pole");
        };
        let mut report = EstimateReport::new("sequence_independence");
        let (Some(a), Some(b)) = (&first.limit, &second.limit) else {
            return Ok(StageOutput::report(EstimateReport::skipped(
                "sequence_independence",
                "a maximal flow diverged",
            )));
        };
        let agrid = *a.path.grid();
        let nodes = agrid.nodes();
        let range = agrid.window(mcfg.window.0, mcfg.window.1);
        let mut dists = Vec::new();
        let (mut worst, mut at) = (0.0_f64, Witness { t: 0.0, s: 0.0 });
        for &t in times {
            let ua = &a.at(t).ok_or_else(|| anyhow!("missing output time {t}"))?.u;
            let ub = &b.at(t).ok_or_else(|| anyhow!("missing output time {t}"))?.u;
            let mut d = 0.0_f64;
            for i in range.clone() {
                let e = (ua.get(i) - ub.value_at(nodes[i])).abs();
                if e > d {
                    d = e;
                    if e > worst {
                        worst = e;
                        at = Witness { t, s: nodes[i] };
                    }
                }
            }
            dists.push(d);
        }
        report.constant("max_distance", worst);
        report.constant("tol", tol);
        report.constant("family_sharpness", family.sharpness);
        report.margin = Some(tol - worst);
        report.witness = Some(at);
        report.series.insert("t".into(), times.to_vec());
        report.series.insert("sup_distance".into(), dists);
        Ok(StageOutput::report(report.conclude(worst <= tol)))
    }

    fn context(&mut self, params: Option<ContextParams>) -> Result<(SingularitySpec, EstimateContext)> {
        let Primary::Maximal { spec, flow } = self.ensure_primary()? else {
            bail!("regularity estimates need a pole or the example family");
        };
        let path = &flow.runs[0].path;
        let norm = Normalization::of(path, NORMALIZATION.0, NORMALIZATION.1);
        let params = params.unwrap_or_else(|| ContextParams::auto(spec.pole_coefficient, path.t_max(), norm.horizon));
        let ctx = EstimateContext::new(spec, path, params);
        Ok((spec.clone(), ctx))
    }

    /// Approximant runs for the fit and, unless a hypothesis already fails, the refined runs for verification.
    fn runs_for(&mut self, ctx: &EstimateContext) -> Result<(Vec<FlowTrajectory>, Vec<FlowTrajectory>)> {
        if ctx.blocker().is_none() {
            self.ensure_fine()?;
        }
        let runs = |p: &Option<Primary>| match p {
            Some(Primary::Maximal { flow, .. }) => flow.runs.clone(),
            _ => Vec::new(),
        };
        Ok((runs(&self.primary), runs(&self.fine)))
    }

    fn regularity(&mut self, check: &CheckSpec, params: Option<ContextParams>) -> Result<StageOutput> {
        let (_, ctx) = self.context(params)?;
        let (coarse, fine) = self.runs_for(&ctx)?;
        let (c, f) = (refs(&coarse), refs(&fine));
        let r = match check {
            CheckSpec::C0Lower { .. } => check_c0_lower(&c, &f, &ctx)?,
            CheckSpec::DotLower { .. } => check_dot_lower(&c, &f, &ctx)?,
            _ => check_c2(&c, &f, &ctx)?,
        };
        Ok(StageOutput {
            reports: vec![r],
            diagnostics: vec![(format!("{}_context", check.id()), json!(ctx))],
            ..StageOutput::default()
        })
    }

    fn stability(&self, j_list: &[f64], t: f64, tol: f64) -> Result<StageOutput> {
        let grid = self.grid;
        let path = self.path_on(grid)?;
        let phi0 = self.smooth_profile(&self.cfg.initial_data, grid)?;
        let flow = FlowConfig { t_end: t, ..self.flow };
        let reference = run_flow(&phi0, &[t], Arc::clone(&path), &flow)?;
        let runs: Result<Vec<StabilityRun>> = j_list
            .par_iter()
            .map(|&j| {
                let u0 = phi0.axpy(1.0, &alternating_perturbation(grid, j))?;
                Ok(StabilityRun {
                    j,
                    traj: run_flow(&u0, &[t], Arc::clone(&path), &flow)?,
                })
            })
            .collect();
        Ok(StageOutput::report(check_stability(&runs?, &reference, t, tol)?))
    }

    fn weight(&self) -> Result<RadialProfile> {
        Ok(match &self.cfg.initial_data {
            InitialData::Pole { a, .. } => SingularitySpec::pole(*a, self.grid)?.profile(),
            _ => RadialProfile::zeros(self.grid),
        })
    }

    /// Exactness on bounded weights; a pole weight loses the mass cut off at the left end of the grid.
    fn capacity_exactness(&self, tol: f64) -> Result<StageOutput> {
        let bg = self.geometry.build(self.grid)?;
        let bump = RadialProfile::from_fn(self.grid, 0.0, 0.0, |s| 0.15 * (-s * s / 2.0).exp())?;
        let mut report = EstimateReport::new("capacity_exactness");
        report.constant("mass_omega", bg.mass_omega);
        let mut worst = 0.0_f64;
        let mut diagnostics = Vec::new();
        for (name, psi) in [("zero", RadialProfile::zeros(self.grid)), ("bump", bump)] {
            let res = cap_psi(&CapProblem::all(psi), &bg)?;
            let err = (res.value - bg.mass_omega).abs();
            worst = worst.max(err);
            report.constant(&format!("capacity_{name}"), res.value);
            report.constant(&format!("lp_residual_{name}"), res.certificate.worst());
            report.constant(&format!("pivots_{name}"), res.pivots as f64);
            diagnostics.push((format!("capacity_all_{name}_certificate"), json!(res.certificate)));
        }
        report.constant("error", worst);
        report.margin = Some(tol - worst);
        Ok(StageOutput {
            reports: vec![report.conclude(worst <= tol)],
            diagnostics,
            ..StageOutput::default()
        })
    }

    fn capacity_monotone(&self, pairs: usize) -> Result<StageOutput> {
        let bg = self.geometry.build(self.grid)?;
        let psi = self.weight()?;
        let n = self.grid.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(CAPACITY_STREAM);
        let sets: Vec<(Vec<usize>, Vec<usize>)> = (0..pairs)
            .map(|_| {
                let density = rng.gen_range(0.2..0.8);
                let big: Vec<usize> = (0..n).filter(|_| rng.gen_bool(density)).collect();
                let small: Vec<usize> = big.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
                (small, big)
            })
            .collect();
        let caps: Result<Vec<(f64, f64, LpCertificate)>> = sets
            .par_iter()
            .map(|(small, big)| {
                let a = cap_psi(&CapProblem::new(psi.clone(), small.clone())?, &bg)?;
                let b = cap_psi(&CapProblem::new(psi.clone(), big.clone())?, &bg)?;
                let cert = if a.certificate.worst() > b.certificate.worst() { a.certificate } else { b.certificate };
                Ok((a.value, b.value, cert))
            })
            .collect();
        let caps = caps?;
        let mut report = EstimateReport::new("capacity_monotone");
        let margin = caps.iter().map(|(a, b, _)| b - a).fold(f64::INFINITY, f64::min);
        let residual = caps.iter().map(|(_, _, c)| c.worst()).fold(0.0, f64::max);
        report.constant("pairs", pairs as f64);
        report.constant("worst_lp_residual", residual);
        report.margin = Some(margin);
        report.series.insert("cap_small".into(), caps.iter().map(|c| c.0).collect());
        report.series.insert("cap_large".into(), caps.iter().map(|c| c.1).collect());
        Ok(StageOutput::report(report.conclude(margin >= -1e-9)))
    }

    fn capacity_decay(&self, levels: &[f64]) -> Result<StageOutput> {
        let bg = self.geometry.build(self.grid)?;
        let phi = self.weight()?;
        let psi = RadialProfile::zeros(self.grid);
        let caps = capacity_decay(&phi, &psi, &bg, levels)?;
        let mut csv = Vec::new();
        write_decay_csv(levels, &caps, &mut csv)?;
        let mut report = EstimateReport::new("capacity_decay");
        let rise = caps.windows(2).map(|w| w[1] - w[0]).fold(0.0_f64, f64::max);
        report.constant("largest_increase", rise);
        report.margin = Some(-rise);
        report.series.insert("t".into(), levels.to_vec());
        report.series.insert("cap".into(), caps);
        Ok(StageOutput {
            reports: vec![report.conclude(rise <= 1e-9)],
            tables: vec![("capacity_decay_levels.csv".into(), String::from_utf8(csv)?)],
            ..StageOutput::default()
        })
    }
}

fn refs(v: &[FlowTrajectory]) -> Vec<&FlowTrajectory> {
    v.iter().collect()
}

fn kolodziej_stage(id: &str, d: &DecayFunction, t0: f64, expect_extinction: bool) -> StageOutput {
    let outcome = kolodziej_extinction(d, t0);
    let mut report = EstimateReport::new(id);
    report.constant("C", d.constant);
    report.constant("t0", t0);
    let extinct = match &outcome {
        Extinction::Verified { t_star, checked } => {
            report.constant("t_star", *t_star);
            report.constant("checked_samples", *checked as f64);
            true
        }
        Extinction::Witness(w) => {
            report.notes.push(format!("witness: {}", serde_json::to_string(w).expect("witness serializes")));
            false
        }
    };
    report.series.insert("t".into(), d.times.clone());
    report.series.insert("g".into(), d.values.clone());
    StageOutput {
        reports: vec![report.conclude(extinct == expect_extinction)],
        diagnostics: vec![(format!("{id}_outcome"), json!(outcome))],
        ..StageOutput::default()
    }
}

/// CSV of the report series when they share one length.
fn series_csv(r: &EstimateReport) -> Option<String> {
    let len = r.series.values().next()?.len();
    if len == 0 || r.series.values().any(|v| v.len() != len) {
        return None;
    }
    let mut names: Vec<&str> = r.series.keys().map(String::as_str).collect();
    names.sort_by_key(|n| !matches!(*n, "t" | "j"));
    let mut out = names.join(",");
    out.push('\n');
    for i in 0..len {
        let row: Vec<String> = names.iter().map(|n| format!("{:?}", r.series[*n][i])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Some(out)
}

struct Writer {
    dir: PathBuf,
    csv: bool,
    json: bool,
    tables: BTreeMap<String, String>,
    entries: Vec<ReportEntry>,
}

impl Writer {
    fn table(&mut self, name: &str, body: &str) -> Result<()> {
        if !self.csv {
            return Ok(());
        }
        let rel = format!("tables/{name}");
        fs::write(self.dir.join(&rel), body).with_context(|| format!("cannot write {rel}"))?;
        self.tables.insert(rel, sha256_hex(body.as_bytes()));
        Ok(())
    }

    fn report(&mut self, stem: &str, r: &EstimateReport) -> Result<()> {
        let rel = format!("reports/{stem}.json");
        if self.json {
            let body = serde_json::to_string_pretty(r)?;
            fs::write(self.dir.join(&rel), body).with_context(|| format!("cannot write {rel}"))?;
        }
        if let Some(csv) = series_csv(r) {
            self.table(&format!("{stem}.csv"), &csv)?;
        }
        self.entries.push(ReportEntry {
            file: rel,
            theorem: r.theorem.clone(),
            status: verdict_name(&r.verdict).into(),
        });
        Ok(())
    }
}

/// Runs `config` into `out`; `base` resolves relative paths in the config.
pub fn run(config: &ExperimentConfig, out: &Path, base: &Path, grid_refine: usize) -> Result<RunSummary> {
    let effective = config.refined(grid_refine.max(1));
    effective.validate(base).context("config validation failed")?;
    for sub in ["reports", "tables"] {
        fs::create_dir_all(out.join(sub)).with_context(|| format!("cannot create {}", out.display()))?;
    }
    let _ = fs::remove_file(out.join(FAILED_MARKER));
    let mut manifest = Manifest {
        name: effective.name.clone(),
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: config_hash(&effective),
        seed: effective.seed,
        grid_refine: grid_refine.max(1),
        status: "running".into(),
        stages: Vec::new(),
        reports: Vec::new(),
        tables: BTreeMap::new(),
        diagnostics: BTreeMap::new(),
        config: effective.clone(),
    };
    fs::write(out.join("config.json"), effective.to_json())?;
    let mut writer = Writer {
        dir: out.to_path_buf(),
        csv: effective.output.wants(Format::Csv),
        json: effective.output.wants(Format::Json),
        tables: BTreeMap::new(),
        entries: Vec::new(),
    };
    let mut reports = Vec::new();
    let result = execute(&effective, base, &mut writer, &mut manifest, &mut reports);
    manifest.tables = std::mem::take(&mut writer.tables);
    manifest.reports = std::mem::take(&mut writer.entries);
    manifest.status = match &result {
        Err(_) => "error".into(),
        Ok(()) if reports.iter().any(EstimateReport::failed) => "checks_failed".into(),
        Ok(()) => "ok".into(),
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    if let Err(e) = result {
        fs::write(out.join(FAILED_MARKER), format!("{e:#}\n"))?;
        return Err(e);
    }
    Ok(RunSummary {
        dir: out.to_path_buf(),
        reports,
        manifest,
    })
}

fn timed<T>(manifest: &mut Manifest, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let result = f();
    manifest.stages.push(StageTiming {
        name: name.into(),
        seconds: start.elapsed().as_secs_f64(),
        ok: result.is_ok(),
    });
    result.with_context(|| format!("stage `{name}` failed"))
}

fn execute(
    cfg: &ExperimentConfig,
    base: &Path,
    writer: &mut Writer,
    manifest: &mut Manifest,
    reports: &mut Vec<EstimateReport>,
) -> Result<()> {
    let mut session = timed(manifest, "setup", || Session::new(cfg, base))?;
    if cfg.output.trajectories || cfg.checks.is_empty() {
        timed(manifest, "trajectories", || session.ensure_primary().map(|_| ()))?;
        timed(manifest, "export", || {
            let Some(p) = &session.primary else { return Ok(()) };
            for (name, traj) in p.trajectories() {
                let mut body = Vec::new();
                traj.write_csv(&mut body)?;
                writer.table(&format!("{name}.csv"), &String::from_utf8(body)?)?;
            }
            if let Primary::Hf(runs) = p {
                writer.table("hf_phi0.csv", &runs.phi0.to_csv_string())?;
            }
            Ok(())
        })?;
    }
    for (k, check) in cfg.checks.iter().enumerate() {
        let id = check.id();
        let output = timed(manifest, id, || session.run_check(check))?;
        let multi = output.reports.len() > 1;
        for (i, r) in output.reports.iter().enumerate() {
            let stem = if multi { format!("{k:02}_{id}_{i:02}") } else { format!("{k:02}_{id}") };
            writer.report(&stem, r)?;
        }
        for (name, body) in &output.tables {
            writer.table(name, body)?;
        }
        for (key, value) in output.diagnostics {
            manifest.diagnostics.insert(key, value);
        }
        reports.extend(output.reports);
    }
    for (key, value) in session.primary_diagnostics() {
        manifest.diagnostics.insert(key, value);
    }
    if !reports.is_empty() {
        let mut body = Vec::new();
        write_summary_csv(reports, &mut body)?;
        writer.table("summary.csv", &String::from_utf8(body)?)?;
    }
    Ok(())
}
