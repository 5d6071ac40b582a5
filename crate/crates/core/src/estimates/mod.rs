//! Executable checks of the a priori estimates and qualitative theorems.
//!
//! Every check reads trajectories and returns an [`EstimateReport`]. Ordering
//! statements are asserted nodewise with [`ORDERING_TOL`]. Statements with
//! uncontrolled constants follow fit-then-verify: the constant is fitted on a
//! coarse run, relaxed by a factor of two and verified on a refined run.

mod basic;
mod convergence;
mod regularity;
mod singular_checks;
pub mod sweep;

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow::FlowTrajectory;
use crate::geometry::ClassPath;
use crate::grid::{RadialProfile, SGrid};
use crate::singular::{equisingular_approx, skoda_check, IntegrabilityCertificate, SingularitySpec};

pub use basic::{check_comparison, check_derivative_upper, check_upper_bound};
pub use convergence::{
    check_h_f_convergence, check_stability, check_zero_convergence, hf_pipeline, HfData, HfRuns,
    StabilityRun, ZeroBranch, ZeroConvergenceParams,
};
pub use regularity::{check_c0_lower, check_c2, check_dot_lower, check_more_estimates, MoreEstimatesData, ScaledProfile};
pub use singular_checks::{check_lelong_decay, check_lower_bound, LelongDecayParams};

/// Tolerance of nodewise ordering statements.
pub const ORDERING_TOL: f64 = 1e-8;
/// Tolerance of constant-free bounds.
pub const BOUND_TOL: f64 = 1e-6;
/// Relative tolerance of quantitative bounds after refinement.
pub const QUANT_RTOL: f64 = 1e-4;
/// Fitted constants below this size are compared in absolute terms.
pub const CONSTANT_FLOOR: f64 = 1e-2;
/// Lower and upper ends of the window `lower omega <= theta_t <= upper omega`.
pub const NORMALIZATION: (f64, f64) = (2.0 / 3.0, 2.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Verdict {
    Holds,
    Fails,
    Skipped { reason: String },
}

/// Sample attaining the worst margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub t: f64,
    pub s: f64,
}

/// Time window on which `lower omega <= theta_t <= upper omega`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub lower: f64,
    pub upper: f64,
    pub horizon: f64,
}

impl Normalization {
    pub fn of(path: &ClassPath, lower: f64, upper: f64) -> Self {
        Self {
            lower,
            upper,
            horizon: path.normalization_horizon(lower, upper, path.t_max()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub theorem: String,
    pub verdict: Verdict,
    pub constants: BTreeMap<String, f64>,
    /// Worst margin over all samples; negative values are violations.
    pub margin: Option<f64>,
    pub witness: Option<Witness>,
    pub refinement_stable: Option<bool>,
    pub normalization: Option<Normalization>,
    /// Measured series such as `t` and `nu`.
    pub series: BTreeMap<String, Vec<f64>>,
    pub notes: Vec<String>,
}

impl EstimateReport {
    pub fn new(theorem: &str) -> Self {
        Self {
            theorem: theorem.to_string(),
            verdict: Verdict::Holds,
            constants: BTreeMap::new(),
            margin: None,
            witness: None,
            refinement_stable: None,
            normalization: None,
            series: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    pub fn skipped(theorem: &str, reason: impl Into<String>) -> Self {
        let mut r = Self::new(theorem);
        r.verdict = Verdict::Skipped { reason: reason.into() };
        r
    }

    pub fn holds(&self) -> bool {
        self.verdict == Verdict::Holds
    }

    pub fn failed(&self) -> bool {
        self.verdict == Verdict::Fails
    }

    pub fn is_skipped(&self) -> bool {
        matches!(self.verdict, Verdict::Skipped { .. })
    }

    pub fn skip_reason(&self) -> Option<&str> {
        match &self.verdict {
            Verdict::Skipped { reason } => Some(reason),
            _ => None,
        }
    }

    pub fn constant(&mut self, name: &str, value: f64) {
        self.constants.insert(name.to_string(), value);
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    pub(crate) fn record(&mut self, margin: &Margin) {
        if margin.value.is_finite() {
            let worse = self.margin.map_or(true, |m| margin.value < m);
            if worse {
                self.margin = Some(margin.value);
                self.witness = margin.witness;
            }
        }
    }

    pub(crate) fn stable(&mut self, stable: bool) {
        self.refinement_stable = Some(self.refinement_stable.unwrap_or(true) && stable);
    }

    /// Sets the verdict; an unstable refinement also fails.
    pub fn conclude(mut self, ok: bool) -> Self {
        let ok = ok && self.refinement_stable != Some(false);
        self.verdict = if ok { Verdict::Holds } else { Verdict::Fails };
        self
    }
}

/// Running minimum of a margin with the sample that attains it.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Margin {
    pub value: f64,
    pub witness: Option<Witness>,
}

impl Margin {
    pub fn new() -> Self {
        Self {
            value: f64::INFINITY,
            witness: None,
        }
    }

    pub fn update(&mut self, value: f64, t: f64, s: f64) {
        if value < self.value || value.is_nan() {
            self.value = value;
            self.witness = Some(Witness { t, s });
        }
    }

    pub fn at_least(&self, tol: f64) -> bool {
        !(self.value < -tol) && !self.value.is_nan()
    }
}

/// A fitted constant with the sample that forces it.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Fit {
    pub value: f64,
    pub witness: Option<Witness>,
}

/// Smallest `C` with `demand <= C` over the samples of `trajs` whose time lies
/// in `window`. `demand(traj, k)` returns one value per node.
pub(crate) fn fit_max(
    trajs: &[&FlowTrajectory],
    window: (f64, f64),
    demand: impl Fn(&FlowTrajectory, usize) -> Result<Vec<f64>>,
) -> Result<Fit> {
    let mut best = Fit {
        value: f64::NEG_INFINITY,
        witness: None,
    };
    for traj in trajs {
        let nodes = traj.path.grid().nodes();
        for k in sample_indices(traj, window) {
            let t = traj.states[k].t;
            for (v, s) in demand(traj, k)?.into_iter().zip(&nodes) {
                if v > best.value || v.is_nan() {
                    best = Fit {
                        value: v,
                        witness: Some(Witness { t, s: *s }),
                    };
                }
            }
        }
    }
    Ok(best)
}

/// Output indices with `lo <= t <= hi`.
pub(crate) fn sample_indices(traj: &FlowTrajectory, window: (f64, f64)) -> Vec<usize> {
    let (lo, hi) = window;
    let eps = 1e-12;
    traj.states
        .iter()
        .enumerate()
        .filter(|(_, s)| s.t >= lo - eps && s.t <= hi + eps)
        .map(|(k, _)| k)
        .collect()
}

/// The coarse constant relaxed by a factor of two in the direction `sign`
/// (`+1` for upper bounds on the constant, `-1` for lower bounds).
pub(crate) fn relaxed(coarse: f64, sign: f64) -> f64 {
    coarse + sign * coarse.abs().max(CONSTANT_FLOOR)
}

/// Fitted constants agree within a factor of two.
pub(crate) fn within_two(a: f64, b: f64) -> bool {
    (a - b).abs() <= a.abs().min(b.abs()).max(CONSTANT_FLOOR)
}

/// Records a fit-then-verify pair for an upper-type constant `C` (the bound
/// reads `demand <= C`) and returns whether the relaxed coarse constant covers
/// every fine sample.
pub(crate) fn verify_upper(report: &mut EstimateReport, name: &str, coarse: Fit, fine: Fit) -> bool {
    let allowed = relaxed(coarse.value, 1.0);
    report.constant(&format!("{name}_coarse"), coarse.value);
    report.constant(&format!("{name}_fine"), fine.value);
    report.constant(name, allowed);
    let mut m = Margin::new();
    if let Some(w) = fine.witness {
        m.update(allowed - fine.value, w.t, w.s);
    }
    report.record(&m);
    report.stable(within_two(coarse.value, fine.value));
    m.at_least(QUANT_RTOL * allowed.abs().max(1.0))
}

/// Hypotheses of the regularity estimates with their constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextParams {
    pub t_big: f64,
    pub s_big: f64,
    pub eps0: f64,
    pub eps: f64,
    pub beta: f64,
    pub alpha: f64,
    /// Constant `A` of the time-derivative lower bound.
    pub a_dot: f64,
    /// Constant `A` of the Laplacian bound.
    pub a_c2: f64,
}

impl ContextParams {
    /// A choice satisfying the ordering chains whenever `1/(2c) < min(t_max, horizon)`.
    pub fn auto(pole_coefficient: f64, t_max: f64, horizon: f64) -> Self {
        let lo = pole_coefficient;
        let top = t_max.min(horizon);
        let t_big = if top > lo { lo + 0.8 * (top - lo) } else { lo + 0.5 * (t_max - lo) };
        let s_big = 0.5 * (t_big + t_max);
        let eps0 = 0.05_f64.min(0.25 * (t_big - lo).max(0.0));
        let beta_lo = 0.5 / t_max;
        let beta = if lo > 0.0 { (2.0 * beta_lo).min(0.5 * (beta_lo + 0.5 / lo)) } else { 2.0 * beta_lo };
        Self {
            t_big,
            s_big,
            eps0,
            eps: 2.0 * eps0,
            beta,
            alpha: beta - beta_lo,
            a_dot: 1.0,
            a_c2: 1.0,
        }
    }
}

/// Shared data of the regularity estimates: the approximant `psi`, the
/// integrals `E1`, `E2` and the machine-checked hypotheses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateContext {
    pub params: ContextParams,
    pub pole_coefficient: f64,
    pub t_max: f64,
    /// Pole coefficient of `psi`.
    pub psi_coefficient: f64,
    pub e1: Option<IntegrabilityCertificate>,
    pub e2: Option<IntegrabilityCertificate>,
    pub normalization: Normalization,
    pub violations: Vec<String>,
    #[serde(skip)]
    spec: Option<SingularitySpec>,
}

impl EstimateContext {
    pub fn new(spec: &SingularitySpec, path: &ClassPath, params: ContextParams) -> Self {
        let a = spec.pole_coefficient;
        let t_max = path.t_max();
        let p = params;
        let mut violations = Vec::new();
        if !(a < t_max) {
            violations.push(format!("hypothesis 1/2c(phi0) < T_max fails: 1/2c = {a} >= T_max = {t_max}"));
        } else if !(a < p.t_big && p.t_big < p.s_big && p.s_big < t_max) {
            violations.push(format!(
                "ordering 1/2c < T < S < T_max fails: {a}, {}, {}, {t_max}",
                p.t_big, p.s_big
            ));
        }
        if !(p.eps > p.eps0 && p.eps0 > 0.0) {
            violations.push(format!("ordering 0 < eps0 < eps fails: {}, {}", p.eps0, p.eps));
        }
        if !(p.eps < p.t_big) {
            violations.push(format!("eps = {} leaves no window below T = {}", p.eps, p.t_big));
        }
        let b2 = 2.0 * p.beta;
        if !(p.alpha > 0.0 && a < 1.0 / b2 && b2 - p.alpha > 0.0 && 1.0 / (b2 - p.alpha) < t_max) {
            violations.push(format!(
                "ordering 1/2c < 1/2beta < 1/(2beta - alpha) < T_max fails for beta = {}, alpha = {}",
                p.beta, p.alpha
            ));
        }
        let normalization = Normalization::of(path, NORMALIZATION.0, NORMALIZATION.1);
        let (mut e1, mut e2, mut psi_coefficient) = (None, None, a);
        if violations.is_empty() {
            match equisingular_approx(spec, p.eps0) {
                Ok(approx) => {
                    psi_coefficient = approx.pole_coefficient;
                    e1 = Some(approx.certificate);
                    match skoda_check(&approx.psi, 0.5 / p.t_big) {
                        Ok(c) if !c.divergent => e2 = Some(c),
                        Ok(_) => violations.push(format!("E2 = int e^(-psi/T) dV diverges for T = {}", p.t_big)),
                        Err(e) => violations.push(e.to_string()),
                    }
                }
                Err(e) => violations.push(e.to_string()),
            }
        }
        Self {
            params,
            pole_coefficient: a,
            t_max,
            psi_coefficient,
            e1,
            e2,
            normalization,
            violations,
            spec: Some(spec.clone()),
        }
    }

    /// First violated hypothesis, if any.
    pub fn blocker(&self) -> Option<String> {
        self.violations.first().cloned()
    }

    /// `psi_eps0` resampled on `grid`.
    pub fn psi_on(&self, grid: SGrid) -> RadialProfile {
        let spec = self.spec.as_ref().expect("context built from a spec");
        SingularitySpec::new(self.psi_coefficient, spec.bounded_tail.clone())
            .expect("coefficient is non-negative")
            .profile_on(grid)
    }

    /// Times checked by the regularity estimates: `[eps, min(T, horizon)]`.
    pub fn window(&self) -> (f64, f64) {
        (self.params.eps, self.params.t_big.min(self.normalization.horizon))
    }

    pub(crate) fn annotate(&self, report: &mut EstimateReport) {
        let p = &self.params;
        for (k, v) in [
            ("T", p.t_big),
            ("S", p.s_big),
            ("eps0", p.eps0),
            ("eps", p.eps),
            ("beta", p.beta),
            ("alpha", p.alpha),
        ] {
            report.constant(k, v);
        }
        if let Some(e) = &self.e1 {
            report.constant("E1", e.value);
        }
        if let Some(e) = &self.e2 {
            report.constant("E2", e.value);
        }
        report.normalization = Some(self.normalization);
    }
}

/// Summary table with one row per report.
pub fn write_summary_csv<W: Write>(reports: &[EstimateReport], mut out: W) -> io::Result<()> {
    writeln!(out, "theorem,status,margin,refinement_stable,reason")?;
    for r in reports {
        let status = match &r.verdict {
            Verdict::Holds => "holds",
            Verdict::Fails => "fails",
            Verdict::Skipped { .. } => "skipped",
        };
        let margin = r.margin.map(|m| format!("{m:?}")).unwrap_or_default();
        let stable = r.refinement_stable.map(|b| b.to_string()).unwrap_or_default();
        let reason = r.skip_reason().unwrap_or("").replace(',', ";");
        writeln!(out, "{},{status},{margin},{stable},{reason}", r.theorem)?;
    }
    Ok(())
}
