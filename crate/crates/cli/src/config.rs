//! Experiment configuration: a strict JSON schema with times in flow-time and
//! lengths in `s` units.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use krf_core::estimates::{ContextParams, LelongDecayParams, ZeroConvergenceParams};
use krf_core::flow::{ApproximantFamily, FlowConfig};
use krf_core::geometry::{EtaSpec, FubiniStudy};
use krf_core::grid::SGrid;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub geometry: GeometryBlock,
    #[serde(default)]
    pub class_path: ClassPathBlock,
    pub initial_data: InitialData,
    pub flow: FlowBlock,
    #[serde(default)]
    pub checks: Vec<CheckSpec>,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryBlock {
    /// Mass of `omega`.
    pub volume: f64,
    pub grid: GridBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub s_min: f64,
    pub s_max: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPathBlock {
    pub eta: EtaSpec,
}

impl Default for ClassPathBlock {
    fn default() -> Self {
        Self { eta: EtaSpec::Zero }
    }
}

fn default_window() -> (f64, f64) {
    (-1.0, 5.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialData {
    /// `a (s - log(1 + e^s))`, flowed as the maximal flow of the approximants `j_list`.
    Pole {
        a: f64,
        j_list: Vec<f64>,
        #[serde(default)]
        family: ApproximantFamily,
        /// Window on which the approximants must converge.
        #[serde(default = "default_window")]
        window: (f64, f64),
    },
    /// `2 log(e^s + 1/j) - 2 log(1 + e^s)`, the family of the closed-form example.
    ExampleFamily { j_list: Vec<f64> },
    Constant { value: f64 },
    /// `amplitude e^{-s^2 / 2 width^2} + offset`.
    Bump {
        amplitude: f64,
        width: f64,
        #[serde(default)]
        offset: f64,
    },
    /// `-kappa log(1 + e^{-|s - center|})`, continuous with a kink at `center`.
    Kink { kappa: f64, center: f64 },
    /// Two-column CSV `s,value`, resolved relative to the config file.
    ProfileFile { path: String },
    /// Solution of `omega + dd^c u = f omega` with `f = kappa e^{-psi_minus}`
    /// and `psi_minus` a pole of coefficient `minus_pole` at `s = -inf`.
    Hf {
        minus_pole: f64,
        #[serde(default)]
        scale: Option<f64>,
        j_list: Vec<f64>,
        /// Region where the regularized data are compared with the limit.
        gap_region: (f64, f64),
    },
    /// Seeded random smooth data within the curvature budget.
    RandomSweep { samples: usize },
}

impl InitialData {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Pole { .. } => "pole",
            Self::ExampleFamily { .. } => "example_family",
            Self::Constant { .. } => "constant",
            Self::Bump { .. } => "bump",
            Self::Kink { .. } => "kink",
            Self::ProfileFile { .. } => "profile_file",
            Self::Hf { .. } => "hf",
            Self::RandomSweep { .. } => "random_sweep",
        }
    }

    /// Whether the datum is a single bounded profile flowed directly.
    pub fn is_smooth(&self) -> bool {
        matches!(
            self,
            Self::Constant { .. } | Self::Bump { .. } | Self::Kink { .. } | Self::ProfileFile { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowBlock {
    pub dt: f64,
    pub t_end: f64,
    /// Output times in `(0, t_end]`.
    pub times: Vec<f64>,
}

impl FlowBlock {
    pub fn config(&self) -> FlowConfig {
        FlowConfig::fixed(self.dt, self.t_end)
    }
}

/// `scale * pole + shift`, with the pole of the initial datum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Affine {
    pub scale: f64,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "theorem", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckSpec {
    /// Closed-form regression on the example family, with a `dt / 2` rerun.
    ExactRegression {
        j_list: Vec<f64>,
        times: Vec<f64>,
        tol: f64,
        /// Allowed relative deviation of the error ratio from 2.
        halving_band: f64,
    },
    /// `phi_{t,j}(probe) + t m_j` stays bounded while `phi_{t,j}` diverges.
    #[serde(rename = "t_max_obstruction")]
    TmaxObstruction { t: f64, probe: f64, variation_tol: f64 },
    /// Seeded random ordered pairs.
    Comparison { pairs: usize },
    UpperBound,
    DerivativeUpper,
    LelongDecay {
        #[serde(default)]
        params: Option<LelongDecayParams>,
    },
    /// Maximal flow from a second approximant family against the primary one.
    SequenceIndependence {
        family: ApproximantFamily,
        times: Vec<f64>,
        tol: f64,
    },
    C0Lower {
        #[serde(default)]
        context: Option<ContextParams>,
    },
    DotLower {
        #[serde(default)]
        context: Option<ContextParams>,
    },
    C2 {
        #[serde(default)]
        context: Option<ContextParams>,
    },
    MoreEstimates {
        phi1: Affine,
        phi2: Affine,
        delta: f64,
        /// Defaults to `1/a`.
        #[serde(default)]
        c1: Option<f64>,
        /// Defaults to the `T` of the automatic context.
        #[serde(default)]
        t_end: Option<f64>,
    },
    LowerBound { beta: f64, region: (f64, f64) },
    /// Perturbations `(0.05 / j) sin(pi s) e^{-s^2}` of the initial datum.
    Stability { j_list: Vec<f64>, t: f64, tol: f64 },
    ZeroConvergence {
        params: ZeroConvergenceParams,
        /// Runs on this datum instead of the primary one.
        #[serde(default)]
        datum: Option<InitialData>,
    },
    #[serde(rename = "h_f_convergence")]
    HfConvergence { params: ZeroConvergenceParams },
    /// `Cap_psi(all nodes) = mass_omega`.
    CapacityExactness { tol: f64 },
    /// `Cap_psi(E1) <= Cap_psi(E2)` on seeded nested pairs.
    CapacityMonotone { pairs: usize },
    /// `Cap_psi({phi0 < psi - t})` with `psi = 0`.
    CapacityDecay { levels: Vec<f64> },
    /// Extinction on the synthetic reverse-recursion family.
    KolodziejExtinction {
        c: f64,
        t0: f64,
        theta: f64,
        levels: usize,
        dt: f64,
        t_end: f64,
    },
    /// `g = e^{-t}` must yield a witness.
    KolodziejWitness { t0: f64, dt: f64, t_end: f64 },
}

pub const THEOREM_IDS: [&str; 20] = [
    "exact_regression",
    "t_max_obstruction",
    "comparison",
    "upper_bound",
    "derivative_upper",
    "lelong_decay",
    "sequence_independence",
    "c0_lower",
    "dot_lower",
    "c2",
    "more_estimates",
    "lower_bound",
    "stability",
    "zero_convergence",
    "h_f_convergence",
    "capacity_exactness",
    "capacity_monotone",
    "capacity_decay",
    "kolodziej_extinction",
    "kolodziej_witness",
];

impl CheckSpec {
    pub fn id(&self) -> &'static str {
        match self {
            Self::ExactRegression { .. } => "exact_regression",
            Self::TmaxObstruction { .. } => "t_max_obstruction",
            Self::Comparison { .. } => "comparison",
            Self::UpperBound => "upper_bound",
            Self::DerivativeUpper => "derivative_upper",
            Self::LelongDecay { .. } => "lelong_decay",
            Self::SequenceIndependence { .. } => "sequence_independence",
            Self::C0Lower { .. } => "c0_lower",
            Self::DotLower { .. } => "dot_lower",
            Self::C2 { .. } => "c2",
            Self::MoreEstimates { .. } => "more_estimates",
            Self::LowerBound { .. } => "lower_bound",
            Self::Stability { .. } => "stability",
            Self::ZeroConvergence { .. } => "zero_convergence",
            Self::HfConvergence { .. } => "h_f_convergence",
            Self::CapacityExactness { .. } => "capacity_exactness",
            Self::CapacityMonotone { .. } => "capacity_monotone",
            Self::CapacityDecay { .. } => "capacity_decay",
            Self::KolodziejExtinction { .. } => "kolodziej_extinction",
            Self::KolodziejWitness { .. } => "kolodziej_witness",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    /// Artifact directory used when none is given on the command line.
    #[serde(default)]
    pub directory: Option<String>,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
    /// Whether the primary trajectories are exported.
    #[serde(default = "default_true")]
    pub trajectories: bool,
}

fn default_formats() -> Vec<Format> {
    vec![Format::Json, Format::Csv]
}

fn default_true() -> bool {
    true
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            directory: None,
            formats: default_formats(),
            trajectories: true,
        }
    }
}

impl OutputBlock {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

fn increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

fn dyadic_present(times: &[f64], params: &ZeroConvergenceParams) -> bool {
    params
        .times()
        .iter()
        .all(|t| times.iter().any(|x| (x - t).abs() <= 1e-9 * t.max(1.0)))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("invalid experiment config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn grid(&self) -> Result<SGrid> {
        let g = self.geometry.grid;
        Ok(SGrid::new(g.s_min, g.s_max, g.n_points)?)
    }

    pub fn geometry(&self) -> FubiniStudy {
        FubiniStudy::new(self.geometry.volume, self.class_path.eta)
    }

    /// The same experiment with `k` times finer grid spacing and time step.
    pub fn refined(&self, k: usize) -> Self {
        let mut out = self.clone();
        if k > 1 {
            let g = &mut out.geometry.grid;
            g.n_points = (g.n_points - 1) * k + 1;
            out.flow.dt /= k as f64;
        }
        out
    }

    /// Checks the schema invariants that serde cannot express; `base` resolves relative file paths.
    pub fn validate(&self, base: &Path) -> Result<()> {
        ensure!(!self.name.is_empty(), "name must not be empty");
        ensure!(self.geometry.volume > 0.0, "geometry.volume must be positive");
        self.grid().context("geometry.grid")?;
        let f = &self.flow;
        ensure!(f.dt > 0.0 && f.dt <= f.t_end, "flow.dt must lie in (0, t_end]");
        ensure!(
            increasing(&f.times) && f.times.iter().all(|&t| t > 0.0 && t <= f.t_end * (1.0 + 1e-12)),
            "flow.times must increase within (0, t_end]"
        );
        self.validate_initial_data(&self.initial_data, base)?;
        for (k, check) in self.checks.iter().enumerate() {
            self.validate_check(check, base)
                .with_context(|| format!("check {k} ({})", check.id()))?;
        }
        if let Some(dir) = &self.output.directory {
            ensure!(!dir.is_empty(), "output.directory must not be empty");
        }
        Ok(())
    }

    fn validate_initial_data(&self, data: &InitialData, base: &Path) -> Result<()> {
        match data {
            InitialData::Pole { a, j_list, window, .. } => {
                ensure!(*a >= 0.0, "pole coefficient must be non-negative");
                ensure!(j_list.len() >= 3 && increasing(j_list), "j_list needs at least three increasing entries");
                ensure!(window.0 < window.1, "window must be non-empty");
            }
            InitialData::ExampleFamily { j_list } => {
                ensure!(j_list.len() >= 3 && increasing(j_list), "j_list needs at least three increasing entries");
                ensure!(j_list[0] > 1.0, "example family needs j > 1 for a positive cut-off depth");
            }
            InitialData::Bump { width, .. } => ensure!(*width > 0.0, "bump width must be positive"),
            InitialData::Kink { kappa, .. } => ensure!(*kappa >= 0.0, "kink kappa must be non-negative"),
            InitialData::ProfileFile { path } => {
                let p = base.join(path);
                ensure!(p.is_file(), "profile file {} not found", p.display());
            }
            InitialData::Hf { minus_pole, j_list, gap_region, .. } => {
                ensure!(*minus_pole > 0.0, "minus_pole must be positive");
                ensure!(!j_list.is_empty() && increasing(j_list), "j_list must be non-empty and increasing");
                ensure!(gap_region.0 < gap_region.1, "gap_region must be non-empty");
            }
            InitialData::RandomSweep { samples } => ensure!(*samples > 0, "samples must be positive"),
            InitialData::Constant { .. } => {}
        }
        Ok(())
    }

    fn validate_check(&self, check: &CheckSpec, base: &Path) -> Result<()> {
        let data = &self.initial_data;
        let pole = matches!(data, InitialData::Pole { .. });
        let maximal = pole || matches!(data, InitialData::ExampleFamily { .. });
        let times = &self.flow.times;
        match check {
            CheckSpec::ExactRegression { j_list, times, tol, halving_band } => {
                ensure!(
                    self.geometry.volume == 2.0 && self.class_path.eta == EtaSpec::Zero,
                    "the closed form needs volume 2 and eta = 0"
                );
                ensure!(!j_list.is_empty() && j_list.iter().all(|&j| j >= 1.0), "j_list entries must be >= 1");
                ensure!(increasing(times) && times[0] > 0.0 && times[times.len() - 1] < 1.0, "times must increase in (0, 1)");
                ensure!(*tol > 0.0 && *halving_band > 0.0, "tolerances must be positive");
            }
            CheckSpec::TmaxObstruction { t, .. } => {
                ensure!(matches!(data, InitialData::ExampleFamily { .. }), "needs example_family initial data");
                ensure!(times.iter().any(|x| (x - t).abs() <= 1e-12), "t must be an output time");
            }
            CheckSpec::Comparison { pairs } => ensure!(*pairs > 0, "pairs must be positive"),
            CheckSpec::UpperBound | CheckSpec::DerivativeUpper => {}
            CheckSpec::LelongDecay { .. } | CheckSpec::SequenceIndependence { .. } => {
                ensure!(pole, "needs pole initial data")
            }
            CheckSpec::C0Lower { .. } | CheckSpec::DotLower { .. } | CheckSpec::C2 { .. } | CheckSpec::MoreEstimates { .. } => {
                ensure!(maximal, "needs pole or example_family initial data")
            }
            CheckSpec::LowerBound { region, .. } => {
                ensure!(pole || data.is_smooth(), "needs pole or bounded initial data");
                ensure!(region.0 < region.1, "region must be non-empty");
            }
            CheckSpec::Stability { j_list, t, tol } => {
                ensure!(data.is_smooth(), "needs bounded initial data");
                ensure!(!j_list.is_empty() && increasing(j_list), "j_list must be non-empty and increasing");
                ensure!(*t > 0.0 && *t <= self.flow.t_end && *tol > 0.0, "t must lie in (0, t_end]");
            }
            CheckSpec::ZeroConvergence { params, datum } => {
                ensure!(params.t0 <= self.flow.t_end, "t0 beyond flow.t_end");
                match datum {
                    Some(d) => {
                        ensure!(d.is_smooth(), "datum must be bounded");
                        self.validate_initial_data(d, base)?;
                    }
                    None => {
                        ensure!(pole || data.is_smooth(), "needs pole or bounded initial data");
                        ensure!(dyadic_present(times, params), "flow.times must contain t0 2^-k for k <= levels");
                    }
                }
            }
            CheckSpec::HfConvergence { params } => {
                ensure!(matches!(data, InitialData::Hf { .. }), "needs hf initial data");
                ensure!(dyadic_present(times, params), "flow.times must contain t0 2^-k for k <= levels");
            }
            CheckSpec::CapacityExactness { tol } => ensure!(*tol > 0.0, "tol must be positive"),
            CheckSpec::CapacityMonotone { pairs } => ensure!(*pairs > 0, "pairs must be positive"),
            CheckSpec::CapacityDecay { levels } => {
                ensure!(!levels.is_empty() && increasing(levels), "levels must increase")
            }
            CheckSpec::KolodziejExtinction { c, dt, t_end, .. } => {
                ensure!(*c > 0.0 && *dt > 0.0 && *t_end > *dt, "c, dt and t_end must be positive")
            }
            CheckSpec::KolodziejWitness { dt, t_end, .. } => {
                ensure!(*dt > 0.0 && *t_end > *dt, "dt and t_end must be positive")
            }
        }
        if matches!(
            check,
            CheckSpec::CapacityExactness { .. } | CheckSpec::CapacityMonotone { .. } | CheckSpec::CapacityDecay { .. }
        ) && self.geometry.grid.n_points > 801
        {
            bail!("capacity programs are dense; use at most 801 nodes");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{
            "name": "tiny",
            "geometry": {"volume": 2.0, "grid": {"s_min": -8.0, "s_max": 8.0, "n_points": 81}},
            "initial_data": {"kind": "constant", "value": 0.0},
            "flow": {"dt": 0.01, "t_end": 0.1, "times": [0.05, 0.1]}
        }"#
    }

    #[test]
    fn defaults_fill_in_and_round_trip() {
        let c = ExperimentConfig::from_json(minimal()).unwrap();
        assert_eq!(c.class_path.eta, EtaSpec::Zero);
        assert!(c.checks.is_empty());
        assert_eq!(c.output.formats, vec![Format::Json, Format::Csv]);
        let again = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_json(), c.to_json());
        c.validate(Path::new(".")).unwrap();
    }

    #[test]
    fn unknown_theorem_is_rejected() {
        let text = minimal().replace(
            r#""flow""#,
            r#""checks": [{"theorem": "riemann_hypothesis"}], "flow""#,
        );
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = minimal().replace(r#""value": 0.0"#, r#""value": 0.0, "colour": 1"#);
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn missing_profile_file_fails_validation() {
        let text = minimal().replace(
            r#"{"kind": "constant", "value": 0.0}"#,
            r#"{"kind": "profile_file", "path": "no/such/file.csv"}"#,
        );
        let c = ExperimentConfig::from_json(&text).unwrap();
        assert!(c.validate(Path::new(".")).is_err());
    }

    #[test]
    fn checks_needing_a_pole_are_rejected_on_smooth_data() {
        let text = minimal().replace(r#""flow""#, r#""checks": [{"theorem": "lelong_decay"}], "flow""#);
        let c = ExperimentConfig::from_json(&text).unwrap();
        let err = c.validate(Path::new(".")).unwrap_err();
        assert!(format!("{err:#}").contains("lelong_decay"), "{err:#}");
    }

    #[test]
    fn every_theorem_id_is_known() {
        let c = ExperimentConfig::from_json(minimal()).unwrap();
        let ids: Vec<&str> = c.checks.iter().map(CheckSpec::id).collect();
        assert!(ids.iter().all(|id| THEOREM_IDS.contains(id)));
        for id in ["upper_bound", "derivative_upper"] {
            let text = minimal().replace(r#""flow""#, &format!(r#""checks": [{{"theorem": "{id}"}}], "flow""#));
            let c = ExperimentConfig::from_json(&text).unwrap();
            assert_eq!(c.checks[0].id(), id);
        }
    }

    #[test]
    fn refinement_scales_grid_and_step() {
        let c = ExperimentConfig::from_json(minimal()).unwrap().refined(2);
        assert_eq!(c.geometry.grid.n_points, 161);
        assert_eq!(c.flow.dt, 0.005);
    }
}
