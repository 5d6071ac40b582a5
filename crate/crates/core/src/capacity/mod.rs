//! Monge–Ampère capacities relative to a weight `psi` and the Kołodziej
//! extinction lemma.
//!
//! On the grid, `Cap_psi(E)` is the linear program
//! `max sum_{i in E} w_i (omega'' + D2 u)_i` over `psi - 1 <= u <= psi` with
//! `omega'' + D2 u >= 0`, where `w` are the trapezoid weights. Writing
//! `u = psi - 1 + v` turns the box into `0 <= v <= 1`.

mod simplex;

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

pub use simplex::{LinearProgram, LpCertificate, LpSolution};

use crate::error::{Error, Result};
use crate::geometry::BackgroundGeometry;
use crate::grid::{d2_row, RadialProfile};

/// Largest accepted optimality residual of a capacity LP.
pub const LP_TOL: f64 = 1e-9;

/// Relative round-off allowed below zero in the density of `omega + dd^c psi`.
const PSH_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapProblem {
    pub psi: RadialProfile,
    /// Grid indices of the set `E`.
    pub set: Vec<usize>,
}

impl CapProblem {
    pub fn new(psi: RadialProfile, mut set: Vec<usize>) -> Result<Self> {
        set.sort_unstable();
        set.dedup();
        if set.last().is_some_and(|&i| i >= psi.grid().len()) {
            return Err(Error::OutOfRange("set index beyond the grid".into()));
        }
        Ok(Self { psi, set })
    }

    pub fn all(psi: RadialProfile) -> Self {
        let n = psi.grid().len();
        Self { psi, set: (0..n).collect() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CapResult {
    pub value: f64,
    /// Maximizer `u` of the program.
    pub optimizer: RadialProfile,
    pub certificate: LpCertificate,
    pub pivots: usize,
    /// Left end of the grid and the value of `psi` there; for a pole this is
    /// where the singularity is cut off.
    pub truncation: (f64, f64),
}

/// `Cap_psi(E)` by the in-repo simplex, certified by its optimality residual.
pub fn cap_psi(problem: &CapProblem, bg: &BackgroundGeometry) -> Result<CapResult> {
    let psi = &problem.psi;
    let grid = *psi.grid();
    if bg.grid() != &grid {
        return Err(Error::GridMismatch);
    }
    let n = grid.len();
    let h = grid.spacing();
    let w = grid.weights();
    let omega = bg.g0.d2();
    let dpsi = psi.d2();
    let scale = omega.iter().fold(0.0_f64, |s, v| s.max(v.abs()));
    let mut g: Vec<f64> = omega.iter().zip(&dpsi).map(|(a, b)| a + b).collect();
    for (i, gi) in g.iter_mut().enumerate() {
        if *gi < -PSH_TOL * scale {
            return Err(Error::Infeasible(format!(
                "psi is not omega-psh at node {i}: density {gi}"
            )));
        }
        *gi = gi.max(0.0);
    }
    let truncation = (grid.s_min(), psi.get(0));
    if problem.set.is_empty() {
        return Ok(CapResult {
            value: 0.0,
            optimizer: psi.clone(),
            certificate: LpCertificate {
                primal_infeasibility: 0.0,
                dual_infeasibility: 0.0,
                complementarity: 0.0,
                duality_gap: 0.0,
            },
            pivots: 0,
            truncation,
        });
    }

    // Rows 0..n: -D2 v <= g. Rows n..2n: v <= 1.
    let mut a = vec![0.0; 2 * n * n];
    let mut c = vec![0.0; n];
    let mut in_set = vec![false; n];
    for &i in &problem.set {
        in_set[i] = true;
    }
    for i in 0..n {
        let (lo, di, up) = d2_row(i, n, h);
        let row = &mut a[i * n..(i + 1) * n];
        row[i] = -di;
        if i > 0 {
            row[i - 1] = -lo;
        }
        if i + 1 < n {
            row[i + 1] = -up;
        }
        if in_set[i] {
            c[i] += w[i] * di;
            if i > 0 {
                c[i - 1] += w[i] * lo;
            }
            if i + 1 < n {
                c[i + 1] += w[i] * up;
            }
        }
        a[(n + i) * n + i] = 1.0;
    }
    let mut b = g.clone();
    b.extend(std::iter::repeat(1.0).take(n));
    let lp = LinearProgram { a, b, c };
    let sol = lp.solve()?;
    if sol.certificate.worst() > LP_TOL {
        return Err(Error::LinearProgram(format!(
            "optimality residual {:e} above {LP_TOL:e}",
            sol.certificate.worst()
        )));
    }
    let base: f64 = problem.set.iter().map(|&i| w[i] * g[i]).sum();
    let values = psi.values().iter().zip(&sol.x).map(|(p, v)| p - 1.0 + v).collect();
    Ok(CapResult {
        value: base + sol.objective,
        optimizer: RadialProfile::new(grid, values, psi.slope_minus, psi.slope_plus)?,
        certificate: sol.certificate,
        pivots: sol.pivots,
        truncation,
    })
}

/// Capacities of the sublevel sets `{phi < psi - t}` for each level `t`.
pub fn capacity_decay(phi: &RadialProfile, psi: &RadialProfile, bg: &BackgroundGeometry, levels: &[f64]) -> Result<Vec<f64>> {
    if phi.grid() != psi.grid() {
        return Err(Error::GridMismatch);
    }
    levels
        .iter()
        .map(|&t| {
            let set = (0..phi.grid().len())
                .filter(|&i| phi.get(i) < psi.get(i) - t)
                .collect();
            Ok(cap_psi(&CapProblem::new(psi.clone(), set)?, bg)?.value)
        })
        .collect()
}

/// CSV with columns `t,cap`.
pub fn write_decay_csv<W: Write>(levels: &[f64], caps: &[f64], mut out: W) -> io::Result<()> {
    writeln!(out, "t,cap")?;
    for (t, c) in levels.iter().zip(caps) {
        writeln!(out, "{t:?},{c:?}")?;
    }
    Ok(())
}

/// Samples of a non-increasing function `g >= 0` and the constant `C` of
/// the hypothesis `s g(t+s) <= C g(t)^2` for `s` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFunction {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub constant: f64,
}

/// Relative slack in the sampled hypothesis.
const DECAY_RTOL: f64 = 1e-9;

/// Values at or below this count as zero.
pub const EXTINCTION_FLOOR: f64 = 1e-12;

impl DecayFunction {
    pub fn new(times: Vec<f64>, values: Vec<f64>, constant: f64) -> Result<Self> {
        if times.len() != values.len() || times.is_empty() {
            return Err(Error::InvalidParameter("times and values must be non-empty and aligned".into()));
        }
        if !(constant > 0.0) {
            return Err(Error::InvalidParameter(format!("constant must be positive, got {constant}")));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("sample times must increase".into()));
        }
        if let Some(i) = values.iter().position(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidParameter(format!("negative sample at index {i}")));
        }
        if let Some(i) = values.windows(2).position(|w| w[1] > w[0] * (1.0 + DECAY_RTOL) + EXTINCTION_FLOOR) {
            return Err(Error::NonMonotone(format!(
                "g increases between t = {} and t = {}",
                times[i],
                times[i + 1]
            )));
        }
        Ok(Self { times, values, constant })
    }

    /// Samples with the smallest constant satisfying the hypothesis on them.
    pub fn with_fitted_constant(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let mut c = f64::MIN_POSITIVE;
        for i in 0..times.len() {
            if times[i] <= 0.0 {
                continue;
            }
            for k in i..times.len() {
                let s = times[k] - times[i];
                if s > 1.0 {
                    break;
                }
                if values[k] > EXTINCTION_FLOOR {
                    c = c.max(s * values[k] / (values[i] * values[i]));
                }
            }
        }
        Self::new(times, values, c)
    }

    /// Right-continuous reading of the samples at `t`.
    pub fn value_at(&self, t: f64) -> f64 {
        match self.times.iter().rposition(|&x| x <= t) {
            Some(i) => self.values[i],
            None => self.values[0],
        }
    }
}

/// Evidence that the extinction lemma does not apply to the samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KolodziejWitness {
    /// `s g(t+s) > C g(t)^2`.
    Hypothesis { t: f64, s: f64, lhs: f64, rhs: f64 },
    /// `g(t0) > 1/(2C)`.
    Threshold { t0: f64, value: f64, bound: f64 },
    /// `g(t) > 0` at a sampled `t >= t0 + 2`.
    Persists { t: f64, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Extinction {
    Verified { t_star: f64, checked: usize },
    Witness(KolodziejWitness),
}

/// Checks the hypotheses of the extinction lemma on the samples and, if they
/// hold, that `g` vanishes at every sample from `t0 + 2` on.
pub fn kolodziej_extinction(d: &DecayFunction, t0: f64) -> Extinction {
    let c = d.constant;
    let (times, values) = (&d.times, &d.values);
    let mut worst: Option<(f64, KolodziejWitness)> = None;
    for i in 0..times.len() {
        if times[i] <= 0.0 {
            continue;
        }
        for k in i..times.len() {
            let s = times[k] - times[i];
            if s > 1.0 {
                break;
            }
            let lhs = s * values[k];
            let rhs = c * values[i] * values[i];
            let excess = lhs - rhs * (1.0 + DECAY_RTOL) - EXTINCTION_FLOOR;
            if excess > 0.0 && worst.as_ref().map_or(true, |(e, _)| excess > *e) {
                worst = Some((excess, KolodziejWitness::Hypothesis { t: times[i], s, lhs, rhs }));
            }
        }
    }
    if let Some((_, w)) = worst {
        return Extinction::Witness(w);
    }
    let g0 = d.value_at(t0);
    let bound = 0.5 / c;
    if g0 > bound * (1.0 + DECAY_RTOL) {
        return Extinction::Witness(KolodziejWitness::Threshold { t0, value: g0, bound });
    }
    let t_star = t0 + 2.0;
    let mut checked = 0;
    for (&t, &v) in times.iter().zip(values) {
        if t >= t_star {
            if v > EXTINCTION_FLOOR {
                return Extinction::Witness(KolodziejWitness::Persists { t, value: v });
            }
            checked += 1;
        }
    }
    Extinction::Verified { t_star, checked }
}

/// Step function built from the hypothesis read as an equality: `g = 1/C`
/// before `t0`, then `g_0 = theta/(2C)` halving after plateaus of length
/// `C g_k`, and zero after `levels` plateaus. Sampled at spacing `dt` on `[0, t_end]`.
pub fn reverse_recursion_decay(c: f64, t0: f64, theta: f64, levels: usize, dt: f64, t_end: f64) -> Result<DecayFunction> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::InvalidParameter(format!("theta must lie in (0, 1], got {theta}")));
    }
    let mut breaks = vec![t0];
    let mut plateau = vec![theta / (2.0 * c)];
    for k in 0..levels {
        let g = plateau[k];
        breaks.push(breaks[k] + c * g);
        plateau.push(g / 2.0);
    }
    plateau[levels] = 0.0;
    let count = (t_end / dt).round() as usize + 1;
    let times: Vec<f64> = (0..count).map(|k| k as f64 * dt).collect();
    let values = times
        .iter()
        .map(|&t| {
            if t < t0 {
                1.0 / c
            } else {
                let k = breaks.iter().rposition(|&b| b <= t).unwrap_or(0);
                plateau[k.min(levels)]
            }
        })
        .collect();
    DecayFunction::new(times, values, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_fubini_study;
    use crate::grid::SGrid;
    use crate::singular::SingularitySpec;

    fn bg(n: usize) -> BackgroundGeometry {
        make_fubini_study(2.0, SGrid::new(-8.0, 8.0, n).unwrap()).unwrap()
    }

    #[test]
    fn whole_space_has_total_mass() {
        let bg = bg(41);
        let r = cap_psi(&CapProblem::all(RadialProfile::zeros(*bg.grid())), &bg).unwrap();
        assert!((r.value - bg.mass_omega).abs() < 1e-9, "{}", r.value);
        let empty = cap_psi(&CapProblem::new(RadialProfile::zeros(*bg.grid()), vec![]).unwrap(), &bg).unwrap();
        assert_eq!(empty.value, 0.0);
    }

    #[test]
    fn constant_shift_leaves_capacity_unchanged() {
        let bg = bg(31);
        let set: Vec<usize> = (10..20).collect();
        let a = cap_psi(&CapProblem::new(RadialProfile::zeros(*bg.grid()), set.clone()).unwrap(), &bg).unwrap();
        let b = cap_psi(&CapProblem::new(RadialProfile::constant(*bg.grid(), 3.5), set).unwrap(), &bg).unwrap();
        assert!((a.value - b.value).abs() < 1e-9);
        assert!(a.value > 0.0 && a.value < bg.mass_omega);
    }

    #[test]
    fn pole_nodes_lose_capacity() {
        let bg = bg(41);
        let psi = SingularitySpec::pole(0.5, *bg.grid()).unwrap().profile();
        let caps: Vec<f64> = [20, 12, 6, 2]
            .iter()
            .map(|&i| cap_psi(&CapProblem::new(psi.clone(), vec![i]).unwrap(), &bg).unwrap().value)
            .collect();
        assert!(caps.windows(2).all(|w| w[1] < w[0]), "{caps:?}");
    }

    #[test]
    fn non_psh_weight_is_rejected() {
        let bg = bg(21);
        let psi = RadialProfile::from_fn(*bg.grid(), 0.0, 0.0, |s| -3.0 * (-s * s).exp()).unwrap();
        assert!(matches!(cap_psi(&CapProblem::all(psi), &bg), Err(Error::Infeasible(_))));
    }

    #[test]
    fn synthetic_decay_goes_extinct() {
        let d = reverse_recursion_decay(2.0, 0.5, 1.0, 30, 1e-3, 4.0).unwrap();
        assert!(matches!(kolodziej_extinction(&d, 0.5), Extinction::Verified { .. }));
        let z = DecayFunction::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.0; 4], 1.0).unwrap();
        assert_eq!(kolodziej_extinction(&z, 0.5), Extinction::Verified { t_star: 2.5, checked: 1 });
    }

    #[test]
    fn exponential_decay_yields_witness() {
        let times: Vec<f64> = (0..=400).map(|k| k as f64 * 0.025).collect();
        let values = times.iter().map(|t| (-t).exp()).collect();
        let d = DecayFunction::new(times, values, 0.1).unwrap();
        assert!(matches!(kolodziej_extinction(&d, 3.0), Extinction::Witness(_)));
    }

    #[test]
    fn increasing_samples_are_rejected() {
        assert!(matches!(
            DecayFunction::new(vec![0.0, 1.0], vec![1.0, 2.0], 1.0),
            Err(Error::NonMonotone(_))
        ));
    }
}
