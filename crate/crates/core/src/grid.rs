//! Uniform grids in the log coordinate `s = log|z|^2` and radial profiles on them.
//!
//! A torus-invariant function on P^1 minus its two fixed points is a function
//! of `s` alone, and `dd^c` becomes the second derivative in `s`. The discrete
//! second derivative used throughout the crate is a finite-volume stencil:
//! centered differences at interior nodes and half cells at both ends whose
//! outer flux is the profile's declared asymptotic slope. With trapezoid
//! weights the total discrete mass telescopes to `slope_plus - slope_minus`
//! exactly.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when checking that explicit nodes are uniform.
const UNIFORM_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SGrid {
    s_min: f64,
    s_max: f64,
    n_points: usize,
}

impl SGrid {
    pub fn new(s_min: f64, s_max: f64, n_points: usize) -> Result<Self> {
        if n_points < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 nodes, got {n_points}"
            )));
        }
        if !(s_min.is_finite() && s_max.is_finite()) || s_min >= s_max {
            return Err(Error::InvalidGrid(format!(
                "empty interval [{s_min}, {s_max}]"
            )));
        }
        if !(s_min < 0.0 && 0.0 < s_max) {
            return Err(Error::InvalidGrid(format!(
                "window [{s_min}, {s_max}] must contain s = 0 in its interior"
            )));
        }
        Ok(Self {
            s_min,
            s_max,
            n_points,
        })
    }

    /// Builds a grid from explicit node positions, rejecting non-uniform spacing.
    pub fn from_nodes(nodes: &[f64]) -> Result<Self> {
        if nodes.len() < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 nodes, got {}",
                nodes.len()
            )));
        }
        let h = nodes[1] - nodes[0];
        for (i, w) in nodes.windows(2).enumerate() {
            let hi = w[1] - w[0];
            if (hi - h).abs() > UNIFORM_RTOL * h.abs().max(1.0) {
                return Err(Error::NonUniformGrid { index: i + 1 });
            }
        }
        Self::new(nodes[0], nodes[nodes.len() - 1], nodes.len())
    }

    pub fn s_min(&self) -> f64 {
        self.s_min
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        (self.s_max - self.s_min) / (self.n_points - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        // Hitting s_max exactly at the last node keeps refinements nested.
        if i + 1 == self.n_points {
            self.s_max
        } else {
            self.s_min + i as f64 * self.spacing()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.node(i)).collect()
    }

    /// Grid with `factor` times as many cells on the same interval.
    pub fn refined(&self, factor: usize) -> Self {
        let factor = factor.max(1);
        Self {
            n_points: (self.n_points - 1) * factor + 1,
            ..*self
        }
    }

    /// Index of the node closest to `s` (clamped to the grid).
    pub fn nearest(&self, s: f64) -> usize {
        let x = ((s - self.s_min) / self.spacing()).round();
        x.clamp(0.0, (self.n_points - 1) as f64) as usize
    }

    /// Node indices whose coordinate lies in `[lo, hi]`.
    pub fn window(&self, lo: f64, hi: f64) -> Range<usize> {
        let h = self.spacing();
        let eps = 1e-9 * h;
        let first = ((lo - self.s_min - eps) / h).ceil().max(0.0) as usize;
        let last = ((hi - self.s_min + eps) / h).floor();
        if last < 0.0 {
            return 0..0;
        }
        let last = (last as usize).min(self.n_points - 1);
        if first > last {
            0..0
        } else {
            first..last + 1
        }
    }

    /// Trapezoid quadrature weights.
    pub fn weights(&self) -> Vec<f64> {
        let h = self.spacing();
        let mut w = vec![h; self.n_points];
        w[0] = 0.5 * h;
        w[self.n_points - 1] = 0.5 * h;
        w
    }

    pub fn contains(&self, s: f64) -> bool {
        self.s_min <= s && s <= self.s_max
    }
}

/// A function of `s` sampled on a grid together with its asymptotic slopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialProfile {
    grid: SGrid,
    values: Vec<f64>,
    /// Low-order parts: the profile is `values + low` when this is non-empty.
    /// Flow states keep them so that second differences stay accurate where
    /// the curvature is far below the round-off of the values themselves.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    low: Vec<f64>,
    pub slope_minus: f64,
    pub slope_plus: f64,
}

impl RadialProfile {
    pub fn new(grid: SGrid, values: Vec<f64>, slope_minus: f64, slope_plus: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidParameter(format!(
                "profile has {} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite profile value at node {i}"
            )));
        }
        if !(slope_minus.is_finite() && slope_plus.is_finite()) {
            return Err(Error::InvalidParameter("non-finite slope".into()));
        }
        Ok(Self {
            grid,
            values,
            low: Vec::new(),
            slope_minus,
            slope_plus,
        })
    }

    pub fn from_fn(grid: SGrid, slope_minus: f64, slope_plus: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.nodes().into_iter().map(f).collect();
        Self::new(grid, values, slope_minus, slope_plus)
    }

    /// Samples `offset + w(s)` and keeps the rounding error of the sum in the
    /// low parts, so second differences see `w` at its own relative precision.
    pub fn from_offset_fn(
        grid: SGrid,
        slope_minus: f64,
        slope_plus: f64,
        offset: f64,
        w: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        let (hi, lo): (Vec<f64>, Vec<f64>) = grid.nodes().into_iter().map(|s| two_sum(offset, w(s))).unzip();
        Self::new(grid, hi, slope_minus, slope_plus)?.with_low(lo)
    }

    pub fn zeros(grid: SGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
            low: Vec::new(),
            slope_minus: 0.0,
            slope_plus: 0.0,
        }
    }

    pub fn constant(grid: SGrid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
            low: Vec::new(),
            slope_minus: 0.0,
            slope_plus: 0.0,
        }
    }

    pub fn grid(&self) -> &SGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Attaches low-order parts; see the field docs.
    pub fn with_low(mut self, low: Vec<f64>) -> Result<Self> {
        if low.len() != self.values.len() || low.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("low-order parts do not match the profile".into()));
        }
        self.low = low;
        Ok(self)
    }

    /// Low-order parts, empty when the values are exact as stored.
    pub fn low(&self) -> &[f64] {
        &self.low
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// Slope difference, i.e. the total mass of `dd^c` of the profile.
    pub fn mass(&self) -> f64 {
        self.slope_plus - self.slope_minus
    }

    /// Linear combination `self + c * other` on the same grid.
    pub fn axpy(&self, c: f64, other: &RadialProfile) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        Ok(Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + c * b)
                .collect(),
            low: combine_low(&self.low, 1.0, &other.low, c),
            slope_minus: self.slope_minus + c * other.slope_minus,
            slope_plus: self.slope_plus + c * other.slope_plus,
        })
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| c * v).collect(),
            low: self.low.iter().map(|v| c * v).collect(),
            slope_minus: c * self.slope_minus,
            slope_plus: c * self.slope_plus,
        }
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| v + c).collect(),
            low: self.low.clone(),
            slope_minus: self.slope_minus,
            slope_plus: self.slope_plus,
        }
    }

    pub fn map_values(&self, f: impl Fn(f64, f64) -> f64) -> Self {
        let nodes = self.grid.nodes();
        Self {
            grid: self.grid,
            values: nodes.iter().zip(&self.values).map(|(&s, &v)| f(s, v)).collect(),
            low: Vec::new(),
            slope_minus: self.slope_minus,
            slope_plus: self.slope_plus,
        }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Piecewise-linear interpolation, extended by the asymptotic slopes.
    pub fn value_at(&self, s: f64) -> f64 {
        let g = &self.grid;
        let n = g.len();
        if s <= g.s_min() {
            return self.values[0] + self.slope_minus * (s - g.s_min());
        }
        if s >= g.s_max() {
            return self.values[n - 1] + self.slope_plus * (s - g.s_max());
        }
        let x = (s - g.s_min()) / g.spacing();
        let i = (x.floor() as usize).min(n - 2);
        let frac = x - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }

    /// Resamples onto another grid by interpolation.
    pub fn resample(&self, grid: SGrid) -> Self {
        Self {
            grid,
            values: grid.nodes().into_iter().map(|s| self.value_at(s)).collect(),
            low: Vec::new(),
            slope_minus: self.slope_minus,
            slope_plus: self.slope_plus,
        }
    }

    pub fn d2(&self) -> Vec<f64> {
        d2(self)
    }

    /// Writes the profile as a two-column `s,value` CSV.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "s,value")?;
        for (s, v) in self.grid.nodes().iter().zip(&self.values) {
            writeln!(out, "{s:?},{v:?}")?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("s,value\n");
        for (x, v) in self.grid.nodes().iter().zip(&self.values) {
            let _ = writeln!(s, "{x:?},{v:?}");
        }
        s
    }
}

/// `ca * a + cb * b` for low parts, where an empty vector means zeros.
fn combine_low(a: &[f64], ca: f64, b: &[f64], cb: f64) -> Vec<f64> {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Vec::new(),
        (false, true) => a.iter().map(|x| ca * x).collect(),
        (true, false) => b.iter().map(|x| cb * x).collect(),
        (false, false) => a.iter().zip(b).map(|(x, y)| ca * x + cb * y).collect(),
    }
}

/// Error-free sum: `a + b = s + e` exactly.
pub(crate) fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Discrete `dd^c` density of a profile.
pub fn d2(p: &RadialProfile) -> Vec<f64> {
    let mut out = vec![0.0; p.values.len()];
    let low = (!p.low.is_empty()).then_some(p.low.as_slice());
    d2_split_into(&p.values, low, p.slope_minus, p.slope_plus, p.grid.spacing(), &mut out);
    out
}

/// [`d2_into`] for values stored as `hi + lo`. The low parts carry no slope.
pub fn d2_split_into(hi: &[f64], lo: Option<&[f64]>, slope_minus: f64, slope_plus: f64, h: f64, out: &mut [f64]) {
    d2_into(hi, slope_minus, slope_plus, h, out);
    if let Some(lo) = lo {
        let n = hi.len();
        let ih2 = 1.0 / (h * h);
        out[0] += 2.0 * (lo[1] - lo[0]) * ih2;
        for i in 1..n - 1 {
            out[i] += ((lo[i + 1] - lo[i]) - (lo[i] - lo[i - 1])) * ih2;
        }
        out[n - 1] -= 2.0 * (lo[n - 1] - lo[n - 2]) * ih2;
    }
}

/// Second-difference stencil on raw values; see the module docs for the ends.
pub fn d2_into(values: &[f64], slope_minus: f64, slope_plus: f64, h: f64, out: &mut [f64]) {
    let n = values.len();
    let ih2 = 1.0 / (h * h);
    out[0] = 2.0 * ((values[1] - values[0]) * ih2 - slope_minus / h);
    for i in 1..n - 1 {
        // Differencing neighbours first keeps the error relative to the slopes.
        out[i] = ((values[i + 1] - values[i]) - (values[i] - values[i - 1])) * ih2;
    }
    out[n - 1] = 2.0 * (slope_plus / h - (values[n - 1] - values[n - 2]) * ih2);
}

/// Coefficients `(lower, diag, upper)` of row `i` of the stencil in [`d2_into`].
pub fn d2_row(i: usize, n: usize, h: f64) -> (f64, f64, f64) {
    let ih2 = 1.0 / (h * h);
    if i == 0 {
        (0.0, -2.0 * ih2, 2.0 * ih2)
    } else if i + 1 == n {
        (2.0 * ih2, -2.0 * ih2, 0.0)
    } else {
        (ih2, -2.0 * ih2, ih2)
    }
}

/// Trapezoid integral of nodal samples.
pub fn integrate(grid: &SGrid, samples: &[f64]) -> f64 {
    grid.weights().iter().zip(samples).map(|(w, f)| w * f).sum()
}

/// Least-squares slope and intercept of `values[range]` against the nodes.
pub fn fit_line(grid: &SGrid, values: &[f64], range: Range<usize>) -> Option<(f64, f64)> {
    let m = range.len();
    if m < 2 {
        return None;
    }
    let xs: Vec<f64> = range.clone().map(|i| grid.node(i)).collect();
    let ys = &values[range];
    let mx = xs.iter().sum::<f64>() / m as f64;
    let my = ys.iter().sum::<f64>() / m as f64;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Solves a tridiagonal system in place (Thomas algorithm).
///
/// `lower[0]` and `upper[n-1]` are ignored. Returns `None` on a zero pivot.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) -> Option<()> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut beta = diag[0];
    if beta == 0.0 || !beta.is_finite() {
        return None;
    }
    rhs[0] /= beta;
    for i in 1..n {
        c[i - 1] = upper[i - 1] / beta;
        beta = diag[i] - lower[i] * c[i - 1];
        if beta == 0.0 || !beta.is_finite() {
            return None;
        }
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
    Some(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> SGrid {
        SGrid::new(-6.0, 6.0, 241).unwrap()
    }

    #[test]
    fn spacing_and_nodes() {
        let g = SGrid::new(-14.0, 10.0, 2049).unwrap();
        assert!((g.spacing() - 24.0 / 2048.0).abs() < 1e-15);
        assert_eq!(g.node(0), -14.0);
        assert_eq!(g.node(2048), 10.0);
        assert_eq!(g.refined(2).len(), 4097);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(SGrid::new(-1.0, 1.0, 2).is_err());
        assert!(SGrid::new(1.0, 2.0, 10).is_err());
        assert!(SGrid::new(-2.0, -1.0, 10).is_err());
        assert_eq!(
            SGrid::from_nodes(&[-1.0, 0.0, 1.5, 2.5]),
            Err(Error::NonUniformGrid { index: 2 })
        );
        let g = SGrid::from_nodes(&[-1.0, -0.5, 0.0, 0.5]).unwrap();
        assert_eq!(g.len(), 4);
    }

    #[test]
    fn linear_profiles_are_flat() {
        let p = RadialProfile::from_fn(grid(), 3.0, 3.0, |s| 3.0 * s + 1.0).unwrap();
        for v in d2(&p) {
            assert!(v.abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn quadratic_has_unit_density() {
        let g = grid();
        let p = RadialProfile::from_fn(g, g.s_min(), g.s_max(), |s| 0.5 * s * s).unwrap();
        for v in d2(&p) {
            assert!((v - 1.0).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn softplus_second_derivative() {
        // d^2/ds^2 of 2 log(1+e^s) is 2 e^s / (1+e^s)^2.
        let exact = |s: f64| 2.0 * s.exp() / (1.0 + s.exp()).powi(2);
        let mut errs = Vec::new();
        for n in [121, 241, 481] {
            let g = SGrid::new(-6.0, 6.0, n).unwrap();
            let p = RadialProfile::from_fn(g, 0.0, 2.0, |s| 2.0 * s.exp().ln_1p()).unwrap();
            let d = d2(&p);
            let err = (1..n - 1)
                .map(|i| (d[i] - exact(g.node(i))).abs())
                .fold(0.0, f64::max);
            errs.push(err);
        }
        assert!(errs[0] / errs[1] > 3.5 && errs[1] / errs[2] > 3.5, "{errs:?}");
    }

    #[test]
    fn mass_telescopes() {
        let g = grid();
        let p = RadialProfile::from_fn(g, 0.3, 2.0, |s| {
            0.3 * s + 1.7 * s.exp().ln_1p() + 0.2 * (-s * s).exp()
        })
        .unwrap();
        let total = integrate(&g, &d2(&p));
        assert!((total - p.mass()).abs() < 1e-10, "{total}");
    }

    #[test]
    fn window_indices() {
        let g = SGrid::new(-4.0, 4.0, 9).unwrap();
        assert_eq!(g.window(-2.0, 1.0), 2..6);
        assert_eq!(g.window(-10.0, -5.0), 0..0);
        assert_eq!(g.window(3.5, 10.0), 8..9);
        assert_eq!(g.nearest(0.4), 4);
    }

    #[test]
    fn line_fit_recovers_slope() {
        let g = grid();
        let p = RadialProfile::from_fn(g, 0.7, 0.7, |s| 0.7 * s - 2.0).unwrap();
        let (a, b) = fit_line(&g, p.values(), g.window(-5.0, -1.0)).unwrap();
        assert!((a - 0.7).abs() < 1e-12 && (b + 2.0).abs() < 1e-12);
    }

    #[test]
    fn tridiagonal_solve() {
        let lower = [0.0, -1.0, -1.0, -1.0];
        let diag = [2.0, 2.0, 2.0, 2.0];
        let upper = [-1.0, -1.0, -1.0, 0.0];
        let x = [1.0, -2.0, 0.5, 3.0];
        let mut rhs: Vec<f64> = (0..4)
            .map(|i| {
                let mut r = diag[i] * x[i];
                if i > 0 {
                    r += lower[i] * x[i - 1];
                }
                if i < 3 {
                    r += upper[i] * x[i + 1];
                }
                r
            })
            .collect();
        solve_tridiagonal(&lower, &diag, &upper, &mut rhs).unwrap();
        for (a, b) in rhs.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
