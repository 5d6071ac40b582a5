//! Log poles at `z = 0` (i.e. `s -> -inf`) and the pluripotential tools used
//! to measure and regularize them.
//!
//! Conventions: a profile with slope `a` at `s -> -inf` has Lelong number
//! `nu = 2a` and integrability index `c = 1 / nu`. Integrals are taken against
//! the normalized Fubini–Study density `e^s / (1 + e^s)^2`; integrability does
//! not depend on the smooth volume form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{softplus, BackgroundGeometry};
use crate::grid::{d2, fit_line, integrate, two_sum, RadialProfile, SGrid};

/// Relative window-shift sensitivity above which a Lelong fit is flagged.
pub const LELONG_SENSITIVITY: f64 = 1e-2;

/// Half-width of the band around `2 lambda a = 1` reported as critical.
pub const CRITICAL_BAND: f64 = 1e-3;

/// Single log pole of coefficient `a` plus a bounded regular part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularitySpec {
    pub pole_coefficient: f64,
    pub bounded_tail: RadialProfile,
}

impl SingularitySpec {
    pub fn new(pole_coefficient: f64, bounded_tail: RadialProfile) -> Result<Self> {
        if !(pole_coefficient >= 0.0) || !pole_coefficient.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "pole coefficient must be finite and >= 0, got {pole_coefficient}"
            )));
        }
        if bounded_tail.slope_minus != 0.0 || bounded_tail.slope_plus != 0.0 {
            return Err(Error::InvalidParameter(
                "the regular part must be bounded (both slopes zero)".into(),
            ));
        }
        Ok(Self {
            pole_coefficient,
            bounded_tail,
        })
    }

    /// Pure pole `-a log(1 + e^{-s})` on `grid`.
    pub fn pole(pole_coefficient: f64, grid: SGrid) -> Result<Self> {
        Self::new(pole_coefficient, RadialProfile::zeros(grid))
    }

    pub fn grid(&self) -> &SGrid {
        self.bounded_tail.grid()
    }

    pub fn lelong(&self) -> f64 {
        2.0 * self.pole_coefficient
    }

    /// `c = 1 / (2a)`, infinite without a pole.
    pub fn integrability_index(&self) -> f64 {
        if self.pole_coefficient > 0.0 {
            1.0 / self.lelong()
        } else {
            f64::INFINITY
        }
    }

    /// `phi_0 = -a log(1 + e^{-s}) + tail` with slopes `(a, 0)`.
    pub fn profile(&self) -> RadialProfile {
        self.profile_on(*self.grid())
    }

    /// [`Self::profile`] sampled on another grid; the tail is interpolated.
    pub fn profile_on(&self, grid: SGrid) -> RadialProfile {
        let a = self.pole_coefficient;
        let values = grid
            .nodes()
            .into_iter()
            .map(|s| -a * softplus(-s) + self.bounded_tail.value_at(s))
            .collect();
        RadialProfile::new(grid, values, a, 0.0).expect("finite by construction")
    }
}

/// Least-squares Lelong number on a window, with its sensitivity to shifting
/// the window by a quarter of its width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LelongEstimate {
    pub nu: f64,
    pub slope: f64,
    pub window: (f64, f64),
    pub sensitivity: f64,
    pub low_confidence: bool,
}

pub fn lelong_number(p: &RadialProfile, window: (f64, f64)) -> Result<LelongEstimate> {
    let g = p.grid();
    let (lo, hi) = window;
    if !(lo < hi) || lo < g.s_min() || hi >= 0.0 {
        return Err(Error::OutOfRange(format!(
            "Lelong window [{lo}, {hi}] must lie in [{}, 0)",
            g.s_min()
        )));
    }
    let fit = |lo: f64, hi: f64| -> Option<f64> {
        let r = g.window(lo, hi);
        fit_line(g, p.values(), r).map(|(slope, _)| slope)
    };
    let slope = fit(lo, hi)
        .ok_or_else(|| Error::OutOfRange(format!("window [{lo}, {hi}] holds fewer than two nodes")))?;
    let shift = 0.25 * (hi - lo);
    let mut sensitivity: f64 = 0.0;
    for d in [-shift, shift] {
        let (a, b) = (lo + d, hi + d);
        if a >= g.s_min() && b < 0.0 {
            if let Some(other) = fit(a, b) {
                sensitivity = sensitivity.max(2.0 * (other - slope).abs());
            }
        }
    }
    let nu = 2.0 * slope;
    Ok(LelongEstimate {
        nu,
        slope,
        window,
        sensitivity,
        low_confidence: sensitivity > LELONG_SENSITIVITY * nu.abs().max(1.0),
    })
}

/// Outcome of a quadrature of `e^{kappa f}` with analytic tails.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrabilityCertificate {
    pub exponent: f64,
    /// Grid quadrature plus tail contributions; infinite when divergent.
    pub value: f64,
    pub divergent: bool,
    /// Fitted slope of the integrand's log at `s -> -inf`.
    pub tail_slope: f64,
    /// Decay rate `1 + kappa * slope` of the left tail.
    pub tail_exponent: f64,
    /// Set when the tail exponent lies within [`CRITICAL_BAND`] of zero.
    pub critical: bool,
}

/// `int e^{kappa f} dV` with the left tail extrapolated from the fitted slope
/// of `f` over the leftmost unit of the grid and the right tail from the
/// declared `slope_plus`.
fn exp_integral(f: &RadialProfile, kappa: f64) -> IntegrabilityCertificate {
    let g = f.grid();
    let nodes = g.nodes();
    let left = g.window(g.s_min(), g.s_min() + 1.0_f64.max(4.0 * g.spacing()));
    let (slope, intercept) = fit_line(g, f.values(), left).unwrap_or((f.slope_minus, f.get(0)));
    let tail_exponent = 1.0 + kappa * slope;
    let right_exponent = 1.0 - kappa * f.slope_plus;
    let critical = tail_exponent.abs() <= CRITICAL_BAND;
    let divergent = tail_exponent <= CRITICAL_BAND || right_exponent <= 0.0;
    let value = if divergent {
        f64::INFINITY
    } else {
        let samples: Vec<f64> = nodes
            .iter()
            .zip(f.values())
            .map(|(&s, &v)| (kappa * v).exp() * fs_density(s))
            .collect();
        let s0 = g.s_min();
        let s1 = g.s_max();
        // dV ~ e^s on the left and e^{-s} on the right.
        let left_tail = (kappa * intercept + tail_exponent * s0).exp() / tail_exponent;
        let right_tail = (kappa * f.get(g.len() - 1) - s1).exp() / right_exponent;
        integrate(g, &samples) + left_tail + right_tail
    };
    IntegrabilityCertificate {
        exponent: kappa,
        value,
        divergent,
        tail_slope: slope,
        tail_exponent,
        critical,
    }
}

fn fs_density(s: f64) -> f64 {
    let e = (-s.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Skoda-type test of `e^{-2 lambda p} in L^1`.
pub fn skoda_check(p: &RadialProfile, lambda: f64) -> Result<IntegrabilityCertificate> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    Ok(exp_integral(p, -2.0 * lambda))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrabilityIndex {
    pub index: f64,
    pub lelong: f64,
    /// Skoda checks at `0.9 c` and `1.1 c`; absent when `c` is infinite.
    pub below: Option<IntegrabilityCertificate>,
    pub above: Option<IntegrabilityCertificate>,
    /// False when the quadrature disagrees with `c = 1 / nu`.
    pub consistent: bool,
}

/// `c = 1/nu` from the Lelong number measured on `window`, cross-checked by
/// [`skoda_check`] at `c (1 -+ 0.1)`.
pub fn integrability_index(p: &RadialProfile, window: (f64, f64)) -> Result<IntegrabilityIndex> {
    let est = lelong_number(p, window)?;
    // Slopes below the fit noise count as no pole.
    if est.nu <= 1e-6 {
        return Ok(IntegrabilityIndex {
            index: f64::INFINITY,
            lelong: est.nu.max(0.0),
            below: None,
            above: None,
            consistent: !skoda_check(p, 1.0)?.divergent,
        });
    }
    let c = 1.0 / est.nu;
    let below = skoda_check(p, 0.9 * c)?;
    let above = skoda_check(p, 1.1 * c)?;
    Ok(IntegrabilityIndex {
        index: c,
        lelong: est.nu,
        consistent: !below.divergent && above.divergent,
        below: Some(below),
        above: Some(above),
    })
}

/// Less singular approximant of a pole together with its integrability certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquisingularApprox {
    pub psi: RadialProfile,
    pub pole_coefficient: f64,
    pub certificate: IntegrabilityCertificate,
}

/// `psi_eps = tail - a' log(1 + e^{-s})` with `a' = max(a - eps/4, 0)`.
///
/// `psi_eps - phi = (a - a') log(1 + e^{-s}) >= 0`, and `e^{2(psi_eps - phi)/eps}`
/// decays like `e^{(1 - 2(a - a')/eps) s}` at the pole, so it is integrable.
pub fn equisingular_approx(spec: &SingularitySpec, eps: f64) -> Result<EquisingularApprox> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    let a = spec.pole_coefficient;
    let a_prime = (a - 0.25 * eps).max(0.0);
    let reduced = SingularitySpec::new(a_prime, spec.bounded_tail.clone())?;
    let psi = reduced.profile();
    let gap = psi.axpy(-1.0, &spec.profile())?;
    let certificate = exp_integral(&gap, 2.0 / eps);
    if certificate.divergent {
        return Err(Error::CertificateDivergent(format!(
            "e^(2(psi - phi)/eps) not integrable for a = {a}, eps = {eps}"
        )));
    }
    Ok(EquisingularApprox {
        psi,
        pole_coefficient: a_prime,
        certificate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Supersolution {
    pub profile: RadialProfile,
    /// `C_0` with `dd^c p <= C_0 e^{-gamma p} omega` on the grid.
    pub curvature_bound: f64,
    /// Growth rate `log(2 C_0)` of the supersolution.
    pub rate: f64,
}

/// `(1 - gamma t) p + t log(2 C_0)` where `C_0 = max(1, max p'' e^{gamma p} / omega'')`.
///
/// Requires `p <= 0`, `e^{gamma p}` smooth (so the maximum is finite) and
/// `0 <= t <= 1/gamma`.
pub fn supersolution(p: &RadialProfile, gamma: f64, t: f64, bg: &BackgroundGeometry) -> Result<Supersolution> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    if !(0.0..=1.0 / gamma).contains(&t) {
        return Err(Error::OutOfRange(format!("t = {t} outside [0, 1/gamma = {}]", 1.0 / gamma)));
    }
    if p.grid() != bg.grid() {
        return Err(Error::GridMismatch);
    }
    if p.max() > 1e-12 {
        return Err(Error::InvalidParameter(format!("profile must be <= 0, max is {}", p.max())));
    }
    let omega = d2(&bg.g0);
    let curvature_bound = d2(p)
        .iter()
        .zip(p.values())
        .zip(&omega)
        .map(|((&dp, &v), &w)| dp * (gamma * v).exp() / w)
        .fold(1.0_f64, f64::max);
    let rate = (2.0 * curvature_bound).ln();
    let profile = p.scaled(1.0 - gamma * t).shifted(rate * t);
    Ok(Supersolution {
        profile,
        curvature_bound,
        rate,
    })
}

/// Relative tolerance on `int f dV = mass_omega` in [`solve_ma_radial`].
pub const COMPATIBILITY_RTOL: f64 = 1e-3;

/// Solves `omega + dd^c u = f omega` with `max u = 0`.
///
/// `f` is renormalized to the exact discrete mass once it passes the
/// compatibility check, so the discrete equation holds to round-off.
pub fn solve_ma_radial(f: &[f64], bg: &BackgroundGeometry) -> Result<RadialProfile> {
    let grid = *bg.grid();
    if f.len() != grid.len() {
        return Err(Error::InvalidParameter(format!(
            "density has {} samples for {} nodes",
            f.len(),
            grid.len()
        )));
    }
    if let Some(i) = f.iter().position(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidParameter(format!("density is negative or non-finite at node {i}")));
    }
    let omega = d2(&bg.g0);
    let fw: Vec<f64> = f.iter().zip(&omega).map(|(a, b)| a * b).collect();
    let mass = integrate(&grid, &fw);
    if (mass - bg.mass_omega).abs() > COMPATIBILITY_RTOL * bg.mass_omega {
        return Err(Error::Incompatible(format!(
            "int f dV = {mass}, expected {}",
            bg.mass_omega
        )));
    }
    let scale = bg.mass_omega / mass;
    // Cell fluxes of u: q_{i+1/2} = sum_{k <= i} w_k r_k with r = (f - 1) omega.
    let w = grid.weights();
    let h = grid.spacing();
    // Values are accumulated as hi + lo so that deep second differences,
    // which are far below the round-off of the values, stay exact.
    let mut values = vec![0.0; grid.len()];
    let mut low = vec![0.0; grid.len()];
    let mut flux = 0.0;
    for i in 0..grid.len() - 1 {
        flux += w[i] * (scale * fw[i] - omega[i]);
        let (hi, err) = two_sum(values[i], h * flux);
        values[i + 1] = hi;
        low[i + 1] = low[i] + err;
    }
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (v, l) in values.iter_mut().zip(&mut low) {
        let (hi, err) = two_sum(*v, -top);
        *v = hi;
        *l += err;
    }
    RadialProfile::new(grid, values, 0.0, 0.0)?.with_low(low)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::example_initial_data;
    use crate::geometry::make_fubini_study;

    fn grid() -> SGrid {
        SGrid::new(-30.0, 10.0, 1601).unwrap()
    }

    #[test]
    fn spec_conventions() {
        let s = SingularitySpec::pole(0.2, grid()).unwrap();
        assert!((s.lelong() - 0.4).abs() < 1e-15);
        assert!((s.integrability_index() * s.lelong() - 1.0).abs() < 1e-15);
        assert_eq!(SingularitySpec::pole(0.0, grid()).unwrap().integrability_index(), f64::INFINITY);
        assert!(SingularitySpec::pole(-1.0, grid()).is_err());
        let p = s.profile();
        assert_eq!((p.slope_minus, p.slope_plus), (0.2, 0.0));
        assert!(p.max() <= 0.0);
    }

    #[test]
    fn lelong_of_linear_profiles() {
        let g = grid();
        for a in [0.1, 0.5, 1.7] {
            let p = RadialProfile::from_fn(g, a, a, |s| a * s).unwrap();
            let est = lelong_number(&p, (-25.0, -15.0)).unwrap();
            assert!((est.nu - 2.0 * a).abs() < 1e-6, "{est:?}");
            assert!(!est.low_confidence);
        }
        let bounded = RadialProfile::from_fn(g, 0.0, 0.0, |s| (s.exp()).ln_1p().min(1.0)).unwrap();
        assert!(lelong_number(&bounded, (-25.0, -15.0)).unwrap().nu.abs() < 1e-6);
        assert!(lelong_number(&bounded, (-40.0, -15.0)).is_err());
        assert!(lelong_number(&bounded, (-5.0, 1.0)).is_err());
    }

    #[test]
    fn example_data_has_index_one_quarter() {
        let g = SGrid::new(-14.0, 10.0, 2049).unwrap();
        let spec = SingularitySpec::pole(2.0, g).unwrap();
        let ix = integrability_index(&spec.profile(), (-12.0, -8.0)).unwrap();
        assert!((ix.lelong - 4.0).abs() < 1e-3, "{ix:?}");
        assert!((ix.index - 0.25).abs() < 1e-4);
        assert!(ix.consistent);
        let smooth = example_initial_data(1.0, g).unwrap();
        let ix = integrability_index(&smooth, (-12.0, -10.0)).unwrap();
        assert_eq!(ix.index, f64::INFINITY);
        assert!(ix.consistent);
    }

    #[test]
    fn skoda_threshold() {
        let g = grid();
        let p = RadialProfile::from_fn(g, 2.0, 2.0, |s| 2.0 * s).unwrap();
        assert!(!skoda_check(&p, 0.24).unwrap().divergent);
        assert!(skoda_check(&p, 0.26).unwrap().divergent);
        let edge = skoda_check(&p, 0.25).unwrap();
        assert!(edge.critical && edge.divergent);
        let spec = SingularitySpec::pole(0.25, g).unwrap();
        let ix = integrability_index(&spec.profile(), (-25.0, -15.0)).unwrap();
        assert!((ix.index - 2.0).abs() < 1e-6);
        assert!(!skoda_check(&spec.profile(), 1.8).unwrap().divergent);
        assert!(skoda_check(&spec.profile(), 2.2).unwrap().divergent);
        let bounded = RadialProfile::zeros(g);
        assert!(!skoda_check(&bounded, 50.0).unwrap().divergent);
    }

    #[test]
    fn skoda_quadrature_matches_closed_form() {
        // With x = e^s / (1 + e^s), e^{-2 lambda p} dV = x^{-2 lambda a} dx on (0, 1).
        let spec = SingularitySpec::pole(0.5, grid()).unwrap();
        for lambda in [0.2, 0.5, 0.8] {
            let cert = skoda_check(&spec.profile(), lambda).unwrap();
            let exact = 1.0 / (1.0 - lambda);
            assert!((cert.value - exact).abs() < 1e-4 * exact, "{cert:?}");
        }
    }

    #[test]
    fn equisingular_cases() {
        let g = grid();
        let zero = SingularitySpec::pole(0.0, g).unwrap();
        let e = equisingular_approx(&zero, 0.3).unwrap();
        assert_eq!(e.psi, zero.profile());
        let two = SingularitySpec::pole(2.0, g).unwrap();
        let e = equisingular_approx(&two, 1.0).unwrap();
        assert!((e.pole_coefficient - 1.75).abs() < 1e-15);
        assert!(!e.certificate.divergent && e.certificate.value.is_finite());
        assert!((e.certificate.tail_exponent - 0.5).abs() < 1e-6);
        let p = two.profile();
        assert!(e.psi.values().iter().zip(p.values()).all(|(a, b)| a >= b));
    }

    #[test]
    fn supersolution_slope() {
        let g = grid();
        let bg = make_fubini_study(2.0, g).unwrap();
        let p = SingularitySpec::pole(2.0, g).unwrap().profile();
        let s0 = supersolution(&p, 0.5, 0.0, &bg).unwrap();
        assert_eq!(s0.profile, p);
        let s1 = supersolution(&p, 0.5, 1.0, &bg).unwrap();
        assert!((s1.profile.slope_minus - 1.0).abs() < 1e-15);
        let half = supersolution(&p, 0.5, 0.5, &bg).unwrap();
        let est = lelong_number(&half.profile, (-25.0, -15.0)).unwrap();
        assert!((est.nu - 3.0).abs() < 1e-6, "{est:?}");
        assert!(supersolution(&p, 0.5, 2.5, &bg).is_err());
    }

    #[test]
    fn ma_solve_inverts_example_density() {
        let g = SGrid::new(-14.0, 10.0, 2049).unwrap();
        let bg = make_fubini_study(2.0, g).unwrap();
        let ones = vec![1.0; g.len()];
        let u = solve_ma_radial(&ones, &bg).unwrap();
        assert!(u.values().iter().all(|v| v.abs() < 1e-12));
        let j: f64 = 10.0;
        let phi = example_initial_data(j, g).unwrap();
        let f: Vec<f64> = phi.values().iter().map(|v| (-v - j.ln()).exp()).collect();
        let u = solve_ma_radial(&f, &bg).unwrap();
        let diff: Vec<f64> = u.values().iter().zip(phi.values()).map(|(a, b)| a - b).collect();
        let spread = diff.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - diff.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(spread < 1e-3, "spread {spread}");
        let twice = vec![2.0; g.len()];
        assert!(matches!(solve_ma_radial(&twice, &bg), Err(Error::Incompatible(_))));
    }
}
