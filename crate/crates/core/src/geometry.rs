//! Background geometry of the torus-invariant reduction of P^1.
//!
//! Every closed (1,1)-form is represented by a potential of `s`; its mass is
//! the slope difference. The evolving class is `theta_t = omega + t chi` with
//! `chi = eta - Ric(omega)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{d2, RadialProfile, SGrid};

/// Choice of the twisting form `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EtaSpec {
    /// `eta = 0`: the plain Kähler–Ricci flow.
    Zero,
    /// `eta = factor * omega`.
    OmegaMultiple { factor: f64 },
    /// `eta = Ric(omega)`, which freezes the class.
    Ricci,
}

/// Fubini–Study background of mass `volume` twisted by `eta`, buildable on any grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FubiniStudy {
    pub volume: f64,
    pub eta: EtaSpec,
}

impl FubiniStudy {
    pub fn new(volume: f64, eta: EtaSpec) -> Self {
        Self { volume, eta }
    }

    pub fn build(&self, grid: SGrid) -> Result<BackgroundGeometry> {
        make_fubini_study(self.volume, grid)?.with_eta(self.eta)
    }

    pub fn class_path(&self, grid: SGrid) -> Result<ClassPath> {
        Ok(self.build(grid)?.class_path())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundGeometry {
    pub g0: RadialProfile,
    pub eta_hat: RadialProfile,
    pub ricci_hat: RadialProfile,
    pub mass_omega: f64,
    pub mass_c1: f64,
}

/// Fubini–Study potential `g0 = V log(1 + e^s)` of total mass `V`, with `eta = 0`.
pub fn make_fubini_study(volume: f64, grid: SGrid) -> Result<BackgroundGeometry> {
    if !(volume > 0.0) || !volume.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "Kähler mass must be positive, got {volume}"
        )));
    }
    let g0 = RadialProfile::from_fn(grid, 0.0, volume, |s| volume * softplus(s))?;
    // Closed form of s - log g0'': the numerical route differentiates four
    // times and loses all precision where g0'' ~ e^{-s}.
    let ricci_hat = RadialProfile::from_offset_fn(grid, 0.0, 2.0, -volume.ln(), |s| 2.0 * softplus(s))?;
    Ok(BackgroundGeometry {
        eta_hat: RadialProfile::zeros(grid),
        mass_omega: g0.mass(),
        mass_c1: ricci_hat.mass(),
        g0,
        ricci_hat,
    })
}

impl BackgroundGeometry {
    /// Background for an arbitrary strictly convex potential, with `eta = 0`.
    pub fn from_potential(g0: RadialProfile) -> Result<Self> {
        let ricci_hat = ricci_potential(&g0)?;
        let mass_omega = g0.mass();
        let mass_c1 = ricci_hat.mass();
        Ok(Self {
            eta_hat: RadialProfile::zeros(*g0.grid()),
            g0,
            ricci_hat,
            mass_omega,
            mass_c1,
        })
    }

    pub fn with_eta(mut self, eta: EtaSpec) -> Result<Self> {
        self.eta_hat = match eta {
            EtaSpec::Zero => RadialProfile::zeros(*self.g0.grid()),
            EtaSpec::OmegaMultiple { factor } => {
                if !(factor >= 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "eta must be semipositive, got factor {factor}"
                    )));
                }
                self.g0.scaled(factor)
            }
            EtaSpec::Ricci => self.ricci_hat.clone(),
        };
        Ok(self)
    }

    pub fn grid(&self) -> &SGrid {
        self.g0.grid()
    }

    pub fn mass_eta(&self) -> f64 {
        self.eta_hat.mass()
    }

    /// Potential of `chi = eta - Ric(omega)`.
    pub fn chi_hat(&self) -> RadialProfile {
        self.eta_hat
            .axpy(-1.0, &self.ricci_hat)
            .expect("background profiles share a grid")
    }

    pub fn class_path(&self) -> ClassPath {
        ClassPath::new(self)
    }
}

/// Potential of `Ric(omega)`: `r(s) = s - log g''(s)`.
///
/// The end-node densities of the finite-volume stencil carry the tail mass
/// of the truncated geometry, so `log g''` is extrapolated quadratically there.
/// Declared slopes are the P^1 values `(0, 2)`; use [`fitted_end_slopes`] to
/// measure them.
pub fn ricci_potential(g: &RadialProfile) -> Result<RadialProfile> {
    let grid = *g.grid();
    let n = grid.len();
    if n < 4 {
        return Err(Error::InvalidGrid("Ricci potential needs at least 4 nodes".into()));
    }
    let dens = d2(g);
    if let Some((index, &value)) = dens
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v > 0.0) || !v.is_finite())
    {
        return Err(Error::DegenerateMetric { index, value });
    }
    let mut log_dens: Vec<f64> = dens.iter().map(|v| v.ln()).collect();
    log_dens[0] = 3.0 * (log_dens[1] - log_dens[2]) + log_dens[3];
    log_dens[n - 1] = 3.0 * (log_dens[n - 2] - log_dens[n - 3]) + log_dens[n - 4];
    let values = grid
        .nodes()
        .iter()
        .zip(&log_dens)
        .map(|(s, l)| s - l)
        .collect();
    RadialProfile::new(grid, values, 0.0, 2.0)
}

/// End slopes of a profile measured from its last `cells` cells at each end.
pub fn fitted_end_slopes(p: &RadialProfile, cells: usize) -> (f64, f64) {
    let g = p.grid();
    let n = g.len();
    let k = cells.clamp(1, n - 1);
    let h = g.spacing() * k as f64;
    let v = p.values();
    ((v[k] - v[0]) / h, (v[n - 1] - v[n - 1 - k]) / h)
}

/// Supremum of times for which the class stays Kähler (possibly infinite).
pub fn compute_tmax(bg: &BackgroundGeometry) -> f64 {
    tmax_from_masses(bg.mass_omega, bg.mass_eta(), bg.mass_c1)
}

pub fn tmax_from_masses(mass_omega: f64, mass_eta: f64, mass_c1: f64) -> f64 {
    let rate = mass_eta - mass_c1;
    if rate >= 0.0 {
        f64::INFINITY
    } else {
        mass_omega / -rate
    }
}

/// The affine path of classes `theta_t = omega + t chi` with cached densities.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPath {
    g0: RadialProfile,
    chi: RadialProfile,
    omega_density: Arc<[f64]>,
    chi_density: Arc<[f64]>,
    t_max: f64,
}

impl ClassPath {
    pub fn new(bg: &BackgroundGeometry) -> Self {
        let chi = bg.chi_hat();
        Self {
            omega_density: d2(&bg.g0).into(),
            chi_density: d2(&chi).into(),
            g0: bg.g0.clone(),
            chi,
            t_max: compute_tmax(bg),
        }
    }

    pub fn grid(&self) -> &SGrid {
        self.g0.grid()
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn g0(&self) -> &RadialProfile {
        &self.g0
    }

    pub fn chi(&self) -> &RadialProfile {
        &self.chi
    }

    pub fn theta_potential(&self, t: f64) -> RadialProfile {
        self.g0.axpy(t, &self.chi).expect("shared grid")
    }

    pub fn omega_density(&self) -> &[f64] {
        &self.omega_density
    }

    pub fn chi_density(&self) -> &[f64] {
        &self.chi_density
    }

    pub fn theta_density(&self, t: f64) -> Vec<f64> {
        self.omega_density
            .iter()
            .zip(self.chi_density.iter())
            .map(|(w, x)| w + t * x)
            .collect()
    }

    pub fn theta_mass(&self, t: f64) -> f64 {
        self.g0.mass() + t * self.chi.mass()
    }

    /// Nodewise range of `theta_t / omega`.
    pub fn theta_ratio_range(&self, t: f64) -> (f64, f64) {
        self.omega_density
            .iter()
            .zip(self.chi_density.iter())
            .map(|(w, x)| 1.0 + t * x / w)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                (lo.min(r), hi.max(r))
            })
    }

    /// Largest time up to `horizon` with `lo <= theta_t / omega <= hi` on `[0, t]`.
    pub fn normalization_horizon(&self, lo: f64, hi: f64, horizon: f64) -> f64 {
        // The ratio is affine in t, so each node contributes one linear bound.
        let mut t = horizon;
        for (w, x) in self.omega_density.iter().zip(self.chi_density.iter()) {
            let rate = x / w;
            if rate < 0.0 {
                t = t.min((lo - 1.0) / rate);
            } else if rate > 0.0 {
                t = t.min((hi - 1.0) / rate);
            }
        }
        t.max(0.0)
    }
}

pub(crate) fn softplus(s: f64) -> f64 {
    if s > 30.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}
