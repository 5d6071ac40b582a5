//! Seeded random initial data for the property sweeps.

use rand::Rng;

use crate::grid::{RadialProfile, SGrid};

/// Largest fraction of `omega` a random datum may remove from `omega_t`.
pub const CURVATURE_BUDGET: f64 = 0.4;

/// Sum of three to five Gaussian bumps centred in `[-3, 3]`, scaled so that
/// `u'' >= -budget omega''` at every node.
pub fn random_smooth_data<R: Rng>(grid: SGrid, omega: &[f64], budget: f64, rng: &mut R) -> RadialProfile {
    let bumps: Vec<(f64, f64, f64)> = (0..rng.gen_range(3..=5))
        .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-3.0..3.0), rng.gen_range(0.4..1.2)))
        .collect();
    let raw = RadialProfile::from_fn(grid, 0.0, 0.0, |s| {
        bumps
            .iter()
            .map(|&(a, c, w)| a * (-(s - c).powi(2) / (2.0 * w * w)).exp())
            .sum()
    })
    .expect("bumps are finite");
    let worst = raw
        .d2()
        .iter()
        .zip(omega)
        .map(|(d, o)| -d / o)
        .fold(0.0_f64, f64::max);
    let scale = if worst > budget { budget / worst } else { 1.0 };
    raw.scaled(scale).shifted(rng.gen_range(-1.0..1.0))
}

/// A pair `u0 <= v0` of random data, each within the curvature budget.
pub fn random_ordered_pair<R: Rng>(grid: SGrid, omega: &[f64], rng: &mut R) -> (RadialProfile, RadialProfile) {
    let u0 = random_smooth_data(grid, omega, CURVATURE_BUDGET, rng);
    let w = random_smooth_data(grid, omega, 0.9 - CURVATURE_BUDGET, rng);
    let lift = (-w.min()).max(0.0) + rng.gen_range(0.0..0.5);
    let v0 = u0.axpy(1.0, &w.shifted(lift)).expect("shared grid");
    (u0, v0)
}

/// Sign-alternating perturbation `(0.05 / j) sin(pi s) e^{-s^2}`, of size `O(1/j)` in `L^1`.
pub fn alternating_perturbation(grid: SGrid, j: f64) -> RadialProfile {
    RadialProfile::from_fn(grid, 0.0, 0.0, |s| 0.05 / j * (std::f64::consts::PI * s).sin() * (-s * s).exp())
        .expect("finite perturbation")
}
