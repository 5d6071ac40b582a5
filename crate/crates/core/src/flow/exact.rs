//! Closed-form flow on P^1 with `omega = Ric(omega)` of mass 2.

use crate::error::{Error, Result};
use crate::grid::{RadialProfile, SGrid};

/// `phi_{0,j}(s) = 2 log(e^s + 1/j) - 2 log(e^s + 1)`.
pub fn example_initial_data(j: f64, grid: SGrid) -> Result<RadialProfile> {
    if !(j >= 1.0) {
        return Err(Error::InvalidParameter(format!("j must be >= 1, got {j}")));
    }
    RadialProfile::from_fn(grid, 0.0, 0.0, |s| 2.0 * log_ratio(s, 1.0 / j))
}

/// `phi_{t,j} = (1-t) phi_{0,j} - t log j - t + (t-1) log(1-t)`, valid for `0 <= t < 1`.
pub fn exact_example_solution(j: f64, t: f64, grid: SGrid) -> Result<RadialProfile> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::OutOfRange(format!("closed form needs 0 <= t < 1, got {t}")));
    }
    let shift = -t * j.ln() - t + (t - 1.0) * (-t).ln_1p();
    Ok(example_initial_data(j, grid)?.scaled(1.0 - t).shifted(shift))
}

/// `log((e^s + c) / (e^s + 1))` without overflow at either end.
fn log_ratio(s: f64, c: f64) -> f64 {
    if s > 0.0 {
        let e = (-s).exp();
        (c * e).ln_1p() - e.ln_1p()
    } else {
        (s.exp() + c).ln() - s.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_condition_and_trivial_member() {
        let g = SGrid::new(-14.0, 10.0, 97).unwrap();
        let p0 = example_initial_data(10.0, g).unwrap();
        assert_eq!(exact_example_solution(10.0, 0.0, g).unwrap(), p0);
        for i in 0..g.len() {
            let s = g.node(i);
            let direct = 2.0 * (s.exp() + 0.1).ln() - 2.0 * (s.exp() + 1.0).ln();
            assert!((p0.get(i) - direct).abs() < 1e-12);
        }
        let t = 0.4;
        let one = exact_example_solution(1.0, t, g).unwrap();
        let expect = -t + (t - 1.0) * (1.0 - t).ln();
        assert!(one.values().iter().all(|v| (v - expect).abs() < 1e-14));
        assert!(exact_example_solution(2.0, 1.0, g).is_err());
    }
}
