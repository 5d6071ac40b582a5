//! Dense tableau simplex for `max c.x` subject to `A x <= b`, `x >= 0`, `b >= 0`.
//!
//! The origin is feasible, so no first phase is needed. Pivoting follows
//! Dantzig's rule and switches to Bland's rule after a run of degenerate
//! pivots. Optimality is certified from the original data through the
//! duals read off the final tableau.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LinearProgram {
    /// Row-major constraint matrix with `rows` rows and `c.len()` columns.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Violations of the optimality conditions, all measured on the original data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpCertificate {
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
    pub complementarity: f64,
    pub duality_gap: f64,
}

impl LpCertificate {
    pub fn worst(&self) -> f64 {
        self.primal_infeasibility
            .max(self.dual_infeasibility)
            .max(self.complementarity)
            .max(self.duality_gap)
    }
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub objective: f64,
    pub pivots: usize,
    pub certificate: LpCertificate,
}

impl LinearProgram {
    pub fn rows(&self) -> usize {
        self.b.len()
    }

    pub fn cols(&self) -> usize {
        self.c.len()
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.cols() + j]
    }

    pub fn solve(&self) -> Result<LpSolution> {
        let (m, n) = (self.rows(), self.cols());
        if self.a.len() != m * n {
            return Err(Error::LinearProgram("matrix shape does not match b and c".into()));
        }
        if let Some(i) = self.b.iter().position(|&v| !(v >= 0.0)) {
            return Err(Error::Infeasible(format!("right-hand side {i} is {}", self.b[i])));
        }
        let width = n + m + 1;
        let mut t = vec![0.0; (m + 1) * width];
        for i in 0..m {
            t[i * width..i * width + n].copy_from_slice(&self.a[i * n..(i + 1) * n]);
            t[i * width + n + i] = 1.0;
            t[i * width + width - 1] = self.b[i];
        }
        for j in 0..n {
            t[m * width + j] = -self.c[j];
        }
        let mut basis: Vec<usize> = (n..n + m).collect();
        let max_pivots = 50 * (m + n) + 1000;
        let mut pivots = 0;
        let mut degenerate_run = 0;
        loop {
            let bland = degenerate_run > m + n;
            let obj = &t[m * width..m * width + n + m];
            let entering = if bland {
                obj.iter().position(|&r| r < -PIVOT_TOL)
            } else {
                obj.iter()
                    .enumerate()
                    .filter(|(_, &r)| r < -PIVOT_TOL)
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(j, _)| j)
            };
            let Some(q) = entering else { break };
            let mut leaving: Option<(usize, f64)> = None;
            for i in 0..m {
                let aiq = t[i * width + q];
                if aiq > PIVOT_TOL {
                    let ratio = t[i * width + width - 1] / aiq;
                    let better = match leaving {
                        None => true,
                        Some((r, best)) => {
                            ratio < best - 1e-14 || (ratio <= best + 1e-14 && basis[i] < basis[r])
                        }
                    };
                    if better {
                        leaving = Some((i, ratio));
                    }
                }
            }
            let Some((r, ratio)) = leaving else {
                return Err(Error::LinearProgram("objective unbounded".into()));
            };
            degenerate_run = if ratio <= 1e-14 { degenerate_run + 1 } else { 0 };
            pivot(&mut t, width, m, r, q);
            basis[r] = q;
            pivots += 1;
            if pivots > max_pivots {
                return Err(Error::LinearProgram(format!("no convergence after {pivots} pivots")));
            }
        }

        let mut x = vec![0.0; n];
        for (i, &bi) in basis.iter().enumerate() {
            if bi < n {
                x[bi] = t[i * width + width - 1].max(0.0);
            }
        }
        let y: Vec<f64> = (0..m).map(|i| t[m * width + n + i].max(0.0)).collect();
        let objective = self.c.iter().zip(&x).map(|(c, x)| c * x).sum();
        let certificate = self.certify(&x, &y);
        Ok(LpSolution { x, y, objective, pivots, certificate })
    }

    /// Optimality residuals of a primal-dual pair, relative to the data scale.
    pub fn certify(&self, x: &[f64], y: &[f64]) -> LpCertificate {
        let (m, n) = (self.rows(), self.cols());
        let mut primal: f64 = x.iter().map(|&v| (-v).max(0.0)).fold(0.0, f64::max);
        let mut compl: f64 = 0.0;
        let scale = self.a.iter().fold(1.0_f64, |s, v| s.max(v.abs()));
        for i in 0..m {
            let ax: f64 = (0..n).map(|j| self.entry(i, j) * x[j]).sum();
            let slack = self.b[i] - ax;
            primal = primal.max(-slack / scale);
            compl = compl.max((y[i] * slack).abs() / scale);
        }
        let mut dual: f64 = y.iter().map(|&v| (-v).max(0.0)).fold(0.0, f64::max);
        for j in 0..n {
            let aty: f64 = (0..m).map(|i| self.entry(i, j) * y[i]).sum();
            let reduced = aty - self.c[j];
            dual = dual.max(-reduced / scale);
            compl = compl.max((x[j] * reduced).abs() / scale);
        }
        let cx: f64 = self.c.iter().zip(x).map(|(c, x)| c * x).sum();
        let by: f64 = self.b.iter().zip(y).map(|(b, y)| b * y).sum();
        LpCertificate {
            primal_infeasibility: primal.max(0.0),
            dual_infeasibility: dual.max(0.0),
            complementarity: compl,
            duality_gap: (cx - by).abs() / scale.max(cx.abs()),
        }
    }
}

fn pivot(t: &mut [f64], width: usize, m: usize, r: usize, q: usize) {
    let p = t[r * width + q];
    for v in &mut t[r * width..(r + 1) * width] {
        *v /= p;
    }
    let pivot_row: Vec<f64> = t[r * width..(r + 1) * width].to_vec();
    for i in 0..=m {
        if i == r {
            continue;
        }
        let f = t[i * width + q];
        if f != 0.0 {
            let row = &mut t[i * width..(i + 1) * width];
            for (v, pr) in row.iter_mut().zip(&pivot_row) {
                *v -= f * pr;
            }
            row[q] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_problem() {
        // max 3x + 5y, x <= 4, 2y <= 12, 3x + 2y <= 18 -> (2, 6), value 36.
        let lp = LinearProgram {
            a: vec![1.0, 0.0, 0.0, 2.0, 3.0, 2.0],
            b: vec![4.0, 12.0, 18.0],
            c: vec![3.0, 5.0],
        };
        let sol = lp.solve().unwrap();
        assert!((sol.objective - 36.0).abs() < 1e-12);
        assert!((sol.x[0] - 2.0).abs() < 1e-12 && (sol.x[1] - 6.0).abs() < 1e-12);
        assert!(sol.certificate.worst() < 1e-12);
    }

    #[test]
    fn unbounded_and_infeasible_are_reported() {
        let lp = LinearProgram { a: vec![-1.0], b: vec![1.0], c: vec![1.0] };
        assert!(matches!(lp.solve(), Err(Error::LinearProgram(_))));
        let lp = LinearProgram { a: vec![1.0], b: vec![-1.0], c: vec![1.0] };
        assert!(matches!(lp.solve(), Err(Error::Infeasible(_))));
    }

    #[test]
    fn degenerate_problem_terminates() {
        // Klee-Minty-like cube with degenerate corners.
        let lp = LinearProgram {
            a: vec![1.0, 0.0, 0.0, 4.0, 1.0, 0.0, 8.0, 4.0, 1.0, 1.0, 1.0, 1.0],
            b: vec![5.0, 25.0, 125.0, 0.0],
            c: vec![4.0, 2.0, 1.0],
        };
        let sol = lp.solve().unwrap();
        assert!(sol.objective.abs() < 1e-12);
        assert!(sol.certificate.worst() < 1e-12);
    }
}
