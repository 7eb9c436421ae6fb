//! Dense dual active-set solver for small strictly convex QPs
//!
//! ```text
//!     minimize    1/2 z' diag(h) z + f' z
//!     subject to  a_k' z + b_k >= 0      (rows)
//!                 z_j >= 0               (where nonneg_mask[j])
//! ```
//!
//! The iteration follows Goldfarb and Idnani: start from the unconstrained
//! minimizer, add the most violated constraint, and drop constraints whose
//! multipliers would turn negative. Constraints are indexed with the rows
//! first and the variable bounds after them (`rows.len() + j` for `z_j >= 0`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, StcError};

/// Primal feasibility tolerance.
pub const FEAS_TOL: f64 = 1e-9;
/// Dual feasibility tolerance.
pub const DUAL_TOL: f64 = 1e-9;
/// Relative threshold below which a step direction counts as zero.
const STEP_TOL: f64 = 1e-12;
const DEPENDENT_TOL: f64 = 1e-10;

/// One inequality `coeffs' z + offset >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpRow {
    pub coeffs: Vec<f64>,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub diag_h: Vec<f64>,
    pub lin_f: Vec<f64>,
    pub rows: Vec<QpRow>,
    pub nonneg_mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: Vec<f64>,
    /// Multipliers in constraint order (rows, then bounds); zero for
    /// variables without a bound.
    pub duals: Vec<f64>,
    /// Working set at termination, in the order constraints were added.
    pub active_set: Vec<usize>,
    pub status: QpStatus,
    pub iterations: usize,
    /// Objective after each primal step, starting at the initial point.
    pub objective_trace: Vec<f64>,
}

impl QpProblem {
    pub fn n_vars(&self) -> usize {
        self.diag_h.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.rows.len() + self.n_vars()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        check_len(n, self.lin_f.len())?;
        check_len(n, self.nonneg_mask.len())?;
        for row in &self.rows {
            check_len(n, row.coeffs.len())?;
        }
        if let Some(bad) = self.diag_h.iter().find(|h| !(**h > 0.0)) {
            return Err(StcError::InvalidParameter(format!(
                "quadratic diagonal must be positive (found {bad})"
            )));
        }
        Ok(())
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(&self.diag_h)
            .zip(&self.lin_f)
            .map(|((z, h), f)| 0.5 * h * z * z + f * z)
            .sum()
    }

    /// Whether constraint `k` exists (bounds only exist where masked).
    fn has_constraint(&self, k: usize) -> bool {
        k < self.rows.len() || self.nonneg_mask[k - self.rows.len()]
    }

    /// `a_k' z + b_k`.
    pub fn slack(&self, k: usize, z: &[f64]) -> f64 {
        let m = self.rows.len();
        if k < m {
            let row = &self.rows[k];
            row.coeffs.iter().zip(z).map(|(a, z)| a * z).sum::<f64>() + row.offset
        } else {
            z[k - m]
        }
    }

    fn normal(&self, k: usize) -> DVector<f64> {
        let m = self.rows.len();
        if k < m {
            DVector::from_column_slice(&self.rows[k].coeffs)
        } else {
            let mut e = DVector::zeros(self.n_vars());
            e[k - m] = 1.0;
            e
        }
    }

    fn offset(&self, k: usize) -> f64 {
        if k < self.rows.len() {
            self.rows[k].offset
        } else {
            0.0
        }
    }
}

/// Largest violation of the KKT conditions: stationarity, primal
/// feasibility, dual sign and complementary slackness.
pub fn kkt_residual(p: &QpProblem, z: &[f64], duals: &[f64]) -> f64 {
    let n = p.n_vars();
    let mut grad: Vec<f64> = (0..n).map(|j| p.diag_h[j] * z[j] + p.lin_f[j]).collect();
    let mut worst = 0.0_f64;
    for k in 0..p.n_constraints() {
        let lam = duals[k];
        if !p.has_constraint(k) {
            if lam != 0.0 {
                grad[k - p.rows.len()] -= lam;
            }
            continue;
        }
        let slack = p.slack(k, z);
        worst = worst.max(-slack).max(-lam).max((lam * slack).abs());
        if lam != 0.0 {
            let normal = p.normal(k);
            for j in 0..n {
                grad[j] -= lam * normal[j];
            }
        }
    }
    grad.iter().fold(worst, |acc, g| acc.max(g.abs()))
}

struct Workspace<'a> {
    p: &'a QpProblem,
    h_inv: DVector<f64>,
    active: Vec<usize>,
    duals: Vec<f64>,
}

impl<'a> Workspace<'a> {
    fn new(p: &'a QpProblem) -> Self {
        let h_inv = DVector::from_iterator(p.n_vars(), p.diag_h.iter().map(|h| 1.0 / h));
        Self {
            p,
            h_inv,
            active: Vec::new(),
            duals: Vec::new(),
        }
    }

    fn normals(&self) -> DMatrix<f64> {
        let n = self.p.n_vars();
        let mut mat = DMatrix::zeros(n, self.active.len());
        for (col, &k) in self.active.iter().enumerate() {
            mat.set_column(col, &self.p.normal(k));
        }
        mat
    }

    /// Gram matrix `N' H^{-1} N` of the working set.
    fn gram(&self, normals: &DMatrix<f64>) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(normals.nrows(), normals.ncols(), |r, c| {
            normals[(r, c)] * self.h_inv[r]
        });
        normals.transpose() * scaled
    }

    /// Dual step `r` and primal direction `d` for entering normal `np`.
    fn directions(&self, np: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let hinv_np = np.component_mul(&self.h_inv);
        if self.active.is_empty() {
            return Some((DVector::zeros(0), hinv_np));
        }
        let normals = self.normals();
        let r = self
            .gram(&normals)
            .lu()
            .solve(&(normals.transpose() * &hinv_np))?;
        let d = (np - &normals * &r).component_mul(&self.h_inv);
        Some((r, d))
    }

    /// Solve the equality-constrained subproblem on the working set.
    fn equality_solution(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        let f = DVector::from_column_slice(&self.p.lin_f);
        let hinv_f = f.component_mul(&self.h_inv);
        if self.active.is_empty() {
            return Some((-hinv_f, DVector::zeros(0)));
        }
        let normals = self.normals();
        let b = DVector::from_iterator(
            self.active.len(),
            self.active.iter().map(|&k| self.p.offset(k)),
        );
        let lam = self
            .gram(&normals)
            .lu()
            .solve(&(normals.transpose() * &hinv_f - b))?;
        let z = (&normals * &lam - f).component_mul(&self.h_inv);
        Some((z, lam))
    }
}

/// Solve from a cold start.
pub fn solve(p: &QpProblem) -> Result<QpSolution> {
    solve_warm(p, &[])
}

/// Solve, seeding the working set with `seed` (typically the previous
/// solve's active set). The seed is used only if it yields a dual-feasible
/// starting point; the result does not depend on it.
pub fn solve_warm(p: &QpProblem, seed: &[usize]) -> Result<QpSolution> {
    p.validate()?;
    let n = p.n_vars();
    let nc = p.n_constraints();
    let limit = 100 * (n + nc);
    let mut ws = Workspace::new(p);

    let mut z = ws.equality_solution().expect("empty working set").0;
    if !seed.is_empty() {
        let mut warm = Workspace::new(p);
        for &k in seed {
            if k < nc && p.has_constraint(k) && !warm.active.contains(&k) {
                let np = p.normal(k);
                let independent = match warm.directions(&np) {
                    Some((_, d)) => d.norm() > 1e-9 * np.norm(),
                    None => false,
                };
                if independent {
                    warm.active.push(k);
                }
            }
        }
        if let Some((wz, lam)) = warm.equality_solution() {
            if lam.iter().all(|l| *l >= 0.0) && wz.iter().all(|v| v.is_finite()) {
                warm.duals = lam.iter().copied().collect();
                z = wz;
                ws = warm;
            }
        }
    }

    let mut trace = vec![p.objective(z.as_slice())];
    let mut iterations = 0;
    let status = 'outer: loop {
        // entering constraint: most violated, lowest index on ties
        let mut entering = None;
        let mut worst = -FEAS_TOL;
        for k in 0..nc {
            if !p.has_constraint(k) || ws.active.contains(&k) {
                continue;
            }
            let s = p.slack(k, z.as_slice());
            if s < worst {
                worst = s;
                entering = Some(k);
            }
        }
        let Some(np_idx) = entering else {
            break QpStatus::Solved;
        };
        let np = p.normal(np_idx);
        let np_scale = np.component_mul(&ws.h_inv).dot(&np);
        let mut u_p = 0.0;

        loop {
            iterations += 1;
            if iterations > limit {
                break 'outer QpStatus::IterationLimit;
            }
            let Some((r, d)) = ws.directions(&np) else {
                return Err(StcError::Numerical(
                    "singular working-set Gram matrix".into(),
                ));
            };
            let mut t2 = f64::INFINITY;
            let mut blocking = None;
            for (j, &rj) in r.iter().enumerate() {
                if rj > STEP_TOL {
                    let t = ws.duals[j] / rj;
                    if t < t2 {
                        t2 = t;
                        blocking = Some(j);
                    }
                }
            }
            // np' d / np' H^-1 np is the independent fraction of np; rounding
            // leaves it tiny but nonzero for dependent normals
            let nd = np.dot(&d);
            let t1 = if ws.active.len() < n && nd > DEPENDENT_TOL * np_scale {
                -p.slack(np_idx, z.as_slice()) / nd
            } else {
                f64::INFINITY
            };
            if t1.is_infinite() && t2.is_infinite() {
                break 'outer QpStatus::Infeasible;
            }
            let t = t1.min(t2);
            if t1.is_finite() {
                z += &d * t;
                trace.push(p.objective(z.as_slice()));
            }
            for (dual, rj) in ws.duals.iter_mut().zip(r.iter()) {
                *dual -= t * rj;
            }
            u_p += t;
            if t1 <= t2 {
                ws.active.push(np_idx);
                ws.duals.push(u_p);
                break;
            }
            let j = blocking.expect("finite partial step has a blocking constraint");
            ws.active.remove(j);
            ws.duals.remove(j);
        }
    };

    let mut duals = vec![0.0; nc];
    if status == QpStatus::Solved {
        // re-solve the final working set to remove accumulated drift
        if let Some((zp, lam)) = ws.equality_solution() {
            if lam.iter().all(|l| *l >= -DUAL_TOL) {
                z = zp;
                ws.duals = lam.iter().map(|l| l.max(0.0)).collect();
            }
        }
    }
    for (&k, &lam) in ws.active.iter().zip(&ws.duals) {
        duals[k] = lam;
    }
    Ok(QpSolution {
        z: z.iter().copied().collect(),
        duals,
        active_set: ws.active,
        status,
        iterations,
        objective_trace: trace,
    })
}
