//! Safe spacing policies as control barrier functions and the safety-filter
//! quadratic program.
//!
//! `h_0` keeps the CAV safe behind the head vehicle and is enforced as a hard
//! constraint. Follower safety uses the reduced barriers `h_i - h_0`, which
//! the CAV's input reaches directly; their constraints carry a penalized
//! slack.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, StcError};
use crate::model::{
    linear_derivative, nonlinear_derivative, ChainState, Equilibrium, LinearSystem, OvmParams,
};
use crate::qp::{self, QpProblem, QpRow, QpStatus};

/// Threshold on `|L_g h|` below which a constraint row no longer depends on
/// the input.
pub const DEGENERATE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Time headway: `s >= tau v`.
    Th,
    /// Time to collision: `s >= tau (v - v_pred)`.
    Ttc,
    /// Stopping distance headway: TTC plus the braking distance of the
    /// closing speed.
    Sdh,
}

impl std::str::FromStr for PolicyKind {
    type Err = StcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "th" => Ok(Self::Th),
            "ttc" => Ok(Self::Ttc),
            "sdh" => Ok(Self::Sdh),
            other => Err(StcError::InvalidParameter(format!(
                "unknown spacing policy '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacingPolicy {
    pub kind: PolicyKind,
    /// Time constant (s).
    pub tau: f64,
    /// Braking limit magnitude (m/s^2); used by SDH and by the braking
    /// fallback.
    pub a_brake: f64,
}

impl SpacingPolicy {
    pub fn new(kind: PolicyKind, tau: f64, a_brake: f64) -> Self {
        Self { kind, tau, a_brake }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.tau > 0.0) {
            errs.push(format!("policy.tau must be > 0 (got {})", self.tau));
        }
        if self.kind == PolicyKind::Sdh && !(self.a_brake > 0.0) {
            errs.push(format!(
                "policy.a_brake must be > 0 for SDH (got {})",
                self.a_brake
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(StcError::Config(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    /// Class-K slopes for vehicles 0..=N.
    pub gamma: Vec<f64>,
    /// Slack penalties for followers 1..=N.
    pub penalty: Vec<f64>,
    pub policy: SpacingPolicy,
    /// Include the soft follower rows; when false only the CAV row is
    /// enforced.
    #[serde(default = "default_true")]
    pub hdv_rows: bool,
}

fn default_true() -> bool {
    true
}

impl FilterParams {
    /// Same slope and penalty for every vehicle.
    pub fn uniform(n_followers: usize, gamma: f64, penalty: f64, policy: SpacingPolicy) -> Self {
        Self {
            gamma: vec![gamma; n_followers + 1],
            penalty: vec![penalty; n_followers],
            policy,
            hdv_rows: true,
        }
    }

    pub fn n_followers(&self) -> usize {
        self.penalty.len()
    }

    pub fn validate(&self, n_followers: usize) -> Result<()> {
        let mut errs = Vec::new();
        if self.gamma.len() != n_followers + 1 {
            errs.push(format!(
                "filter.gamma has {} entries, expected {}",
                self.gamma.len(),
                n_followers + 1
            ));
        }
        if self.penalty.len() != n_followers {
            errs.push(format!(
                "filter.penalty has {} entries, expected {n_followers}",
                self.penalty.len()
            ));
        }
        if self.gamma.iter().any(|g| !(*g > 0.0)) {
            errs.push("filter.gamma entries must be > 0".into());
        }
        if self.penalty.iter().any(|p| !(*p > 0.0)) {
            errs.push("filter.penalty entries must be > 0".into());
        }
        if let Err(StcError::Config(mut e)) = self.policy.validate() {
            errs.append(&mut e);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(StcError::Config(errs))
        }
    }
}

fn closing_speed(x: &ChainState, i: usize, r: f64) -> f64 {
    x.v(i) - x.predecessor_speed(i, r)
}

/// Barrier value `h_i` of the spacing policy for vehicle `i` (0 is the CAV).
pub fn cbf_value(policy: &SpacingPolicy, i: usize, x: &ChainState, r: f64) -> f64 {
    let s = x.s(i);
    match policy.kind {
        PolicyKind::Th => s - policy.tau * x.v(i),
        PolicyKind::Ttc => s - policy.tau * closing_speed(x, i, r),
        PolicyKind::Sdh => {
            let w = closing_speed(x, i, r);
            s - policy.tau * w - w * w / (2.0 * policy.a_brake)
        }
    }
}

/// Gradient of `h_i` with respect to `(x, r)`; the last entry is `dh/dr`.
pub fn cbf_gradient(policy: &SpacingPolicy, i: usize, x: &ChainState, r: f64) -> DVector<f64> {
    let n = x.len();
    let mut grad = DVector::zeros(n + 1);
    grad[2 * i] = 1.0;
    let dv = match policy.kind {
        PolicyKind::Th => {
            grad[2 * i + 1] = -policy.tau;
            return grad;
        }
        PolicyKind::Ttc => -policy.tau,
        PolicyKind::Sdh => -policy.tau - closing_speed(x, i, r) / policy.a_brake,
    };
    grad[2 * i + 1] = dv;
    let pred = if i == 0 { n } else { 2 * i - 1 };
    grad[pred] = -dv;
    grad
}

/// Reduced barrier `h_i - h_0` and its gradient, for followers `i >= 1`.
pub fn reduced_cbf(
    policy: &SpacingPolicy,
    i: usize,
    x: &ChainState,
    r: f64,
) -> (f64, DVector<f64>) {
    debug_assert!(i >= 1);
    let value = cbf_value(policy, i, x, r) - cbf_value(policy, 0, x, r);
    let grad = cbf_gradient(policy, i, x, r) - cbf_gradient(policy, 0, x, r);
    (value, grad)
}

/// One affine constraint on the CAV input:
/// `coeff_u u + offset (+ sigma_index if soft) >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub coeff_u: f64,
    pub offset: f64,
    pub soft: bool,
    pub index: usize,
    /// `|coeff_u|` is below [`DEGENERATE_TOL`].
    pub degenerate: bool,
}

/// Drift model used in the Lie derivatives.
#[derive(Debug, Clone, PartialEq)]
pub enum Plant {
    /// Linearized chain about an equilibrium.
    Linear { sys: LinearSystem, eq: Equilibrium },
    /// Nonlinear chain with OVM followers (one shared or one per follower).
    Nonlinear { hdv: Vec<OvmParams> },
}

impl Plant {
    /// Unforced dynamics `f(x, r)` in absolute coordinates.
    pub fn drift(&self, x: &ChainState, r: f64) -> Result<DVector<f64>> {
        match self {
            Plant::Linear { sys, eq } => linear_derivative(sys, eq, x, r, 0.0),
            Plant::Nonlinear { hdv } => nonlinear_derivative(x, r, 0.0, hdv),
        }
    }

    /// Input column `g`, identical for both models.
    pub fn input_column(&self, n_states: usize) -> DVector<f64> {
        let mut g = DVector::zeros(n_states);
        g[1] = 1.0;
        g
    }
}

/// Build the CBF rows from an explicit drift vector and input column.
///
/// `r_dot` is the head vehicle's acceleration when the CAV knows it; when
/// `None` it enters the Lie derivatives as zero.
pub fn assemble_rows(
    x: &ChainState,
    r: f64,
    r_dot: Option<f64>,
    params: &FilterParams,
    drift: &DVector<f64>,
    input: &DVector<f64>,
) -> Result<Vec<ConstraintRow>> {
    let n = x.n_followers();
    params.validate(n)?;
    check_len(x.len(), drift.len())?;
    check_len(x.len(), input.len())?;
    let nx = x.len();
    let row = |index: usize, value: f64, grad: &DVector<f64>| {
        let gx = grad.rows(0, nx);
        let coeff_u = gx.dot(input);
        let lf = gx.dot(drift) + grad[nx] * r_dot.unwrap_or(0.0);
        ConstraintRow {
            coeff_u,
            offset: lf + params.gamma[index] * value,
            soft: index > 0,
            index,
            degenerate: coeff_u.abs() < DEGENERATE_TOL,
        }
    };
    let mut rows = Vec::with_capacity(n + 1);
    let h0 = cbf_value(&params.policy, 0, x, r);
    rows.push(row(0, h0, &cbf_gradient(&params.policy, 0, x, r)));
    for i in 1..=n {
        let (value, grad) = reduced_cbf(&params.policy, i, x, r);
        rows.push(row(i, value, &grad));
    }
    Ok(rows)
}

/// CBF rows for the configured plant model: the CAV row first (hard), then
/// one soft row per follower.
pub fn assemble_constraints(
    x: &ChainState,
    r: f64,
    r_dot: Option<f64>,
    params: &FilterParams,
    plant: &Plant,
) -> Result<Vec<ConstraintRow>> {
    let drift = plant.drift(x, r)?;
    let input = plant.input_column(x.len());
    assemble_rows(x, r, r_dot, params, &drift, &input)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStatus {
    Solved,
    Infeasible,
}

/// Input substituted when the QP cannot be solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Projection of the nominal input onto the hard row alone.
    HardProjection,
    /// Full braking at the policy's braking limit.
    MaxBraking,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StcSolution {
    pub u: f64,
    pub sigma: Vec<f64>,
    /// Vehicle indices of the CBF rows that are tight at the solution.
    pub active_set: Vec<usize>,
    pub qp_status: FilterStatus,
    pub fallback: Option<Fallback>,
    /// Solver working set, usable as a warm start for the next solve.
    pub qp_active: Vec<usize>,
    pub qp_duals: Vec<f64>,
}

/// Build the filter QP over `z = [u, sigma_1..sigma_N]`. Returns the
/// problem and the vehicle index of each QP row.
pub fn build_qp(
    rows: &[ConstraintRow],
    u_nominal: f64,
    params: &FilterParams,
) -> (QpProblem, Vec<usize>) {
    let n = params.n_followers();
    let mut diag_h = vec![2.0];
    diag_h.extend(params.penalty.iter().map(|p| 2.0 * p));
    let mut lin_f = vec![0.0; n + 1];
    lin_f[0] = -2.0 * u_nominal;
    let mut qp_rows = Vec::with_capacity(rows.len());
    let mut owners = Vec::with_capacity(rows.len());
    for row in rows {
        let mut coeffs = vec![0.0; n + 1];
        coeffs[0] = row.coeff_u;
        if row.soft {
            coeffs[row.index] = 1.0;
        }
        qp_rows.push(QpRow {
            coeffs,
            offset: row.offset,
        });
        owners.push(row.index);
    }
    let mut nonneg_mask = vec![true; n + 1];
    nonneg_mask[0] = false;
    (
        QpProblem {
            diag_h,
            lin_f,
            rows: qp_rows,
            nonneg_mask,
        },
        owners,
    )
}

/// Solve the filter QP for already-assembled rows.
pub fn filter_rows(
    rows: &[ConstraintRow],
    u_nominal: f64,
    params: &FilterParams,
    warm: &[usize],
) -> Result<StcSolution> {
    let n = params.n_followers();
    let hard = rows.iter().find(|r| !r.soft).copied();
    let mut kept: Vec<ConstraintRow> = rows
        .iter()
        .filter(|r| params.hdv_rows || !r.soft)
        .copied()
        .collect();
    if let Some(h) = hard {
        if h.degenerate {
            if h.offset >= 0.0 {
                kept.retain(|r| r.soft);
            } else {
                return Ok(StcSolution {
                    u: -params.policy.a_brake,
                    sigma: vec![0.0; n],
                    active_set: Vec::new(),
                    qp_status: FilterStatus::Infeasible,
                    fallback: Some(Fallback::MaxBraking),
                    qp_active: Vec::new(),
                    qp_duals: Vec::new(),
                });
            }
        }
    }
    let (problem, owners) = build_qp(&kept, u_nominal, params);
    let sol = qp::solve_warm(&problem, warm)?;
    match sol.status {
        QpStatus::Solved => {
            let active_set = sol
                .active_set
                .iter()
                .filter(|&&k| k < owners.len())
                .map(|&k| owners[k])
                .collect();
            Ok(StcSolution {
                u: sol.z[0],
                sigma: sol.z[1..].iter().map(|s| s.max(0.0)).collect(),
                active_set,
                qp_status: FilterStatus::Solved,
                fallback: None,
                qp_active: sol.active_set,
                qp_duals: sol.duals,
            })
        }
        QpStatus::Infeasible => {
            let (u, fallback) = match hard {
                Some(h) if !h.degenerate => {
                    let bound = -h.offset / h.coeff_u;
                    let u = if h.coeff_u > 0.0 {
                        u_nominal.max(bound)
                    } else {
                        u_nominal.min(bound)
                    };
                    (u, Fallback::HardProjection)
                }
                _ => (-params.policy.a_brake, Fallback::MaxBraking),
            };
            Ok(StcSolution {
                u,
                sigma: vec![0.0; n],
                active_set: Vec::new(),
                qp_status: FilterStatus::Infeasible,
                fallback: Some(fallback),
                qp_active: Vec::new(),
                qp_duals: Vec::new(),
            })
        }
        QpStatus::IterationLimit => Err(StcError::Numerical(format!(
            "safety-filter QP hit its iteration limit ({} pivots)",
            sol.iterations
        ))),
    }
}

/// Minimally modify `u_nominal` so that every CBF constraint holds.
pub fn stc_control(
    x: &ChainState,
    r: f64,
    u_nominal: f64,
    params: &FilterParams,
    plant: &Plant,
) -> Result<StcSolution> {
    stc_control_warm(x, r, None, u_nominal, params, plant, &[])
}

#[allow(clippy::too_many_arguments)]
/// [`stc_control`] with optional head acceleration and a solver warm start.
pub fn stc_control_warm(
    x: &ChainState,
    r: f64,
    r_dot: Option<f64>,
    u_nominal: f64,
    params: &FilterParams,
    plant: &Plant,
    warm: &[usize],
) -> Result<StcSolution> {
    let rows = assemble_constraints(x, r, r_dot, params, plant)?;
    filter_rows(&rows, u_nominal, params, warm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_linear_system, linearize};
    use approx::assert_abs_diff_eq;

    fn eq() -> Equilibrium {
        Equilibrium {
            v_star: 20.0,
            s_star_hdv: 20.0,
            s_star_cav: 20.0,
        }
    }

    fn linear_plant() -> Plant {
        let c = linearize(&OvmParams::table1(), 20.0);
        Plant::Linear {
            sys: build_linear_system(2, &c).unwrap(),
            eq: eq(),
        }
    }

    fn params(kind: PolicyKind) -> FilterParams {
        FilterParams::uniform(2, 10.0, 100.0, SpacingPolicy::new(kind, 1.0, 7.0))
    }

    #[test]
    fn cbf_values() {
        let x = ChainState::at_equilibrium(&eq(), 2);
        let th = SpacingPolicy::new(PolicyKind::Th, 1.0, 7.0);
        assert_eq!(cbf_value(&th, 0, &x, 20.0), 0.0);
        let ttc = SpacingPolicy::new(PolicyKind::Ttc, 2.5, 7.0);
        assert_eq!(cbf_value(&ttc, 1, &x, 20.0), 20.0);

        let sdh = SpacingPolicy::new(PolicyKind::Sdh, 1.0, 7.0);
        let y = ChainState::from_vec(vec![20.0, 20.0, 20.0, 27.0, 20.0, 20.0]).unwrap();
        assert_abs_diff_eq!(cbf_value(&sdh, 1, &y, 20.0), 9.5, epsilon = 1e-12);
    }

    #[test]
    fn gradients() {
        let x = ChainState::at_equilibrium(&eq(), 2);
        let th = SpacingPolicy::new(PolicyKind::Th, 1.0, 7.0);
        let g = cbf_gradient(&th, 0, &x, 20.0);
        assert_eq!(g.as_slice(), &[1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let sdh = SpacingPolicy::new(PolicyKind::Sdh, 1.3, 7.0);
        let ttc = SpacingPolicy::new(PolicyKind::Ttc, 1.3, 7.0);
        assert_eq!(
            cbf_gradient(&sdh, 1, &x, 20.0),
            cbf_gradient(&ttc, 1, &x, 20.0)
        );

        let (value, grad) = reduced_cbf(&th, 1, &x, 20.0);
        assert_eq!(value, 0.0);
        // L_g of the reduced barrier is +tau
        assert_eq!(grad[1], 1.0);
    }

    #[test]
    fn equilibrium_hard_row() {
        let x = ChainState::at_equilibrium(&eq(), 2);
        let rows =
            assemble_constraints(&x, 20.0, None, &params(PolicyKind::Th), &linear_plant()).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(!rows[0].soft && rows[1].soft && rows[2].soft);
        assert_eq!(rows[0].coeff_u, -1.0);
        assert_abs_diff_eq!(rows[0].offset, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sdh_degenerate_hard_row() {
        // v_0 - v_{-1} = -tau a_brake
        let mut x = ChainState::at_equilibrium(&eq(), 2);
        x.set_v(0, 13.0);
        let rows = assemble_constraints(&x, 20.0, None, &params(PolicyKind::Sdh), &linear_plant())
            .unwrap();
        assert!(rows[0].degenerate);
        assert!(rows[0].coeff_u.abs() < 1e-15);
    }

    #[test]
    fn projection_examples() {
        // followers well spaced so only the hard row can bind
        let mut x = ChainState::at_equilibrium(&eq(), 2);
        x.set_s(1, 30.0);
        x.set_s(2, 30.0);
        let p = params(PolicyKind::Th);
        let plant = linear_plant();
        let safe = stc_control(&x, 20.0, -1.0, &p, &plant).unwrap();
        assert_eq!(safe.u, -1.0);
        assert!(safe.sigma.iter().all(|s| *s == 0.0));
        assert_eq!(safe.qp_status, FilterStatus::Solved);

        let clipped = stc_control(&x, 20.0, 1.0, &p, &plant).unwrap();
        assert_abs_diff_eq!(clipped.u, 0.0, epsilon = 1e-12);
        assert!(clipped.active_set.contains(&0));
    }

    #[test]
    fn degenerate_fallbacks() {
        let p = params(PolicyKind::Sdh);
        let violated = [
            ConstraintRow {
                coeff_u: 0.0,
                offset: -1.0,
                soft: false,
                index: 0,
                degenerate: true,
            },
            ConstraintRow {
                coeff_u: 1.0,
                offset: 0.0,
                soft: true,
                index: 1,
                degenerate: false,
            },
        ];
        let p1 = FilterParams::uniform(1, 10.0, 100.0, p.policy);
        let sol = filter_rows(&violated, 3.0, &p1, &[]).unwrap();
        assert_eq!(sol.qp_status, FilterStatus::Infeasible);
        assert_eq!(sol.fallback, Some(Fallback::MaxBraking));
        assert_eq!(sol.u, -7.0);

        let satisfied = [
            ConstraintRow {
                offset: 2.0,
                ..violated[0]
            },
            violated[1],
        ];
        let sol = filter_rows(&satisfied, 3.0, &p1, &[]).unwrap();
        assert_eq!(sol.qp_status, FilterStatus::Solved);
        assert_eq!(sol.u, 3.0);
    }

    #[test]
    fn soft_rows_relax_but_hard_row_holds() {
        // hard row u <= 0, follower row wants u >= 2
        let rows = [
            ConstraintRow {
                coeff_u: -1.0,
                offset: 0.0,
                soft: false,
                index: 0,
                degenerate: false,
            },
            ConstraintRow {
                coeff_u: 1.0,
                offset: -2.0,
                soft: true,
                index: 1,
                degenerate: false,
            },
        ];
        let p = FilterParams::uniform(1, 10.0, 100.0, SpacingPolicy::new(PolicyKind::Th, 1.0, 7.0));
        let sol = filter_rows(&rows, -1.0, &p, &[]).unwrap();
        assert_abs_diff_eq!(sol.u, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.sigma[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn param_validation() {
        let mut p = params(PolicyKind::Th);
        assert!(p.validate(2).is_ok());
        assert!(p.validate(3).is_err());
        p.gamma[1] = 0.0;
        assert!(p.validate(2).is_err());
        assert!("SDH".parse::<PolicyKind>().is_ok());
        assert!("dh".parse::<PolicyKind>().is_err());
    }
}
