//! Luenberger observer for the linearized chain, gain design, exponential
//! error bounds and the robustified safety constraints driven by the
//! estimate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, StcError};
use crate::linalg::{
    condition_number, departure_from_normality, eigenvalues, eigenvectors, lyapunov,
};
use crate::model::{ChainState, Equilibrium, LinearSystem};
use crate::safety::{
    assemble_rows, cbf_gradient, filter_rows, FilterParams, PolicyKind, SpacingPolicy, StcSolution,
};

/// Fraction of the spectral abscissa kept as the certified decay rate.
pub const LAMBDA_MARGIN: f64 = 0.95;
/// Newton steps allowed for the Riccati solve.
pub const MAX_NEWTON_STEPS: usize = 50;
const NEWTON_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HurwitzReport {
    pub max_real: f64,
    /// Transient constant `kappa` with `|exp(M t)| <= kappa exp(-lambda t)`.
    pub m0_factor: f64,
    pub lambda_rate: f64,
    pub hurwitz: bool,
}

/// Spectral abscissa and a transient constant for `exp(M t)`.
///
/// The constant is the eigenvector condition number when the eigenvector
/// matrix is usable, capped by the Schur-form bound
/// `sum_k (nu t)^k / k!` (with `nu` the departure from normality) maximized
/// against the decay margin.
pub fn verify_hurwitz(m: &DMatrix<f64>) -> Result<HurwitzReport> {
    if !m.is_square() {
        return Err(StcError::DimensionMismatch {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    let eigs = eigenvalues(m)?;
    let max_real = eigs.iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max);
    let kappa = eigenvectors(m, &eigs)
        .map(|v| condition_number(&v))
        .unwrap_or(f64::INFINITY);
    let hurwitz = max_real < 0.0;
    if !hurwitz {
        return Ok(HurwitzReport {
            max_real,
            m0_factor: kappa,
            lambda_rate: 0.0,
            hurwitz,
        });
    }
    let lambda_rate = -LAMBDA_MARGIN * max_real;
    let delta = -max_real - lambda_rate;
    let nu = departure_from_normality(m, &eigs);
    let schur = schur_transient_bound(nu, delta, m.nrows());
    let m0_factor = if kappa.is_finite() {
        kappa.min(schur)
    } else {
        schur
    };
    Ok(HurwitzReport {
        max_real,
        m0_factor,
        lambda_rate,
        hurwitz,
    })
}

/// `sup_t exp(-delta t) sum_{k<n} (nu t)^k / k!`, bounded termwise: the
/// k-th term peaks at `t = k / delta`.
fn schur_transient_bound(nu: f64, delta: f64, n: usize) -> f64 {
    let mut total = 1.0;
    let mut log_fact = 0.0;
    for k in 1..n {
        let kf = k as f64;
        log_fact += kf.ln();
        if nu > 0.0 {
            total += (kf * (nu * kf / delta).ln() - kf - log_fact).exp();
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainSource {
    UserSupplied,
    KalmanDesigned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverConfig {
    #[serde(rename = "L", with = "matrix_rows")]
    pub l: DMatrix<f64>,
    pub lambda_rate: f64,
    pub m0_factor: f64,
    pub source: GainSource,
}

impl ObserverConfig {
    /// Accept a user gain after checking that `A - L C` is Hurwitz.
    pub fn from_gain(sys: &LinearSystem, l: DMatrix<f64>) -> Result<Self> {
        Self::verified(sys, l, GainSource::UserSupplied)
    }

    fn verified(sys: &LinearSystem, l: DMatrix<f64>, source: GainSource) -> Result<Self> {
        if l.nrows() != sys.n_states() {
            return Err(StcError::DimensionMismatch {
                expected: sys.n_states(),
                got: l.nrows(),
            });
        }
        if l.ncols() != sys.n_outputs() {
            return Err(StcError::DimensionMismatch {
                expected: sys.n_outputs(),
                got: l.ncols(),
            });
        }
        let report = verify_hurwitz(&self::error_matrix(sys, &l))?;
        if !report.hurwitz {
            return Err(StcError::Numerical(format!(
                "A - LC is not Hurwitz (max real part {:.6})",
                report.max_real
            )));
        }
        Ok(Self {
            l,
            lambda_rate: report.lambda_rate,
            m0_factor: report.m0_factor,
            source,
        })
    }

    /// Initial error bound from a known initial error.
    pub fn bound_for(&self, e0: &DVector<f64>) -> ErrorBound {
        ErrorBound {
            m0: self.m0_factor * e0.norm(),
            lambda_rate: self.lambda_rate,
        }
    }
}

/// Error dynamics matrix `A - L C`.
pub fn error_matrix(sys: &LinearSystem, l: &DMatrix<f64>) -> DMatrix<f64> {
    &sys.a - l * &sys.c
}

/// Stabilizing gain of `A - L C` by Bass's method, used to start the
/// Newton iteration.
fn initial_gain(sys: &LinearSystem) -> Result<DMatrix<f64>> {
    let n = sys.n_states();
    let beta = sys.a.norm() + 1.0;
    let shifted = sys.a.transpose() + DMatrix::<f64>::identity(n, n) * beta;
    let ctc = sys.c.transpose() * &sys.c;
    let z = lyapunov(&shifted, &(ctc * -2.0))?;
    let z_inv = z
        .try_inverse()
        .ok_or_else(|| StcError::Numerical("observability Gramian is singular".into()))?;
    Ok(z_inv * sys.c.transpose())
}

/// Observer gain from the dual Riccati equation
/// `A P + P A' - P C' C P / r + q I = 0`, with `L = P C' / r`.
pub fn design_gain(sys: &LinearSystem, q_scale: f64, r_scale: f64) -> Result<ObserverConfig> {
    if !(q_scale > 0.0 && r_scale > 0.0) {
        return Err(StcError::InvalidParameter(format!(
            "q_scale and r_scale must be > 0 (got {q_scale}, {r_scale})"
        )));
    }
    if sys.coeffs().indicator() == 0.0 {
        return Err(StcError::InvalidParameter(
            "(A, C) is not observable: a1 - a2 a3 + a3^2 = 0".into(),
        ));
    }
    let n = sys.n_states();
    let q = DMatrix::<f64>::identity(n, n) * q_scale;
    let mut l = initial_gain(sys)?;
    let mut prev: Option<DMatrix<f64>> = None;
    for _ in 0..MAX_NEWTON_STEPS {
        let acl = error_matrix(sys, &l);
        let w = &q + &l * l.transpose() * r_scale;
        let p = lyapunov(&acl, &w)?;
        l = &p * sys.c.transpose() / r_scale;
        if let Some(old) = &prev {
            if (&p - old).norm() <= NEWTON_TOL * p.norm().max(1.0) {
                return ObserverConfig::verified(sys, l, GainSource::KalmanDesigned);
            }
        }
        prev = Some(p);
    }
    Err(StcError::Numerical(format!(
        "Riccati Newton iteration did not converge in {MAX_NEWTON_STEPS} steps"
    )))
}

/// Estimate derivative `A x + B u + L (y - C x) + D r` in perturbation
/// coordinates.
pub fn observer_derivative(
    x_hat: &DVector<f64>,
    u: f64,
    y: &DVector<f64>,
    r: f64,
    sys: &LinearSystem,
    cfg: &ObserverConfig,
) -> Result<DVector<f64>> {
    check_len(sys.n_states(), x_hat.len())?;
    check_len(sys.n_outputs(), y.len())?;
    if cfg.l.shape() != (sys.n_states(), sys.n_outputs()) {
        return Err(StcError::DimensionMismatch {
            expected: sys.n_outputs(),
            got: cfg.l.ncols(),
        });
    }
    let innovation = y - &sys.c * x_hat;
    Ok(&sys.a * x_hat + &sys.b * u + &cfg.l * innovation + &sys.d * r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBound {
    pub m0: f64,
    pub lambda_rate: f64,
}

impl ErrorBound {
    pub fn zero() -> Self {
        Self {
            m0: 0.0,
            lambda_rate: 0.0,
        }
    }
}

/// `M(t) = m0 exp(-lambda t)` and its time derivative.
pub fn error_bound_at(t: f64, b: &ErrorBound) -> (f64, f64) {
    let m = b.m0 * (-b.lambda_rate * t).exp();
    (m, -b.lambda_rate * m)
}

/// Range of relative (closing) speeds over which SDH gradients are bounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelSpeedBox {
    pub lo: f64,
    pub hi: f64,
}

impl RelSpeedBox {
    pub fn symmetric(half_width: f64) -> Self {
        Self {
            lo: -half_width,
            hi: half_width,
        }
    }
}

/// Lipschitz constant in the state of `h_i` (or of `h_i - h_0` when
/// `reduced`).
///
/// Only SDH gradients vary with the state; they are affine in the closing
/// speeds, so the largest norm over the box is attained at a corner.
pub fn lipschitz_coeff(policy: &SpacingPolicy, i: usize, reduced: bool, bx: &RelSpeedBox) -> f64 {
    let reduced = reduced && i > 0;
    let corners: &[f64] = if policy.kind == PolicyKind::Sdh {
        &[bx.lo, bx.hi]
    } else {
        &[0.0]
    };
    let n = i.max(1);
    let mut best = 0.0_f64;
    for &w_i in corners {
        for &w_0 in corners {
            // v_0 = 0 so that w_0 = -r and w_i = v_i - v_{i-1} can be set
            // independently (for i = 1 both refer to v_0).
            let mut x = ChainState(DVector::zeros(2 * n + 2));
            let r = -w_0;
            if i > 0 {
                x.set_v(i, w_i);
            }
            let mut grad = cbf_gradient(policy, i, &x, r);
            if reduced {
                grad -= cbf_gradient(policy, 0, &x, r);
            }
            let norm = grad.rows(0, 2 * n + 2).norm();
            best = best.max(norm);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RobustMode {
    /// Treat the estimate as the true state.
    Naive,
    /// Shift each row by `-L_row (dM/dt + gamma_row M)`.
    #[default]
    Robust,
    /// As `Robust`, but never loosen a row.
    Clamped,
}

/// Per-row offset shifts for the robust constraints, row 0 first.
pub fn robust_shifts(
    params: &FilterParams,
    bound: &ErrorBound,
    t: f64,
    bx: &RelSpeedBox,
    mode: RobustMode,
) -> Vec<f64> {
    let n = params.n_followers();
    let (m, m_dot) = error_bound_at(t, bound);
    (0..=n)
        .map(|i| {
            if mode == RobustMode::Naive {
                return 0.0;
            }
            let lip = lipschitz_coeff(&params.policy, i, i > 0, bx);
            let shift = -lip * (m_dot + params.gamma[i] * m);
            if mode == RobustMode::Clamped {
                shift.min(0.0)
            } else {
                shift
            }
        })
        .collect()
}

/// Inputs for the observer-based safety filter at one instant.
#[derive(Debug, Clone, Copy)]
pub struct RobustContext<'a> {
    pub sys: &'a LinearSystem,
    pub eq: &'a Equilibrium,
    pub cfg: &'a ObserverConfig,
    pub bound: &'a ErrorBound,
    pub speed_box: RelSpeedBox,
    pub mode: RobustMode,
    /// Head acceleration, when known to the CAV.
    pub head_accel: Option<f64>,
}

/// Safety filter evaluated on the estimate `x_hat` (absolute coordinates)
/// with the observer's drift, measurement `y` in perturbation coordinates
/// and head speed `r`.
#[allow(clippy::too_many_arguments)]
pub fn robust_stc_control(
    x_hat: &ChainState,
    r: f64,
    y: &DVector<f64>,
    u_nominal: f64,
    params: &FilterParams,
    ctx: &RobustContext<'_>,
    t: f64,
    warm: &[usize],
) -> Result<StcSolution> {
    let dx = x_hat.perturbation(ctx.eq);
    let drift = observer_derivative(&dx, 0.0, y, r - ctx.eq.v_star, ctx.sys, ctx.cfg)?;
    let mut rows = assemble_rows(x_hat, r, ctx.head_accel, params, &drift, &ctx.sys.b)?;
    let shifts = robust_shifts(params, ctx.bound, t, &ctx.speed_box, ctx.mode);
    for row in &mut rows {
        let shift = shifts[row.index];
        if shift != 0.0 {
            row.offset += shift;
        }
    }
    filter_rows(&rows, u_nominal, params, warm)
}

/// Whether `h_0(x_hat) - L_0 M(t) >= 0`, the initial-condition requirement
/// of the robust guarantee.
pub fn robust_set_contains(
    x_hat: &ChainState,
    r: f64,
    params: &FilterParams,
    bound: &ErrorBound,
    t: f64,
    bx: &RelSpeedBox,
) -> bool {
    let (m, _) = error_bound_at(t, bound);
    let h0 = crate::safety::cbf_value(&params.policy, 0, x_hat, r);
    h0 - lipschitz_coeff(&params.policy, 0, false, bx) * m >= 0.0
}

/// Serde helper storing a matrix as row-major nested arrays.
pub mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("matrix rows have different lengths"));
        }
        Ok(DMatrix::from_row_iterator(
            rows.len(),
            ncols,
            rows.into_iter().flatten(),
        ))
    }
}
