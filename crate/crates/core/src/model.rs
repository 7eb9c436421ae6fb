//! Vehicle-chain dynamics.
//!
//! The chain is a head vehicle (index -1, speed `r`), one controlled vehicle
//! (index 0) and `N` human-driven followers (indices 1..=N). The state stacks
//! spacing and speed of each controlled/following vehicle:
//! `x = [s_0, v_0, s_1, v_1, ..., s_N, v_N]`.
//!
//! Followers obey the optimal velocity model with a cosine range policy; the
//! controlled vehicle is a double integrator driven by its commanded
//! acceleration.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, StcError};

const BISECTION_TOL: f64 = 1e-10;

/// Optimal-velocity car-following parameters of a human driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OvmParams {
    /// Sensitivity to the desired-speed error (1/s).
    pub a: f64,
    /// Sensitivity to the relative speed (1/s).
    pub b: f64,
    /// Speed limit (m/s).
    pub v_max: f64,
    /// Standstill spacing (m).
    pub s_st: f64,
    /// Free-flow spacing (m).
    pub s_go: f64,
}

impl OvmParams {
    /// Driver parameters of the synthetic benchmark chain.
    pub fn table1() -> Self {
        Self {
            a: 0.6,
            b: 0.9,
            v_max: 40.0,
            s_st: 5.0,
            s_go: 35.0,
        }
    }

    /// Driver parameters calibrated against recorded highway trajectories.
    pub fn ngsim() -> Self {
        Self {
            a: 0.16,
            b: 0.63,
            v_max: 46.9,
            s_st: 1.6,
            s_go: 50.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.a > 0.0) {
            errs.push(format!("ovm.a must be > 0 (got {})", self.a));
        }
        if !(self.b >= 0.0) {
            errs.push(format!("ovm.b must be >= 0 (got {})", self.b));
        }
        if !(self.v_max > 0.0) {
            errs.push(format!("ovm.v_max must be > 0 (got {})", self.v_max));
        }
        if !(self.s_st > 0.0 && self.s_st < self.s_go) {
            errs.push(format!(
                "ovm spacings must satisfy 0 < s_st < s_go (got s_st = {}, s_go = {})",
                self.s_st, self.s_go
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(StcError::Config(errs))
        }
    }
}

/// Desired speed of a human driver as a function of spacing.
///
/// Zero below the standstill spacing, `v_max` above the free-flow spacing and
/// a cosine ramp in between.
pub fn range_policy(s: f64, p: &OvmParams) -> f64 {
    if s <= p.s_st {
        0.0
    } else if s >= p.s_go {
        p.v_max
    } else {
        let phase = PI * (s - p.s_st) / (p.s_go - p.s_st);
        0.5 * p.v_max * (1.0 - phase.cos())
    }
}

/// Analytic derivative of [`range_policy`]; zero outside the ramp.
pub fn range_policy_slope(s: f64, p: &OvmParams) -> f64 {
    if s <= p.s_st || s >= p.s_go {
        0.0
    } else {
        let width = p.s_go - p.s_st;
        0.5 * p.v_max * (PI / width) * (PI * (s - p.s_st) / width).sin()
    }
}

/// Unsaturated OVM acceleration `a (V(s) - v) + b s_dot`.
pub fn ovm_accel(s: f64, s_dot: f64, v: f64, p: &OvmParams) -> f64 {
    p.a * (range_policy(s, p) - v) + p.b * s_dot
}

/// Spacing at which a human driver is in equilibrium at speed `v_star`.
pub fn equilibrium_spacing(v_star: f64, p: &OvmParams) -> Result<f64> {
    if !(0.0..=p.v_max).contains(&v_star) {
        return Err(StcError::InvalidParameter(format!(
            "equilibrium speed {v_star} outside [0, {}]",
            p.v_max
        )));
    }
    if v_star == 0.0 {
        return Ok(p.s_st);
    }
    if v_star == p.v_max {
        return Ok(p.s_go);
    }
    let (mut lo, mut hi) = (p.s_st, p.s_go);
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if range_policy(mid, p) < v_star {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Uniform-speed steady state of the chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub v_star: f64,
    pub s_star_hdv: f64,
    pub s_star_cav: f64,
}

impl Equilibrium {
    /// Equilibrium with the HDV spacing solved from the range policy and the
    /// CAV using the same spacing.
    pub fn from_speed(v_star: f64, p: &OvmParams) -> Result<Self> {
        let s = equilibrium_spacing(v_star, p)?;
        Ok(Self {
            v_star,
            s_star_hdv: s,
            s_star_cav: s,
        })
    }

    /// Equilibrium spacing of vehicle `i` (0 is the CAV).
    pub fn spacing(&self, i: usize) -> f64 {
        if i == 0 {
            self.s_star_cav
        } else {
            self.s_star_hdv
        }
    }

    /// Equilibrium value of state component `j` in `[s_0, v_0, ...]` order.
    pub fn state_component(&self, j: usize) -> f64 {
        if j.is_multiple_of(2) {
            self.spacing(j / 2)
        } else {
            self.v_star
        }
    }

    /// Residual of the HDV steady-state condition `F(s*, 0, v*)`.
    pub fn residual(&self, p: &OvmParams) -> f64 {
        ovm_accel(self.s_star_hdv, 0.0, self.v_star, p)
    }
}

/// Coefficients of the linearized car-following law
/// `dv/dt = a1 s - a2 v + a3 v_pred`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearCoeffs {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl LinearCoeffs {
    /// `a1 - a2 a3 + a3^2`; controllability of (A, B) and observability of
    /// (A, C) both require it to be nonzero.
    pub fn indicator(&self) -> f64 {
        self.a1 - self.a2 * self.a3 + self.a3 * self.a3
    }

    /// True when the linearization point sits off the range-policy ramp.
    pub fn is_flat(&self) -> bool {
        self.a1 == 0.0
    }
}

/// Linearize the OVM at spacing `s_star`.
pub fn linearize(p: &OvmParams, s_star: f64) -> LinearCoeffs {
    LinearCoeffs {
        a1: p.a * range_policy_slope(s_star, p),
        a2: p.a + p.b,
        a3: p.b,
    }
}

/// Absolute chain state `[s_0, v_0, ..., s_N, v_N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState(pub DVector<f64>);

impl ChainState {
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if values.len() < 4 || !values.len().is_multiple_of(2) {
            return Err(StcError::InvalidParameter(format!(
                "chain state length must be even and at least 4 (got {})",
                values.len()
            )));
        }
        Ok(Self(DVector::from_vec(values)))
    }

    /// Every vehicle at the equilibrium spacing and speed.
    pub fn at_equilibrium(eq: &Equilibrium, n_followers: usize) -> Self {
        let mut x = DVector::zeros(2 * n_followers + 2);
        for i in 0..=n_followers {
            x[2 * i] = eq.spacing(i);
            x[2 * i + 1] = eq.v_star;
        }
        Self(x)
    }

    /// Rebuild an absolute state from a perturbation about `eq`.
    pub fn from_perturbation(dx: &DVector<f64>, eq: &Equilibrium) -> Self {
        let mut x = dx.clone();
        for i in 0..x.len() / 2 {
            x[2 * i] += eq.spacing(i);
            x[2 * i + 1] += eq.v_star;
        }
        Self(x)
    }

    pub fn n_followers(&self) -> usize {
        self.0.len() / 2 - 1
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn s(&self, i: usize) -> f64 {
        self.0[2 * i]
    }

    pub fn v(&self, i: usize) -> f64 {
        self.0[2 * i + 1]
    }

    pub fn set_s(&mut self, i: usize, value: f64) {
        self.0[2 * i] = value;
    }

    pub fn set_v(&mut self, i: usize, value: f64) {
        self.0[2 * i + 1] = value;
    }

    /// Speed of the vehicle ahead of `i`, with the head vehicle's speed `r`
    /// standing in for `i = 0`.
    pub fn predecessor_speed(&self, i: usize, r: f64) -> f64 {
        if i == 0 {
            r
        } else {
            self.v(i - 1)
        }
    }

    /// Deviation from the equilibrium.
    pub fn perturbation(&self, eq: &Equilibrium) -> DVector<f64> {
        let mut dx = self.0.clone();
        for i in 0..dx.len() / 2 {
            dx[2 * i] -= eq.spacing(i);
            dx[2 * i + 1] -= eq.v_star;
        }
        dx
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Linearized chain `dx/dt = A x + B u + D r` with output `y = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub d: DVector<f64>,
    pub c: DMatrix<f64>,
}

impl LinearSystem {
    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn n_followers(&self) -> usize {
        self.n_states() / 2 - 1
    }

    /// Car-following coefficients read back from the first follower block.
    pub fn coeffs(&self) -> LinearCoeffs {
        LinearCoeffs {
            a1: self.a[(3, 2)],
            a2: -self.a[(3, 3)],
            a3: self.a[(3, 1)],
        }
    }
}

/// Assemble the block lower-bidiagonal linear model.
///
/// The output matrix measures the CAV's spacing and speed errors and the
/// speed errors of every follower.
pub fn build_linear_system(n_followers: usize, c: &LinearCoeffs) -> Result<LinearSystem> {
    if n_followers == 0 {
        return Err(StcError::InvalidParameter(
            "at least one follower is required".into(),
        ));
    }
    let n = 2 * n_followers + 2;
    let mut a = DMatrix::zeros(n, n);
    a[(0, 1)] = -1.0;
    for i in 1..=n_followers {
        let (rs, rv) = (2 * i, 2 * i + 1);
        // P_i
        a[(rs, rv)] = -1.0;
        a[(rv, rs)] = c.a1;
        a[(rv, rv)] = -c.a2;
        // Q_i
        a[(rs, rv - 2)] = 1.0;
        a[(rv, rv - 2)] = c.a3;
    }
    let mut b = DVector::zeros(n);
    b[1] = 1.0;
    let mut d = DVector::zeros(n);
    d[0] = 1.0;

    let mut cm = DMatrix::zeros(n_followers + 2, n);
    cm[(0, 0)] = 1.0;
    cm[(1, 1)] = 1.0;
    for i in 1..=n_followers {
        cm[(i + 1, 2 * i + 1)] = 1.0;
    }
    Ok(LinearSystem { a, b, d, c: cm })
}

/// Chain derivative with a caller-supplied follower acceleration law
/// `accel(i, s_i, s_dot_i, v_i)`.
pub fn derivative_with<F>(x: &ChainState, r: f64, u: f64, mut accel: F) -> DVector<f64>
where
    F: FnMut(usize, f64, f64, f64) -> f64,
{
    let n = x.n_followers();
    let mut dx = DVector::zeros(x.len());
    dx[0] = r - x.v(0);
    dx[1] = u;
    for i in 1..=n {
        let s_dot = x.v(i - 1) - x.v(i);
        dx[2 * i] = s_dot;
        dx[2 * i + 1] = accel(i, x.s(i), s_dot, x.v(i));
    }
    dx
}

/// Nonlinear chain dynamics with OVM followers and no saturation.
///
/// `hdv` holds either one parameter set shared by every follower or one set
/// per follower.
pub fn nonlinear_derivative(
    x: &ChainState,
    r: f64,
    u: f64,
    hdv: &[OvmParams],
) -> Result<DVector<f64>> {
    let n = x.n_followers();
    if hdv.len() != 1 {
        check_len(n, hdv.len())?;
    }
    Ok(derivative_with(x, r, u, |i, s, s_dot, v| {
        let p = if hdv.len() == 1 { &hdv[0] } else { &hdv[i - 1] };
        ovm_accel(s, s_dot, v, p)
    }))
}

/// Linear-model derivative in absolute coordinates about `eq`.
pub fn linear_derivative(
    sys: &LinearSystem,
    eq: &Equilibrium,
    x: &ChainState,
    r: f64,
    u: f64,
) -> Result<DVector<f64>> {
    check_len(sys.n_states(), x.len())?;
    let dx = x.perturbation(eq);
    Ok(&sys.a * dx + &sys.b * u + &sys.d * (r - eq.v_star))
}
