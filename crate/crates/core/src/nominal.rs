//! Leading cruise control and head-to-tail string stability.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, StcError};
use crate::linalg::spectral_abscissa;
use crate::model::{build_linear_system, LinearCoeffs};

/// Default sweep used by [`string_stability_check`].
pub const DEFAULT_OMEGA_MIN: f64 = 1e-3;
pub const DEFAULT_OMEGA_MAX: f64 = 100.0;
pub const DEFAULT_SAMPLES: usize = 2000;

/// Feedback gains on the followers' spacing (`mu`) and speed (`k`) errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LccGains {
    pub mu: Vec<f64>,
    pub k: Vec<f64>,
}

impl LccGains {
    pub fn table1() -> Self {
        Self {
            mu: vec![-2.0, -2.0],
            k: vec![0.2, 0.2],
        }
    }

    pub fn zeros(n_followers: usize) -> Self {
        Self {
            mu: vec![0.0; n_followers],
            k: vec![0.0; n_followers],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn validate(&self, n_followers: usize) -> Result<()> {
        let mut errs = Vec::new();
        if self.mu.len() != n_followers {
            errs.push(format!(
                "gains.mu has {} entries, expected {n_followers}",
                self.mu.len()
            ));
        }
        if self.k.len() != n_followers {
            errs.push(format!(
                "gains.k has {} entries, expected {n_followers}",
                self.k.len()
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(StcError::Config(errs))
        }
    }
}

/// Nominal CAV acceleration from the perturbation state `dx` and the head
/// vehicle's speed perturbation `dr`.
pub fn lcc_control(dx: &DVector<f64>, dr: f64, c: &LinearCoeffs, g: &LccGains) -> Result<f64> {
    let n = g.len();
    check_len(n, g.k.len())?;
    check_len(2 * n + 2, dx.len())?;
    let mut u = c.a1 * dx[0] - c.a2 * dx[1] + c.a3 * dr;
    for i in 1..=n {
        u += g.mu[i - 1] * dx[2 * i] + g.k[i - 1] * dx[2 * i + 1];
    }
    Ok(u)
}

fn phi_psi(s: Complex64, c: &LinearCoeffs) -> (Complex64, Complex64) {
    let phi = c.a3 * s + c.a1;
    let psi = s * s + c.a2 * s + c.a1;
    (phi, psi)
}

/// Head-to-tail transfer function `V_N(s) / V_{-1}(s)` at `s = j omega`,
/// evaluated from the published closed form.
///
/// Returns `None` when `psi`, `phi` or the denominator vanish.
pub fn head_to_tail_gain(
    omega: f64,
    c: &LinearCoeffs,
    g: &LccGains,
    n_followers: usize,
) -> Option<Complex64> {
    transfer_at(Complex64::new(0.0, omega), c, g, n_followers)
}

pub(crate) fn transfer_at(
    s: Complex64,
    c: &LinearCoeffs,
    g: &LccGains,
    n_followers: usize,
) -> Option<Complex64> {
    let (phi, psi) = phi_psi(s, c);
    if psi.norm() == 0.0 || phi.norm() == 0.0 {
        return None;
    }
    let ratio = phi / psi;
    let inv = psi / phi;
    let mut sum = Complex64::new(0.0, 0.0);
    let mut inv_pow = Complex64::new(1.0, 0.0);
    for i in 0..n_followers {
        inv_pow *= inv;
        sum += (g.mu[i] * (ratio - 1.0) + g.k[i] * s) * inv_pow;
    }
    let den = psi - sum;
    if den.norm() == 0.0 {
        return None;
    }
    let mut tail = Complex64::new(1.0, 0.0);
    for _ in 0..n_followers {
        tail *= ratio;
    }
    let out = phi / den * tail;
    out.is_finite().then_some(out)
}

/// Head-to-tail gain computed from the closed-loop state-space model,
/// `e_vN^T (j omega I - A_cl)^{-1} (D + a3 B)`.
pub fn closed_loop_head_to_tail_gain(
    omega: f64,
    c: &LinearCoeffs,
    g: &LccGains,
    n_followers: usize,
) -> Option<Complex64> {
    let (a_cl, input) = closed_loop(c, g, n_followers).ok()?;
    let n = a_cl.nrows();
    let m = DMatrix::<Complex64>::from_fn(n, n, |r, col| {
        let diag = if r == col {
            Complex64::new(0.0, omega)
        } else {
            Complex64::new(0.0, 0.0)
        };
        diag - a_cl[(r, col)]
    });
    let rhs = input.map(|v| Complex64::new(v, 0.0));
    let sol = m.lu().solve(&rhs)?;
    Some(sol[n - 1])
}

/// Closed-loop matrix `A + B K` of the linear chain under LCC, and the input
/// column `D + a3 B` through which the head vehicle's speed enters.
pub fn closed_loop(
    c: &LinearCoeffs,
    g: &LccGains,
    n_followers: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    g.validate(n_followers)?;
    let sys = build_linear_system(n_followers, c)?;
    let n = sys.n_states();
    let mut k = DVector::zeros(n);
    k[0] = c.a1;
    k[1] = -c.a2;
    for i in 1..=n_followers {
        k[2 * i] = g.mu[i - 1];
        k[2 * i + 1] = g.k[i - 1];
    }
    Ok((&sys.a + &sys.b * k.transpose(), &sys.d + &sys.b * c.a3))
}

/// Which evaluation of the head-to-tail transfer function to sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainForm {
    /// The closed-form expression as published.
    #[default]
    Published,
    /// Resolvent of the closed-loop linear model.
    StateSpace,
}

/// Outcome of a frequency sweep of `|G(j omega)|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub max_gain: f64,
    pub argmax_omega: f64,
    pub grid: Vec<f64>,
    pub gains: Vec<f64>,
    pub singular_samples: Vec<f64>,
    /// Largest real part of the closed-loop eigenvalues; the frequency
    /// response only describes steady-state behaviour when this is negative.
    pub closed_loop_abscissa: f64,
    pub string_stable: bool,
}

/// Logarithmically spaced grid on `[omega_min, omega_max]`.
pub fn log_grid(omega_min: f64, omega_max: f64, samples: usize) -> Vec<f64> {
    let (lo, hi) = (omega_min.ln(), omega_max.ln());
    (0..samples)
        .map(|k| (lo + (hi - lo) * k as f64 / (samples - 1) as f64).exp())
        .collect()
}

/// Sample `|G(j omega)|` on a logarithmic grid ending at `omega_max` and
/// report the peak. Singular samples count as failures.
pub fn string_stability_check(
    c: &LinearCoeffs,
    g: &LccGains,
    n_followers: usize,
    omega_max: f64,
    samples: usize,
) -> Result<StabilityReport> {
    string_stability_check_with(c, g, n_followers, omega_max, samples, GainForm::Published)
}

pub fn string_stability_check_with(
    c: &LinearCoeffs,
    g: &LccGains,
    n_followers: usize,
    omega_max: f64,
    samples: usize,
    form: GainForm,
) -> Result<StabilityReport> {
    if !(omega_max > 0.0) || samples < 2 {
        return Err(StcError::InvalidParameter(format!(
            "frequency sweep needs omega_max > 0 and at least 2 samples (got {omega_max}, {samples})"
        )));
    }
    g.validate(n_followers)?;
    let omega_min = DEFAULT_OMEGA_MIN.min(omega_max * 1e-5);
    let grid = log_grid(omega_min, omega_max, samples);
    let mut gains = Vec::with_capacity(samples);
    let mut singular_samples = Vec::new();
    let (mut max_gain, mut argmax_omega) = (0.0_f64, grid[0]);
    for &w in &grid {
        let value = match form {
            GainForm::Published => head_to_tail_gain(w, c, g, n_followers),
            GainForm::StateSpace => closed_loop_head_to_tail_gain(w, c, g, n_followers),
        };
        match value {
            Some(v) => {
                let mag = v.norm();
                gains.push(mag);
                if mag > max_gain {
                    max_gain = mag;
                    argmax_omega = w;
                }
            }
            None => {
                gains.push(f64::INFINITY);
                singular_samples.push(w);
            }
        }
    }
    if !singular_samples.is_empty() {
        max_gain = f64::INFINITY;
    }
    let closed_loop_abscissa = spectral_abscissa(&closed_loop(c, g, n_followers)?.0)?;
    Ok(StabilityReport {
        max_gain,
        argmax_omega,
        grid,
        gains,
        closed_loop_abscissa,
        string_stable: singular_samples.is_empty() && max_gain < 1.0 && closed_loop_abscissa < 0.0,
        singular_samples,
    })
}
