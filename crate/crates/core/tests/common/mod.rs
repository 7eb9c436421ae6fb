//! Shared test oracles.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stc_core::qp::{QpProblem, QpRow};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const ORACLE_TOL: f64 = 1e-9;

/// Constraint `k` as `(normal, offset)`, rows first then variable bounds;
/// `None` for an unbounded variable.
fn constraint(p: &QpProblem, k: usize) -> Option<(Vec<f64>, f64)> {
    let m = p.rows.len();
    if k < m {
        return Some((p.rows[k].coeffs.clone(), p.rows[k].offset));
    }
    let j = k - m;
    p.nonneg_mask[j].then(|| {
        let mut e = vec![0.0; p.n_vars()];
        e[j] = 1.0;
        (e, 0.0)
    })
}

/// Brute-force QP solve: try every active subset of at most `n` constraints,
/// solve its KKT system and keep the feasible, dual-feasible point with the
/// lowest objective. `None` means no subset qualified (infeasible).
pub fn enumerate_qp(p: &QpProblem) -> Option<(Vec<f64>, f64)> {
    let n = p.n_vars();
    let all: Vec<(Vec<f64>, f64)> = (0..p.rows.len() + n)
        .filter_map(|k| constraint(p, k))
        .collect();
    let total = all.len();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for mask in 0u32..(1 << total) {
        let active: Vec<usize> = (0..total).filter(|k| mask & (1 << k) != 0).collect();
        let s = active.len();
        if s > n {
            continue;
        }
        // [H  -A'] [z]   [-f]
        // [A   0 ] [l] = [-b]
        let mut kkt = DMatrix::zeros(n + s, n + s);
        let mut rhs = DVector::zeros(n + s);
        for j in 0..n {
            kkt[(j, j)] = p.diag_h[j];
            rhs[j] = -p.lin_f[j];
        }
        for (a, &k) in active.iter().enumerate() {
            let (normal, offset) = &all[k];
            for j in 0..n {
                kkt[(j, n + a)] = -normal[j];
                kkt[(n + a, j)] = normal[j];
            }
            rhs[n + a] = -offset;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        if sol.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let z: Vec<f64> = sol.rows(0, n).iter().copied().collect();
        let scale = 1.0 + z.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let primal_ok = all.iter().all(|(normal, offset)| {
            normal.iter().zip(&z).map(|(a, z)| a * z).sum::<f64>() + offset >= -ORACLE_TOL * scale
        });
        let dual_ok = (0..s).all(|a| sol[n + a] >= -ORACLE_TOL * scale);
        if primal_ok && dual_ok {
            let obj = p.objective(&z);
            if best.as_ref().is_none_or(|(_, b)| obj < *b) {
                best = Some((z, obj));
            }
        }
    }
    best
}

/// Random strictly convex QP with `1..=max_vars` variables and
/// `0..=max_rows` rows.
pub fn random_qp(rng: &mut impl Rng, max_vars: usize, max_rows: usize) -> QpProblem {
    let n = rng.random_range(1..=max_vars);
    let m = rng.random_range(0..=max_rows);
    QpProblem {
        diag_h: (0..n).map(|_| rng.random_range(0.5..5.0)).collect(),
        lin_f: (0..n).map(|_| rng.random_range(-5.0..5.0)).collect(),
        rows: (0..m)
            .map(|_| QpRow {
                coeffs: (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
                offset: rng.random_range(-3.0..3.0),
            })
            .collect(),
        nonneg_mask: (0..n).map(|_| rng.random_bool(0.5)).collect(),
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

use stc_core::config::ChainConfig;
use stc_core::model::{nonlinear_derivative, ChainState};
use stc_core::safety::{cbf_gradient, cbf_value, SpacingPolicy};
use stc_core::sim::linear_model;

/// Largest entry gap between the linear model `[A | D | B]` and central
/// differences of the nonlinear chain dynamics at equilibrium.
pub fn jacobian_gap(cfg: &ChainConfig) -> f64 {
    let sys = linear_model(cfg).unwrap();
    let x0 = ChainState::at_equilibrium(&cfg.equilibrium, cfg.n_followers);
    let v = cfg.equilibrium.v_star;
    let hdv = [cfg.hdv];
    let f = |x: &ChainState, r: f64, u: f64| nonlinear_derivative(x, r, u, &hdv).unwrap();
    let h = 1e-5;
    let nx = x0.len();
    let mut gap = 0.0_f64;
    for j in 0..nx {
        let (mut xp, mut xm) = (x0.clone(), x0.clone());
        xp.0[j] += h;
        xm.0[j] -= h;
        let col = (f(&xp, v, 0.0) - f(&xm, v, 0.0)) / (2.0 * h);
        gap = gap.max((col - sys.a.column(j)).amax());
    }
    let dr = (f(&x0, v + h, 0.0) - f(&x0, v - h, 0.0)) / (2.0 * h);
    gap = gap.max((dr - &sys.d).amax());
    let du = (f(&x0, v, h) - f(&x0, v, -h)) / (2.0 * h);
    gap.max((du - &sys.b).amax())
}

/// Largest gap between `cbf_gradient` and central differences of
/// `cbf_value` in `(x, r)` over random states.
pub fn gradient_gap(policy: &SpacingPolicy, samples: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let h = 1e-6;
    let mut gap = 0.0_f64;
    for _ in 0..samples {
        let vals: Vec<f64> = (0..6)
            .map(|k| {
                if k % 2 == 0 {
                    rng.random_range(0.0..60.0)
                } else {
                    rng.random_range(0.0..35.0)
                }
            })
            .collect();
        let x = ChainState::from_vec(vals).unwrap();
        let r = rng.random_range(0.0..35.0);
        for i in 0..3 {
            let g = cbf_gradient(policy, i, &x, r);
            for j in 0..=x.len() {
                let eval = |d: f64| {
                    if j < x.len() {
                        let mut y = x.clone();
                        y.0[j] += d;
                        cbf_value(policy, i, &y, r)
                    } else {
                        cbf_value(policy, i, &x, r + d)
                    }
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                gap = gap.max((fd - g[j]).abs());
            }
        }
    }
    gap
}
