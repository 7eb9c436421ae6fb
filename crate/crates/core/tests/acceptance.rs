//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::process::ExitCode;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use stc_core::config::ChainConfig;
use stc_core::io::HarshBrake;
use stc_core::model::{linearize, ChainState};
use stc_core::nominal::{string_stability_check, DEFAULT_OMEGA_MAX, DEFAULT_SAMPLES};
use stc_core::observer::{
    design_gain, error_bound_at, error_matrix, lipschitz_coeff, robust_set_contains, ErrorBound,
    RelSpeedBox,
};
use stc_core::qp::{solve, QpStatus};
use stc_core::safety::{cbf_value, reduced_cbf, PolicyKind, SpacingPolicy};
use stc_core::sim::{
    linear_model, safety_metrics, simulate, sweep_safe_range, ControllerKind, DriftModel,
    PlantModel, ScenarioKind, ScenarioSpec, SimRecord, SimSettings, SweepResult,
};

/// Peak HHDV speed drop in the table scenario 1: 6 m/s^2 for 3.3 s.
const HEAD_DROP: f64 = 19.8;
/// Allowed dip of `h_0` below zero in scenario 1.
const H0_DIP: f64 = 1.0;
/// Allowed dip for forward invariance on the linear plant.
const INVARIANCE_DIP: f64 = 1e-3;
const QP_INSTANCES: usize = 1000;
const QP_OBJ_TOL: f64 = 1e-8;
const QP_SOL_TOL: f64 = 1e-7;
const FD_TOL: f64 = 1e-6;
const FIXED_POINT_TOL: f64 = 1e-9;
const IMPLICATION_SAMPLES: usize = 10_000;
const OBSERVER_SAMPLES: usize = 100;
const TAUS: [f64; 5] = [0.1, 0.3, 0.5, 1.0, 3.0];
const SWEEP_ACCELS: [f64; 5] = [1.0, 2.0, 4.0, 6.0, 8.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run(cfg: &ChainConfig, spec: &ScenarioSpec, settings: &SimSettings) -> SimRecord {
    simulate(cfg, spec, settings).expect("simulation failed")
}

fn settings(controller: ControllerKind, saturate: bool) -> SimSettings {
    SimSettings {
        controller,
        saturate,
        ..SimSettings::default()
    }
}

fn all_positive(rec: &SimRecord) -> bool {
    (0..=rec.n_followers).all(|i| rec.min_spacing(i) > 0.0)
}

fn min_spacings(rec: &SimRecord) -> String {
    let v: Vec<String> = (0..=rec.n_followers)
        .map(|i| format!("{:.3}", rec.min_spacing(i)))
        .collect();
    format!("[{}]", v.join(", "))
}

fn c1_scenario1_contrast() -> Outcome {
    let cfg = ChainConfig::table1();
    let spec = ScenarioSpec::table_scenario1();
    let nominal = run(&cfg, &spec, &settings(ControllerKind::Nominal, false));
    let stc = run(&cfg, &spec, &settings(ControllerKind::Stc, false));
    let h0 = safety_metrics(&stc).min_cbf[0];
    let s0 = nominal.min_spacing(0);
    outcome(
        s0 < 0.0 && all_positive(&stc) && h0 >= -H0_DIP,
        format!(
            "nominal min s0 = {s0:.3} (< 0); STC min s = {} (> 0); STC min h0 = {h0:.3} (>= -{H0_DIP})",
            min_spacings(&stc)
        ),
    )
}

fn c2_string_proxy() -> Outcome {
    let cfg = ChainConfig::table1();
    let stc = run(
        &cfg,
        &ScenarioSpec::table_scenario1(),
        &settings(ControllerKind::Stc, false),
    );
    let m = safety_metrics(&stc);
    let drop = m.max_speed_drop[2];
    outcome(
        (m.head_max_drop - HEAD_DROP).abs() < 1e-9 && drop < HEAD_DROP,
        format!(
            "FHDV-2 peak drop {drop:.3} m/s < HHDV drop {:.3} m/s",
            m.head_max_drop
        ),
    )
}

fn c3_scenario2_contrast() -> Outcome {
    let cfg = ChainConfig::table1();
    let spec = ScenarioSpec::table_scenario2();
    let nominal = run(
        &cfg,
        &spec,
        &cfg.sim.with_controller(ControllerKind::Nominal),
    );
    let stc = run(&cfg, &spec, &cfg.sim.with_controller(ControllerKind::Stc));
    let s0 = nominal.min_spacing(0);
    outcome(
        s0 < 0.0 && all_positive(&stc),
        format!(
            "preset settings; nominal min s0 = {s0:.3} (< 0); STC min s = {} (> 0)",
            min_spacings(&stc)
        ),
    )
}

fn c4_saturation() -> Outcome {
    let cfg = ChainConfig::table1();
    let stc = run(
        &cfg,
        &ScenarioSpec::table_scenario1(),
        &settings(ControllerKind::Stc, true),
    );
    let s0 = stc.min_spacing(0);
    let h0 = safety_metrics(&stc).min_cbf[0];
    outcome(
        s0 < 0.0,
        format!("saturated STC min s0 = {s0:.3} (expected < 0); min h0 = {h0:.3}"),
    )
}

fn sweep(cfg: &ChainConfig, controller: ControllerKind) -> SweepResult {
    let speeds: Vec<f64> = (0..=8).map(|k| 2.5 * k as f64).collect();
    let s = settings(controller, true);
    sweep_safe_range(cfg, ScenarioKind::Scenario1, &SWEEP_ACCELS, &speeds, &s)
        .expect("sweep failed")
}

fn c5_sweep_trends() -> Outcome {
    let per_tau: Vec<SweepResult> = TAUS
        .par_iter()
        .map(|&tau| {
            let mut cfg = ChainConfig::table1();
            cfg.filter.policy.tau = tau;
            sweep(&cfg, ControllerKind::Stc)
        })
        .collect();
    let nominal = sweep(&ChainConfig::table1(), ControllerKind::Nominal);
    let na = SWEEP_ACCELS.len();

    let followers_cover = per_tau
        .iter()
        .all(|r| (0..na).all(|ai| r.covers_grid(ai, Some(1)) && r.covers_grid(ai, Some(2))));
    let counts: Vec<Vec<usize>> = per_tau
        .iter()
        .map(|r| (0..na).map(|ai| r.safe_count(ai, Some(0))).collect())
        .collect();
    let monotone = (0..na).all(|ai| counts.windows(2).all(|w| w[0][ai] <= w[1][ai]));
    let mut inclusion = Vec::new();
    for (tau, r) in TAUS.iter().zip(&per_tau) {
        let ok = r
            .cells
            .iter()
            .zip(&nominal.cells)
            .all(|(s, n)| s.chain_safe || !n.chain_safe);
        inclusion.push((*tau, ok));
    }
    let tau1 = inclusion
        .iter()
        .find(|(t, _)| *t == 1.0)
        .map(|x| x.1)
        .unwrap_or(false);
    let cav_counts: Vec<String> = counts.iter().map(|c| format!("{c:?}")).collect();
    outcome(
        followers_cover && monotone && tau1,
        format!(
            "(a) followers cover [0, v*]: {followers_cover}; (b) CAV safe counts per a_H by tau {}: {}; \
             (c) chain STC >= nominal per tau: {:?} (nominal chain-safe cells {})",
            cav_counts.join(" "),
            monotone,
            inclusion,
            nominal.cells.iter().filter(|c| c.chain_safe).count()
        ),
    )
}

fn c6_observer_contrast() -> Outcome {
    let cfg = ChainConfig::table1();
    let spec = ScenarioSpec::scenario2(6.0, 2.2);
    let offset = Some(vec![0.0, 0.0, 6.0, 0.0, 6.0, 0.0]);
    let with = |controller| SimSettings {
        controller,
        estimate_offset: offset.clone(),
        ..cfg.sim.clone()
    };
    let naive = run(&cfg, &spec, &with(ControllerKind::StcObserverNaive));
    let robust = run(&cfg, &spec, &with(ControllerKind::StcObserverRobust));
    let (sn, sr) = (naive.min_spacing(0), robust.min_spacing(0));
    outcome(
        sr > 0.0 && sn < sr,
        format!("robust min s0 = {sr:.3} (> 0); naive min s0 = {sn:.3} (< robust)"),
    )
}

fn c7_string_stability() -> Outcome {
    let cfg = ChainConfig::table1();
    let c = linearize(&cfg.hdv, cfg.equilibrium.s_star_hdv);
    let rep = string_stability_check(
        &c,
        &cfg.gains,
        cfg.n_followers,
        DEFAULT_OMEGA_MAX,
        DEFAULT_SAMPLES,
    )
    .unwrap();
    outcome(
        rep.max_gain < 1.0 && rep.string_stable,
        format!(
            "max |G(jw)| = {:.9} at w = {:.3e} over {} samples",
            rep.max_gain,
            rep.argmax_omega,
            rep.grid.len()
        ),
    )
}

fn c8_qp_oracle() -> Outcome {
    let mut rng = common::rng(8);
    let (mut worst_obj, mut worst_sol, mut mismatched, mut infeasible) = (0.0_f64, 0.0_f64, 0, 0);
    for _ in 0..QP_INSTANCES {
        let p = common::random_qp(&mut rng, 4, 7);
        let sol = solve(&p).unwrap();
        match common::enumerate_qp(&p) {
            Some((z, obj)) if sol.status == QpStatus::Solved => {
                worst_obj = worst_obj.max((p.objective(&sol.z) - obj).abs());
                worst_sol = worst_sol.max(common::l2_diff(&sol.z, &z));
            }
            None if sol.status == QpStatus::Infeasible => infeasible += 1,
            _ => mismatched += 1,
        }
    }
    outcome(
        mismatched == 0 && worst_obj <= QP_OBJ_TOL && worst_sol <= QP_SOL_TOL,
        format!(
            "{QP_INSTANCES} instances ({infeasible} infeasible), status mismatches {mismatched}, \
             max objective gap {worst_obj:.2e}, max solution gap {worst_sol:.2e}"
        ),
    )
}

/// Hard-row-only STC on the linear plant with exact constraint drift.
fn invariance_settings(head_accel_known: bool) -> SimSettings {
    SimSettings {
        saturate: false,
        plant: PlantModel::Linear,
        drift_model: DriftModel::Linear,
        head_accel_known,
        ..SimSettings::default()
    }
}

fn c9a_forward_invariance() -> (f64, f64, f64) {
    let mut cfg = ChainConfig::table1();
    cfg.filter.hdv_rows = false;
    let policy = cfg.filter.policy;

    // constant head speed, random starts on or inside the boundary
    let mut rng = common::rng(91);
    let mut starts = Vec::new();
    while starts.len() < 100 {
        let v0 = rng.random_range(20.0..32.0);
        let s0 = rng.random_range(1.0..40.0);
        let mut x = ChainState::at_equilibrium(&cfg.equilibrium, 2);
        x.set_s(0, s0);
        x.set_v(0, v0);
        if cbf_value(&policy, 0, &x, cfg.equilibrium.v_star) >= 0.0 {
            starts.push((s0, v0));
        }
    }
    let random_min = starts
        .par_iter()
        .map(|&(s0, v0)| {
            let mut c = cfg.clone();
            c.initial.s0 = Some(s0);
            c.initial.v0 = Some(v0);
            let rec = run(
                &c,
                &ScenarioSpec::scenario2(0.0, 0.0),
                &invariance_settings(false),
            );
            safety_metrics(&rec).min_cbf[0]
        })
        .reduce(|| f64::INFINITY, f64::min);

    // braking head, table scenario 1 grid
    let grid: Vec<(f64, f64)> = [2.0, 4.0, 6.0]
        .iter()
        .flat_map(|&a| [1.0, 2.0, 3.3].map(move |t| (a, t)))
        .collect();
    let scenario = |known: bool| {
        grid.par_iter()
            .map(|&(a, t)| {
                safety_metrics(&run(
                    &cfg,
                    &ScenarioSpec::scenario1(a, t),
                    &invariance_settings(known),
                ))
                .min_cbf[0]
            })
            .reduce(|| f64::INFINITY, f64::min)
    };
    (random_min, scenario(true), scenario(false))
}

fn c9b_observer_bound() -> (f64, f64, f64) {
    let cfg = ChainConfig::table1();
    let sys = linear_model(&cfg).unwrap();
    let obs = design_gain(&sys, 1.0, 1.0).unwrap();
    let m = error_matrix(&sys, &obs.l);
    let mut rng = common::rng(92);
    let mut worst = 0.0_f64;
    let times: Vec<f64> = (0..=100).map(|k| 0.1 * k as f64).collect();
    let props: Vec<_> = times.iter().map(|&t| (&m * t).exp()).collect();
    for _ in 0..OBSERVER_SAMPLES {
        let e0 = DVector::from_iterator(6, (0..6).map(|_| rng.random_range(-10.0..10.0)));
        for (t, p) in times.iter().zip(&props) {
            let bound = obs.m0_factor * e0.norm() * (-obs.lambda_rate * t).exp();
            worst = worst.max((p * &e0).norm() / bound);
        }
    }
    (worst, obs.m0_factor, obs.lambda_rate)
}

fn c9c_membership() -> (usize, f64) {
    let cfg = ChainConfig::table1();
    let params = &cfg.filter;
    let sys = linear_model(&cfg).unwrap();
    let obs = design_gain(&sys, 1.0, 1.0).unwrap();
    let bound = ErrorBound {
        m0: obs.m0_factor * 2.0,
        lambda_rate: obs.lambda_rate,
    };
    let half = cfg.hdv.v_max;
    let bx = RelSpeedBox::symmetric(half);
    let l0 = lipschitz_coeff(&params.policy, 0, false, &bx);
    let mut rng = common::rng(93);
    let (mut checked, mut worst) = (0, f64::INFINITY);
    while checked < IMPLICATION_SAMPLES {
        let t = rng.random_range(0.0..5.0);
        let (m, _) = error_bound_at(t, &bound);
        let r = rng.random_range(0.0..half);
        let v0 = (r + rng.random_range(-half..half)).max(0.0);
        let mut x_hat = ChainState::at_equilibrium(&cfg.equilibrium, 2);
        x_hat.set_v(0, v0);
        // place h_0(x_hat) just above the robust margin
        x_hat.set_s(0, 0.0);
        let base = cbf_value(&params.policy, 0, &x_hat, r);
        x_hat.set_s(0, l0 * m - base + rng.random_range(0.0..0.05));
        if !robust_set_contains(&x_hat, r, params, &bound, t, &bx) {
            continue;
        }
        let dir = DVector::from_iterator(6, (0..6).map(|_| rng.random_range(-1.0..1.0f64)));
        let radius = m * rng.random_range(0.0..1.0f64).powf(1.0 / 6.0);
        let x = ChainState(&x_hat.0 + dir.normalize() * radius);
        let w0 = x.v(0) - r;
        if w0.abs() > half {
            continue;
        }
        worst = worst.min(cbf_value(&params.policy, 0, &x, r));
        checked += 1;
    }
    (checked, worst)
}

fn c9_theorems() -> Outcome {
    let (random_min, known_min, unknown_min) = c9a_forward_invariance();
    let (ratio, kappa, lambda) = c9b_observer_bound();
    let (n, worst_h0) = c9c_membership();
    let a = random_min >= -INVARIANCE_DIP && known_min >= -INVARIANCE_DIP;
    let b = ratio <= 1.0 + 1e-9;
    let c = worst_h0 >= -1e-12;
    outcome(
        a && b && c,
        format!(
            "(a) min h0: random starts {random_min:.2e}, scenario-1 grid with head accel {known_min:.2e} \
             (without: {unknown_min:.3}); (b) max |e(t)| / bound = {ratio:.4} (kappa {kappa:.3}, lambda {lambda:.3}); \
             (c) {n} pairs, min h0(x) = {worst_h0:.3e}"
        ),
    )
}

fn c10_model_checks() -> Outcome {
    let cfg = ChainConfig::table1();
    let rec = run(&cfg, &ScenarioSpec::scenario2(0.0, 0.0), &cfg.sim);
    let eq = cfg.equilibrium;
    let drift = rec
        .spacing
        .iter()
        .flatten()
        .map(|s| (s - eq.s_star_hdv).abs())
        .chain(rec.speed.iter().flatten().map(|v| (v - eq.v_star).abs()))
        .fold(0.0_f64, f64::max);
    let jac = common::jacobian_gap(&cfg).max(common::jacobian_gap(&ChainConfig::table3_ngsim()));
    let kinds = [PolicyKind::Th, PolicyKind::Ttc, PolicyKind::Sdh];
    let grad = kinds
        .iter()
        .map(|&k| common::gradient_gap(&SpacingPolicy::new(k, 1.0, 7.0), 200, 10))
        .fold(0.0_f64, f64::max);

    let mut rng = common::rng(10);
    let mut violations = 0;
    let mut premise = 0;
    for kind in kinds {
        let policy = SpacingPolicy::new(kind, rng.random_range(0.1..3.0), 7.0);
        for _ in 0..IMPLICATION_SAMPLES {
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
            let h0 = cbf_value(&policy, 0, &x, r);
            for i in 1..=2 {
                let (hbar, _) = reduced_cbf(&policy, i, &x, r);
                if hbar >= 0.0 && h0 >= 0.0 {
                    premise += 1;
                    if cbf_value(&policy, i, &x, r) < 0.0 {
                        violations += 1;
                    }
                }
            }
        }
    }
    outcome(
        drift < FIXED_POINT_TOL && jac < FD_TOL && grad < FD_TOL && violations == 0,
        format!(
            "fixed-point drift {drift:.1e}; Jacobian gap {jac:.1e}; gradient gap {grad:.1e}; \
             implication violations {violations} of {premise} premises"
        ),
    )
}

fn replay_structure() -> Outcome {
    let base = ChainConfig::table3_ngsim();
    let spec = ScenarioSpec::replay(HarshBrake::stop_and_wait().trace().unwrap());
    let nominal = run(
        &base,
        &spec,
        &base.sim.with_controller(ControllerKind::Nominal),
    );
    let stc = run(&base, &spec, &base.sim.with_controller(ControllerKind::Stc));
    let cells: Vec<(f64, f64)> = (1..=10)
        .flat_map(|a| (0..=8).map(move |b| (15.0 * a as f64, 2.0 * b as f64)))
        .collect();
    let safe: Vec<(bool, bool)> = cells
        .par_iter()
        .map(|&(s0, v0)| {
            let mut cfg = base.clone();
            cfg.initial.s0 = Some(s0);
            cfg.initial.v0 = Some(v0);
            let n = run(
                &cfg,
                &spec,
                &cfg.sim.with_controller(ControllerKind::Nominal),
            )
            .collided()
            .is_empty();
            let s = run(&cfg, &spec, &cfg.sim.with_controller(ControllerKind::Stc))
                .collided()
                .is_empty();
            (n, s)
        })
        .collect();
    let contains = safe.iter().all(|(n, s)| *s || !n);
    let count = |f: fn(&(bool, bool)) -> bool| safe.iter().filter(|c| f(c)).count();
    outcome(
        !nominal.collided().is_empty() && stc.collided().is_empty() && contains,
        format!(
            "preset start: nominal min s0 = {:.3}, STC min s = {}; region over {} starts: nominal safe {}, STC safe {}, STC >= nominal: {contains}",
            nominal.min_spacing(0),
            min_spacings(&stc),
            cells.len(),
            count(|c| c.0),
            count(|c| c.1),
        ),
    )
}

trait WithController {
    fn with_controller(&self, c: ControllerKind) -> SimSettings;
}

impl WithController for SimSettings {
    fn with_controller(&self, c: ControllerKind) -> SimSettings {
        SimSettings {
            controller: c,
            ..self.clone()
        }
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: Vec<Criterion> = vec![
        ("1 scenario-1 collision contrast", c1_scenario1_contrast),
        ("2 scenario-1 string-stability proxy", c2_string_proxy),
        ("3 scenario-2 collision contrast", c3_scenario2_contrast),
        ("4 saturation degradation", c4_saturation),
        ("5 sweep trends", c5_sweep_trends),
        ("6 observer contrast", c6_observer_contrast),
        ("7 string stability", c7_string_stability),
        ("8 QP oracle", c8_qp_oracle),
        ("9 theorem-level properties", c9_theorems),
        ("10 model checks", c10_model_checks),
        ("R replay structure", replay_structure),
    ];
    let results: Vec<Outcome> = criteria.par_iter().map(|(_, f)| f()).collect();
    let mut failed = 0;
    for ((name, _), r) in criteria.iter().zip(&results) {
        println!(
            "{} {name}: {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.detail
        );
        failed += usize::from(!r.pass);
    }
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
