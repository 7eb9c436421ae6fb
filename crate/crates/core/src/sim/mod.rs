//! Closed-loop simulation of the mixed chain.
//!
//! The plant is integrated with fixed-step RK4. The controller runs once per
//! step on the step-start state and its output is held through the step.

mod metrics;
mod scenario;
mod sweep;

pub use metrics::{safety_metrics, SafetyMetrics};
pub use scenario::{
    fhdv2_accel, head_speed, saturate, HeadTrace, ScenarioKind, ScenarioSpec, FORCED_FOLLOWER,
};
pub use sweep::{sweep_safe_range, SafeRange, SweepCell, SweepResult};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::ChainConfig;
use crate::error::{Result, StcError};
use crate::model::{
    build_linear_system, derivative_with, linearize, ovm_accel, ChainState, LinearCoeffs,
    LinearSystem,
};
use crate::nominal::lcc_control;
use crate::observer::{
    design_gain, error_bound_at, observer_derivative, robust_set_contains, robust_stc_control,
    ErrorBound, ObserverConfig, RelSpeedBox, RobustContext, RobustMode,
};
use crate::safety::{cbf_value, stc_control_warm, Fallback, FilterStatus, Plant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Nominal,
    Stc,
    StcObserverNaive,
    StcObserverRobust,
}

impl ControllerKind {
    pub fn uses_observer(self) -> bool {
        matches!(self, Self::StcObserverNaive | Self::StcObserverRobust)
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = StcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nominal" => Ok(Self::Nominal),
            "stc" => Ok(Self::Stc),
            "obs-naive" | "stc-observer-naive" => Ok(Self::StcObserverNaive),
            "obs-robust" | "stc-observer-robust" => Ok(Self::StcObserverRobust),
            other => Err(StcError::InvalidParameter(format!(
                "unknown controller '{other}'"
            ))),
        }
    }
}

/// Which model supplies the drift in the CBF constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DriftModel {
    #[default]
    Linear,
    Nonlinear,
}

/// Which model is integrated as the true vehicle chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PlantModel {
    #[default]
    Nonlinear,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub dt: f64,
    pub t_end: f64,
    pub saturate: bool,
    pub a_min: f64,
    pub a_max: f64,
    pub controller: ControllerKind,
    #[serde(default)]
    pub drift_model: DriftModel,
    #[serde(default)]
    pub plant: PlantModel,
    /// Initial estimate minus initial state, in state coordinates.
    #[serde(default)]
    pub estimate_offset: Option<Vec<f64>>,
    /// Worst-case initial error radius used instead of the true initial
    /// error when set.
    #[serde(default)]
    pub error_radius: Option<f64>,
    #[serde(default)]
    pub robust_clamped: bool,
    /// Half-width of the closing-speed box for SDH Lipschitz constants;
    /// defaults to the HDV speed limit.
    #[serde(default)]
    pub speed_box: Option<f64>,
    /// Let the safety filter use the head vehicle's acceleration.
    #[serde(default)]
    pub head_accel_known: bool,
    /// Controller sample period, a whole multiple of `dt`; defaults to `dt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_period: Option<f64>,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            dt: 0.01,
            t_end: 30.0,
            saturate: true,
            a_min: -7.0,
            a_max: 7.0,
            controller: ControllerKind::Stc,
            drift_model: DriftModel::Linear,
            plant: PlantModel::Nonlinear,
            estimate_offset: None,
            error_radius: None,
            robust_clamped: false,
            speed_box: None,
            head_accel_known: false,
            control_period: None,
        }
    }
}

impl SimSettings {
    pub fn validate(&self, n_followers: usize) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            errs.push(format!("sim.dt must be > 0 (got {})", self.dt));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            errs.push(format!("sim.t_end must be >= 0 (got {})", self.t_end));
        }
        if !(self.a_min < 0.0 && 0.0 < self.a_max) {
            errs.push(format!(
                "sim needs a_min < 0 < a_max (got {}, {})",
                self.a_min, self.a_max
            ));
        }
        if let Some(off) = &self.estimate_offset {
            if off.len() != 2 * n_followers + 2 {
                errs.push(format!(
                    "sim.estimate_offset has {} entries, expected {}",
                    off.len(),
                    2 * n_followers + 2
                ));
            }
        }
        if let Some(p) = self.control_period {
            let ratio = p / self.dt;
            if !(ratio >= 1.0 - 1e-9 && (ratio - ratio.round()).abs() < 1e-9) {
                errs.push(format!(
                    "sim.control_period must be a whole multiple of dt (got {p}, dt {})",
                    self.dt
                ));
            }
        }
        if let Some(r) = self.error_radius {
            if !(r >= 0.0) {
                errs.push(format!("sim.error_radius must be >= 0 (got {r})"));
            }
        }
        if let Some(w) = self.speed_box {
            if !(w >= 0.0) {
                errs.push(format!("sim.speed_box must be >= 0 (got {w})"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(StcError::Config(errs))
        }
    }

    fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    /// Integration steps per controller sample.
    fn hold_steps(&self) -> usize {
        self.control_period
            .map_or(1, |p| ((p / self.dt).round() as usize).max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    /// First time the vehicle's spacing reaches zero.
    Collision { vehicle: usize, time: f64 },
    QpInfeasible {
        time: f64,
        fallback: Option<Fallback>,
    },
    /// Interval over which the vehicle's acceleration was clipped.
    Saturation {
        vehicle: usize,
        start: f64,
        end: f64,
    },
}

impl Event {
    pub fn time(&self) -> f64 {
        match self {
            Event::Collision { time, .. } | Event::QpInfeasible { time, .. } => *time,
            Event::Saturation { start, .. } => *start,
        }
    }
}

/// Time series of one run. Per-vehicle traces are indexed `[vehicle][sample]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub n_followers: usize,
    pub v_star: f64,
    pub times: Vec<f64>,
    pub head_speed: Vec<f64>,
    pub spacing: Vec<Vec<f64>>,
    pub speed: Vec<Vec<f64>>,
    /// Applied accelerations, held over each step.
    pub accel: Vec<Vec<f64>>,
    /// Barrier values `h_i` of the configured policy on the true state.
    pub cbf: Vec<Vec<f64>>,
    /// Slack of follower `i` at index `i - 1`.
    pub slack: Vec<Vec<f64>>,
    pub u_nominal: Vec<f64>,
    /// Controller output before saturation.
    pub u_command: Vec<f64>,
    /// Estimated absolute state, `[component][sample]`.
    pub estimate: Option<Vec<Vec<f64>>>,
    pub error_bound: Option<Vec<f64>>,
    pub events: Vec<Event>,
    /// Whether the initial estimate satisfied the robust safe-set condition.
    pub robust_initial_ok: Option<bool>,
}

impl SimRecord {
    fn new(n: usize, v_star: f64, capacity: usize, observer: bool) -> Self {
        let traces = |count: usize| vec![Vec::with_capacity(capacity); count];
        Self {
            n_followers: n,
            v_star,
            times: Vec::with_capacity(capacity),
            head_speed: Vec::with_capacity(capacity),
            spacing: traces(n + 1),
            speed: traces(n + 1),
            accel: traces(n + 1),
            cbf: traces(n + 1),
            slack: traces(n),
            u_nominal: Vec::with_capacity(capacity),
            u_command: Vec::with_capacity(capacity),
            estimate: observer.then(|| traces(2 * n + 2)),
            error_bound: observer.then(|| Vec::with_capacity(capacity)),
            events: Vec::new(),
            robust_initial_ok: None,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Vehicles with a collision event.
    pub fn collided(&self) -> Vec<usize> {
        self.events
            .iter()
            .filter_map(|e| match e {
                Event::Collision { vehicle, .. } => Some(*vehicle),
                _ => None,
            })
            .collect()
    }

    pub fn min_spacing(&self, i: usize) -> f64 {
        self.spacing[i]
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Chain dynamics as integrated: follower laws, forced accelerations and
/// saturation.
struct Dynamics<'a> {
    cfg: &'a ChainConfig,
    spec: &'a ScenarioSpec,
    settings: &'a SimSettings,
    coeffs: LinearCoeffs,
}

impl Dynamics<'_> {
    /// `(unsaturated, applied)` acceleration of follower `i`.
    fn follower_accel(&self, t: f64, i: usize, s: f64, s_dot: f64, v: f64) -> (f64, f64) {
        let eq = &self.cfg.equilibrium;
        let raw = self
            .spec
            .forced_accel(t, i)
            .unwrap_or_else(|| match self.settings.plant {
                PlantModel::Nonlinear => ovm_accel(s, s_dot, v, &self.cfg.hdv),
                PlantModel::Linear => {
                    let c = &self.coeffs;
                    c.a1 * (s - eq.s_star_hdv) - c.a2 * (v - eq.v_star)
                        + c.a3 * (v + s_dot - eq.v_star)
                }
            });
        (raw, self.clip(raw))
    }

    fn clip(&self, a: f64) -> f64 {
        if self.settings.saturate {
            saturate(a, self.settings.a_min, self.settings.a_max)
        } else {
            a
        }
    }

    fn head(&self, t: f64) -> f64 {
        head_speed(t, self.spec, self.cfg.equilibrium.v_star).0
    }

    fn derivative(&self, t: f64, x: &ChainState, u: f64) -> DVector<f64> {
        let r = self.head(t);
        derivative_with(x, r, u, |i, s, s_dot, v| {
            self.follower_accel(t, i, s, s_dot, v).1
        })
    }
}

fn rk4<F>(f: F, t: f64, z: &DVector<f64>, dt: f64) -> Result<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = f(t, z)?;
    let k2 = f(t + 0.5 * dt, &(z + &k1 * (0.5 * dt)))?;
    let k3 = f(t + 0.5 * dt, &(z + &k2 * (0.5 * dt)))?;
    let k4 = f(t + dt, &(z + &k3 * dt))?;
    Ok(z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

struct ObserverState {
    cfg: ObserverConfig,
    x_hat: DVector<f64>,
    bound: ErrorBound,
    mode: RobustMode,
    speed_box: RelSpeedBox,
}

/// Run one closed-loop simulation.
pub fn simulate(
    cfg: &ChainConfig,
    spec: &ScenarioSpec,
    settings: &SimSettings,
) -> Result<SimRecord> {
    let n = cfg.n_followers;
    cfg.validate_structure()?;
    settings.validate(n)?;
    spec.validate(n)?;
    let eq = cfg.equilibrium;
    let coeffs = linearize(&cfg.hdv, eq.s_star_hdv);
    let sys = build_linear_system(n, &coeffs)?;
    let constraint_plant = match settings.drift_model {
        DriftModel::Linear => Plant::Linear {
            sys: sys.clone(),
            eq,
        },
        DriftModel::Nonlinear => Plant::Nonlinear { hdv: vec![cfg.hdv] },
    };
    let dyns = Dynamics {
        cfg,
        spec,
        settings,
        coeffs,
    };
    let mut x = cfg.initial_state();
    let speed_box = RelSpeedBox::symmetric(settings.speed_box.unwrap_or(cfg.hdv.v_max));

    let mut obs = if settings.controller.uses_observer() {
        let ocfg = match &cfg.observer {
            Some(o) => ObserverConfig::from_gain(&sys, o.l.clone()).map(|mut v| {
                v.source = o.source;
                v
            })?,
            None => design_gain(&sys, 1.0, 1.0)?,
        };
        let offset = settings
            .estimate_offset
            .as_ref()
            .map(|o| DVector::from_column_slice(o))
            .unwrap_or_else(|| DVector::zeros(2 * n + 2));
        let x_hat = x.perturbation(&eq) + &offset;
        let radius = settings.error_radius.unwrap_or_else(|| offset.norm());
        let bound = ErrorBound {
            m0: ocfg.m0_factor * radius,
            lambda_rate: ocfg.lambda_rate,
        };
        let mode = match (settings.controller, settings.robust_clamped) {
            (ControllerKind::StcObserverNaive, _) => RobustMode::Naive,
            (_, true) => RobustMode::Clamped,
            _ => RobustMode::Robust,
        };
        Some(ObserverState {
            cfg: ocfg,
            x_hat,
            bound,
            mode,
            speed_box,
        })
    } else {
        None
    };

    let steps = settings.steps();
    let dt = settings.dt;
    let mut rec = SimRecord::new(n, eq.v_star, steps + 1, obs.is_some());
    if let Some(o) = &obs {
        let r0 = dyns.head(0.0);
        let x_hat0 = ChainState::from_perturbation(&o.x_hat, &eq);
        rec.robust_initial_ok = Some(robust_set_contains(
            &x_hat0,
            r0,
            &cfg.filter,
            &o.bound,
            0.0,
            &o.speed_box,
        ));
    }
    let mut warm: Vec<usize> = Vec::new();
    let mut sat_open: Vec<Option<f64>> = vec![None; n + 1];
    let mut qp_events = Vec::new();
    let mut sat_events = Vec::new();
    let hold = settings.hold_steps();
    let mut held = (0.0, 0.0, vec![0.0; n]);

    for k in 0..=steps {
        let t = k as f64 * dt;
        let r = dyns.head(t);
        let dr = r - eq.v_star;
        let r_dot = settings
            .head_accel_known
            .then(|| head_speed(t, spec, eq.v_star).1);

        // controller
        if k % hold == 0 {
            held = match settings.controller {
                ControllerKind::Nominal => {
                    let u0 = lcc_control(&x.perturbation(&eq), dr, &coeffs, &cfg.gains)?;
                    (u0, u0, vec![0.0; n])
                }
                ControllerKind::Stc => {
                    let u0 = lcc_control(&x.perturbation(&eq), dr, &coeffs, &cfg.gains)?;
                    let sol =
                        stc_control_warm(&x, r, r_dot, u0, &cfg.filter, &constraint_plant, &warm)?;
                    if sol.qp_status == FilterStatus::Infeasible {
                        qp_events.push(Event::QpInfeasible {
                            time: t,
                            fallback: sol.fallback,
                        });
                    }
                    warm = sol.qp_active;
                    (u0, sol.u, sol.sigma)
                }
                ControllerKind::StcObserverNaive | ControllerKind::StcObserverRobust => {
                    let o = obs
                        .as_ref()
                        .expect("observer initialized for observer modes");
                    let u0 = lcc_control(&o.x_hat, dr, &coeffs, &cfg.gains)?;
                    let y = &sys.c * x.perturbation(&eq);
                    let x_hat_abs = ChainState::from_perturbation(&o.x_hat, &eq);
                    let ctx = RobustContext {
                        sys: &sys,
                        eq: &eq,
                        cfg: &o.cfg,
                        bound: &o.bound,
                        speed_box: o.speed_box,
                        mode: o.mode,
                        head_accel: r_dot,
                    };
                    let sol =
                        robust_stc_control(&x_hat_abs, r, &y, u0, &cfg.filter, &ctx, t, &warm)?;
                    if sol.qp_status == FilterStatus::Infeasible {
                        qp_events.push(Event::QpInfeasible {
                            time: t,
                            fallback: sol.fallback,
                        });
                    }
                    warm = sol.qp_active;
                    (u0, sol.u, sol.sigma)
                }
            };
        }
        let (u0, u_cmd) = (held.0, held.1);
        let sigma = &held.2;
        let u = dyns.clip(u_cmd);

        // record
        rec.times.push(t);
        rec.head_speed.push(r);
        rec.u_nominal.push(u0);
        rec.u_command.push(u_cmd);
        let mut clipped = vec![u != u_cmd];
        rec.accel[0].push(u);
        for i in 0..=n {
            rec.spacing[i].push(x.s(i));
            rec.speed[i].push(x.v(i));
            rec.cbf[i].push(cbf_value(&cfg.filter.policy, i, &x, r));
            if i > 0 {
                let v_pred = x.predecessor_speed(i, r);
                let (raw, applied) = dyns.follower_accel(t, i, x.s(i), v_pred - x.v(i), x.v(i));
                rec.accel[i].push(applied);
                clipped.push(raw != applied);
            }
        }
        for (i, s) in sigma.iter().enumerate() {
            rec.slack[i].push(*s);
        }
        if let Some(o) = &obs {
            let est = rec.estimate.as_mut().expect("estimate traces allocated");
            for (j, trace) in est.iter_mut().enumerate() {
                trace.push(o.x_hat[j] + eq.state_component(j));
            }
            rec.error_bound
                .as_mut()
                .expect("bound trace allocated")
                .push(error_bound_at(t, &o.bound).0);
        }
        for (i, &c) in clipped.iter().enumerate() {
            match (c, sat_open[i]) {
                (true, None) => sat_open[i] = Some(t),
                (false, Some(start)) => {
                    sat_events.push(Event::Saturation {
                        vehicle: i,
                        start,
                        end: t,
                    });
                    sat_open[i] = None;
                }
                _ => {}
            }
        }

        if k == steps {
            break;
        }

        // integrate
        match obs.as_mut() {
            None => {
                let next = rk4(
                    |ts, z| Ok(dyns.derivative(ts, &ChainState(z.clone()), u)),
                    t,
                    &x.0,
                    dt,
                )?;
                x = ChainState(next);
            }
            Some(o) => {
                let nx = x.len();
                let mut z = DVector::zeros(2 * nx);
                z.rows_mut(0, nx).copy_from(&x.0);
                z.rows_mut(nx, nx).copy_from(&o.x_hat);
                let ocfg = &o.cfg;
                let next = rk4(
                    |ts, z| {
                        let xs = ChainState(z.rows(0, nx).into_owned());
                        let x_hat = z.rows(nx, nx).into_owned();
                        let dx = dyns.derivative(ts, &xs, u);
                        let y = &sys.c * xs.perturbation(&eq);
                        let dr = dyns.head(ts) - eq.v_star;
                        let dxh = observer_derivative(&x_hat, u, &y, dr, &sys, ocfg)?;
                        let mut out = DVector::zeros(2 * nx);
                        out.rows_mut(0, nx).copy_from(&dx);
                        out.rows_mut(nx, nx).copy_from(&dxh);
                        Ok(out)
                    },
                    t,
                    &z,
                    dt,
                )?;
                x = ChainState(next.rows(0, nx).into_owned());
                o.x_hat = next.rows(nx, nx).into_owned();
            }
        }
        let t_next = (k + 1) as f64 * dt;
        if let Some(j) = x.0.iter().position(|v| !v.is_finite()) {
            return Err(StcError::NonFinite {
                time: t_next,
                detail: format!("state component {j}"),
            });
        }
        if let Some(o) = &obs {
            if let Some(j) = o.x_hat.iter().position(|v| !v.is_finite()) {
                return Err(StcError::NonFinite {
                    time: t_next,
                    detail: format!("estimate component {j}"),
                });
            }
        }
    }

    let t_last = rec.times.last().copied().unwrap_or(0.0);
    for (i, open) in sat_open.iter().enumerate() {
        if let Some(start) = open {
            sat_events.push(Event::Saturation {
                vehicle: i,
                start: *start,
                end: t_last,
            });
        }
    }
    let mut events = collision_events(&rec);
    events.append(&mut qp_events);
    events.append(&mut sat_events);
    events.sort_by(|a, b| a.time().total_cmp(&b.time()));
    rec.events = events;
    Ok(rec)
}

/// First zero crossing of each spacing trace, linearly interpolated.
fn collision_events(rec: &SimRecord) -> Vec<Event> {
    let mut out = Vec::new();
    for (i, s) in rec.spacing.iter().enumerate() {
        if let Some(k) = s.iter().position(|v| *v <= 0.0) {
            let time = if k == 0 {
                rec.times[0]
            } else {
                let (s0, s1) = (s[k - 1], s[k]);
                let (t0, t1) = (rec.times[k - 1], rec.times[k]);
                t0 + (t1 - t0) * s0 / (s0 - s1)
            };
            out.push(Event::Collision { vehicle: i, time });
        }
    }
    out
}

/// Linear model used by the controllers for this configuration.
pub fn linear_model(cfg: &ChainConfig) -> Result<LinearSystem> {
    build_linear_system(
        cfg.n_followers,
        &linearize(&cfg.hdv, cfg.equilibrium.s_star_hdv),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(controller: ControllerKind) -> SimSettings {
        SimSettings {
            t_end: 12.0,
            controller,
            saturate: false,
            ..SimSettings::default()
        }
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let cfg = ChainConfig::table1();
        let spec = ScenarioSpec::scenario2(0.0, 0.0);
        let rec = simulate(&cfg, &spec, &quick(ControllerKind::Stc)).unwrap();
        for i in 0..=2 {
            assert!(rec.spacing[i].iter().all(|s| (s - 20.0).abs() < 1e-9));
            assert!(rec.speed[i].iter().all(|v| (v - 20.0).abs() < 1e-9));
        }
        assert!(rec.events.is_empty());
    }

    #[test]
    fn nominal_collides_in_scenario1() {
        let cfg = ChainConfig::table1();
        let rec = simulate(
            &cfg,
            &ScenarioSpec::table_scenario1(),
            &quick(ControllerKind::Nominal),
        )
        .unwrap();
        assert!(rec.min_spacing(0) < 0.0);
        assert!(rec.collided().contains(&0));
    }

    #[test]
    fn deterministic() {
        let cfg = ChainConfig::table1();
        let spec = ScenarioSpec::table_scenario1();
        let a = simulate(&cfg, &spec, &quick(ControllerKind::Stc)).unwrap();
        let b = simulate(&cfg, &spec, &quick(ControllerKind::Stc)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn collision_time_interpolated() {
        let mut rec = SimRecord::new(0, 20.0, 3, false);
        rec.times = vec![0.0, 1.0, 2.0];
        rec.spacing = vec![vec![2.0, 1.0, -1.0]];
        assert_eq!(
            collision_events(&rec),
            vec![Event::Collision {
                vehicle: 0,
                time: 1.5
            }]
        );
    }

    #[test]
    fn settings_validation() {
        let mut s = SimSettings::default();
        assert!(s.validate(2).is_ok());
        s.dt = 0.0;
        s.a_min = 1.0;
        match s.validate(2) {
            Err(StcError::Config(errs)) => assert_eq!(errs.len(), 2),
            other => panic!("{other:?}"),
        }
        assert_eq!(
            "obs-robust".parse::<ControllerKind>().unwrap(),
            ControllerKind::StcObserverRobust
        );
    }
}
