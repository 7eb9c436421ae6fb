use serde::{Deserialize, Serialize};

use crate::error::{Result, StcError};
use crate::model::{ovm_accel, OvmParams};

/// Sampled head-vehicle speed profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTrace {
    pub times: Vec<f64>,
    pub speeds: Vec<f64>,
    #[serde(default)]
    pub label: String,
}

impl HeadTrace {
    pub fn new(times: Vec<f64>, speeds: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        let trace = Self {
            times,
            speeds,
            label: label.into(),
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.times.len() != self.speeds.len() {
            errs.push(format!(
                "trace has {} times but {} speeds",
                self.times.len(),
                self.speeds.len()
            ));
        }
        if self.times.is_empty() {
            errs.push("trace is empty".into());
        }
        for (k, w) in self.times.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                errs.push(format!("sample {}: time {} does not increase", k + 1, w[1]));
            }
        }
        for (k, v) in self.speeds.iter().enumerate() {
            if !(v.is_finite() && *v >= 0.0) {
                errs.push(format!("sample {k}: speed {v} is negative or not finite"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(StcError::Parse(errs))
        }
    }

    /// Linear interpolation; the end values are held outside the sampled
    /// range.
    pub fn sample(&self, t: f64) -> (f64, f64) {
        let n = self.times.len();
        if t <= self.times[0] {
            return (self.speeds[0], 0.0);
        }
        if t >= self.times[n - 1] {
            return (self.speeds[n - 1], 0.0);
        }
        let k = self.times.partition_point(|&ti| ti <= t) - 1;
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let (v0, v1) = (self.speeds[k], self.speeds[k + 1]);
        let slope = (v1 - v0) / (t1 - t0);
        (v0 + slope * (t - t0), slope)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Head vehicle brakes at `a_h` for `t_h`, then recovers at the same
    /// rate.
    Scenario1,
    /// Head cruises; the tail follower is forced to accelerate at `a_f` for
    /// `t_f`.
    Scenario2,
    /// Head speed follows a recorded trace.
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub a_h: f64,
    pub t_h: f64,
    pub a_f: f64,
    pub t_f: f64,
    #[serde(default)]
    pub head_profile: Option<HeadTrace>,
}

/// Index of the follower forced in scenario 2.
pub const FORCED_FOLLOWER: usize = 2;

impl ScenarioSpec {
    pub fn scenario1(a_h: f64, t_h: f64) -> Self {
        Self {
            kind: ScenarioKind::Scenario1,
            a_h,
            t_h,
            a_f: 0.0,
            t_f: 0.0,
            head_profile: None,
        }
    }

    pub fn scenario2(a_f: f64, t_f: f64) -> Self {
        Self {
            kind: ScenarioKind::Scenario2,
            a_h: 0.0,
            t_h: 0.0,
            a_f,
            t_f,
            head_profile: None,
        }
    }

    pub fn replay(trace: HeadTrace) -> Self {
        Self {
            kind: ScenarioKind::Replay,
            a_h: 0.0,
            t_h: 0.0,
            a_f: 0.0,
            t_f: 0.0,
            head_profile: Some(trace),
        }
    }

    /// Table values: braking at 6 m/s^2 for 3.3 s.
    pub fn table_scenario1() -> Self {
        Self::scenario1(6.0, 3.3)
    }

    /// Table values: tail follower accelerating at 6 m/s^2 for 2.5 s.
    pub fn table_scenario2() -> Self {
        Self::scenario2(6.0, 2.5)
    }

    pub fn validate(&self, n_followers: usize) -> Result<()> {
        let mut errs = Vec::new();
        match self.kind {
            ScenarioKind::Scenario1 => {
                if !(self.a_h >= 0.0 && self.t_h >= 0.0) {
                    errs.push(format!(
                        "scenario1 needs a_h, t_h >= 0 (got {}, {})",
                        self.a_h, self.t_h
                    ));
                }
            }
            ScenarioKind::Scenario2 => {
                if !(self.a_f >= 0.0 && self.t_f >= 0.0) {
                    errs.push(format!(
                        "scenario2 needs a_f, t_f >= 0 (got {}, {})",
                        self.a_f, self.t_f
                    ));
                }
                if n_followers < FORCED_FOLLOWER {
                    errs.push(format!(
                        "scenario2 needs at least {FORCED_FOLLOWER} followers"
                    ));
                }
            }
            ScenarioKind::Replay => match &self.head_profile {
                None => errs.push("replay scenario needs a head_profile".into()),
                Some(trace) => {
                    if let Err(StcError::Parse(mut e)) = trace.validate() {
                        errs.append(&mut e);
                    }
                }
            },
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(StcError::Config(errs))
        }
    }

    /// Forced acceleration of follower `i` at time `t`, if any.
    pub fn forced_accel(&self, t: f64, i: usize) -> Option<f64> {
        (self.kind == ScenarioKind::Scenario2 && i == FORCED_FOLLOWER && t < self.t_f)
            .then_some(self.a_f)
    }
}

/// Head speed and acceleration at time `t`.
pub fn head_speed(t: f64, spec: &ScenarioSpec, v_star: f64) -> (f64, f64) {
    match spec.kind {
        ScenarioKind::Scenario1 => {
            let (a, th) = (spec.a_h, spec.t_h);
            if t < th {
                (v_star - a * t, -a)
            } else if t < 2.0 * th {
                (v_star - a * th + a * (t - th), a)
            } else {
                (v_star, 0.0)
            }
        }
        ScenarioKind::Scenario2 => (v_star, 0.0),
        ScenarioKind::Replay => match &spec.head_profile {
            Some(trace) => trace.sample(t),
            None => (v_star, 0.0),
        },
    }
}

/// Acceleration of the tail follower: forced before `t_f` in scenario 2,
/// OVM otherwise.
pub fn fhdv2_accel(t: f64, s: f64, s_dot: f64, v: f64, spec: &ScenarioSpec, p: &OvmParams) -> f64 {
    spec.forced_accel(t, FORCED_FOLLOWER)
        .unwrap_or_else(|| ovm_accel(s, s_dot, v, p))
}

pub fn saturate(u: f64, lo: f64, hi: f64) -> f64 {
    u.clamp(lo, hi)
}
