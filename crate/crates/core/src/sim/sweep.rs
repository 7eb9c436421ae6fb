use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{simulate, ScenarioKind, ScenarioSpec, SimSettings};
use crate::config::ChainConfig;
use crate::error::{Result, StcError};

/// Extra simulated time after the disturbance ends.
const SETTLE_TIME: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub accel: f64,
    /// Extreme speed of the disturbed vehicle: `v_{-1,min}` or `v_{2,max}`.
    pub speed: f64,
    /// Derived disturbance duration `t_H` or `t_F`.
    pub duration: f64,
    /// `s_i(t) >= 0` throughout, per vehicle.
    pub safe: Vec<bool>,
    pub chain_safe: bool,
    pub min_spacing: Vec<f64>,
    #[serde(default)]
    pub diagnostic: Option<String>,
}

/// Smallest and largest safe grid speed for one acceleration value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafeRange {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: ScenarioKind,
    pub accel_grid: Vec<f64>,
    pub speed_grid: Vec<f64>,
    /// Row-major: all speeds for the first acceleration, then the next.
    pub cells: Vec<SweepCell>,
    /// `[accel][vehicle]` ranges, with the whole chain in the last column.
    pub ranges: Vec<Vec<Option<SafeRange>>>,
}

impl SweepResult {
    pub fn cell(&self, ai: usize, si: usize) -> &SweepCell {
        &self.cells[ai * self.speed_grid.len() + si]
    }

    /// Safety of `vehicle` in a cell; `None` selects the whole chain.
    pub fn is_safe(&self, ai: usize, si: usize, vehicle: Option<usize>) -> bool {
        let c = self.cell(ai, si);
        match vehicle {
            Some(i) => c.safe[i],
            None => c.chain_safe,
        }
    }

    /// Every speed on the grid is safe for `vehicle` at acceleration `ai`.
    pub fn covers_grid(&self, ai: usize, vehicle: Option<usize>) -> bool {
        (0..self.speed_grid.len()).all(|si| self.is_safe(ai, si, vehicle))
    }

    /// Number of safe cells for `vehicle` at acceleration `ai`.
    pub fn safe_count(&self, ai: usize, vehicle: Option<usize>) -> usize {
        (0..self.speed_grid.len())
            .filter(|&si| self.is_safe(ai, si, vehicle))
            .count()
    }
}

/// Classify safety over a grid of disturbance accelerations and extreme
/// speeds. Each cell derives its duration from `v_{-1,min} = v* - a_H t_H`
/// (scenario 1) or `v_{2,max} = v* + a_F t_F` (scenario 2).
pub fn sweep_safe_range(
    cfg: &ChainConfig,
    kind: ScenarioKind,
    accel_grid: &[f64],
    speed_grid: &[f64],
    settings: &SimSettings,
) -> Result<SweepResult> {
    let vs = cfg.equilibrium.v_star;
    let mut errs = Vec::new();
    if accel_grid.is_empty() || speed_grid.is_empty() {
        errs.push("sweep grids must be nonempty".to_string());
    }
    if accel_grid.iter().any(|a| !(*a > 0.0)) {
        errs.push("sweep accelerations must be > 0".to_string());
    }
    match kind {
        ScenarioKind::Scenario1 => {
            if speed_grid.iter().any(|v| !(0.0..=vs).contains(v)) {
                errs.push(format!("scenario1 speeds must lie in [0, {vs}]"));
            }
        }
        ScenarioKind::Scenario2 => {
            if speed_grid.iter().any(|v| !(vs..=cfg.hdv.v_max).contains(v)) {
                errs.push(format!(
                    "scenario2 speeds must lie in [{vs}, {}]",
                    cfg.hdv.v_max
                ));
            }
        }
        ScenarioKind::Replay => {
            errs.push("sweeps support scenario1 and scenario2 only".to_string())
        }
    }
    if !errs.is_empty() {
        return Err(StcError::Config(errs));
    }
    let n = cfg.n_followers;
    let grid: Vec<(f64, f64)> = accel_grid
        .iter()
        .flat_map(|&a| speed_grid.iter().map(move |&v| (a, v)))
        .collect();

    let cells: Vec<SweepCell> = grid
        .par_iter()
        .map(|&(accel, speed)| {
            let duration = (speed - vs).abs() / accel;
            let (spec, t_end) = match kind {
                ScenarioKind::Scenario1 => (
                    ScenarioSpec::scenario1(accel, duration),
                    2.0 * duration + SETTLE_TIME,
                ),
                _ => (
                    ScenarioSpec::scenario2(accel, duration),
                    duration + SETTLE_TIME,
                ),
            };
            let run = SimSettings {
                t_end: settings.t_end.max(t_end),
                ..settings.clone()
            };
            match simulate(cfg, &spec, &run) {
                Ok(rec) => {
                    let min_spacing: Vec<f64> = (0..=n).map(|i| rec.min_spacing(i)).collect();
                    let safe: Vec<bool> = min_spacing.iter().map(|s| *s >= 0.0).collect();
                    SweepCell {
                        accel,
                        speed,
                        duration,
                        chain_safe: safe.iter().all(|s| *s),
                        safe,
                        min_spacing,
                        diagnostic: None,
                    }
                }
                Err(e) => SweepCell {
                    accel,
                    speed,
                    duration,
                    safe: vec![false; n + 1],
                    chain_safe: false,
                    min_spacing: vec![f64::NAN; n + 1],
                    diagnostic: Some(e.to_string()),
                },
            }
        })
        .collect();

    let ns = speed_grid.len();
    let ranges = (0..accel_grid.len())
        .map(|ai| {
            let row = &cells[ai * ns..(ai + 1) * ns];
            (0..=n + 1)
                .map(|col| {
                    let safe_speeds = row
                        .iter()
                        .filter(|c| if col <= n { c.safe[col] } else { c.chain_safe })
                        .map(|c| c.speed);
                    safe_speeds.fold(None, |acc: Option<SafeRange>, v| {
                        Some(match acc {
                            None => SafeRange { lo: v, hi: v },
                            Some(r) => SafeRange {
                                lo: r.lo.min(v),
                                hi: r.hi.max(v),
                            },
                        })
                    })
                })
                .collect()
        })
        .collect();

    Ok(SweepResult {
        kind,
        accel_grid: accel_grid.to_vec(),
        speed_grid: speed_grid.to_vec(),
        cells,
        ranges,
    })
}
