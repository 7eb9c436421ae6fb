//! File ingestion and export.
//!
//! Floats are written with Rust's `Display`, which yields the shortest
//! decimal that round-trips, so identical inputs give identical bytes.
//!
//! Record CSV columns, in order: `time, head_speed, s_0..s_N, v_0..v_N,
//! a_0..a_N, h_0..h_N, sigma_1..sigma_N, u_nominal, u_command`, then
//! `xhat_0..xhat_{2N+1}, error_bound` for observer runs.
//!
//! Sweep CSV columns: `accel, speed, duration, chain_safe, safe_0..safe_N,
//! min_s_0..min_s_N, diagnostic`.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::ChainConfig;
use crate::error::{Result, StcError};
use crate::nominal::StabilityReport;
use crate::sim::{safety_metrics, HeadTrace, SimRecord, SweepResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = StcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(StcError::InvalidParameter(format!(
                "unknown format '{other}' (csv, json)"
            ))),
        }
    }
}

/// Read a head speed trace from a CSV file with a header row.
///
/// Rows repeating the previous timestamp are dropped. A timestamp earlier
/// than its predecessor is an error naming the file line.
pub fn load_head_trace(path: &Path, time_col: &str, speed_col: &str) -> Result<HeadTrace> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let (ti, vi) = match (find(time_col), find(speed_col)) {
        (Some(t), Some(v)) => (t, v),
        (t, v) => {
            let mut errs = Vec::new();
            if t.is_none() {
                errs.push(format!("time column '{time_col}' not found"));
            }
            if v.is_none() {
                errs.push(format!("speed column '{speed_col}' not found"));
            }
            return Err(StcError::Parse(errs));
        }
    };

    let mut errs = Vec::new();
    let (mut times, mut speeds) = (Vec::new(), Vec::new());
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let cell = |idx: usize, name: &str| -> std::result::Result<f64, String> {
            let raw = row.get(idx).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("line {line}: {name} '{raw}' is not a number"))
        };
        let (t, v) = match (cell(ti, time_col), cell(vi, speed_col)) {
            (Ok(t), Ok(v)) => (t, v),
            (a, b) => {
                errs.extend(a.err());
                errs.extend(b.err());
                continue;
            }
        };
        if v < 0.0 {
            errs.push(format!("line {line}: speed {v} is negative"));
            continue;
        }
        match times.last() {
            Some(&prev) if t < prev => {
                errs.push(format!(
                    "line {line}: time {t} goes backwards (previous {prev})"
                ));
                continue;
            }
            Some(&prev) if t == prev => continue,
            _ => {}
        }
        times.push(t);
        speeds.push(v);
    }
    if times.is_empty() && errs.is_empty() {
        errs.push("trace has no samples".into());
    }
    if !errs.is_empty() {
        return Err(StcError::Parse(errs));
    }
    HeadTrace::new(times, speeds, path.display().to_string())
}

/// Synthetic harsh-braking head profile: cruise, brake, hold the low speed,
/// recover at the same rate, cruise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarshBrake {
    pub v_cruise: f64,
    pub cruise_time: f64,
    pub decel: f64,
    pub brake_time: f64,
    #[serde(default)]
    pub dwell_time: f64,
    pub total_time: f64,
    pub sample_dt: f64,
}

impl Default for HarshBrake {
    fn default() -> Self {
        Self {
            v_cruise: 8.0,
            cruise_time: 5.0,
            decel: 6.0,
            brake_time: 1.0,
            dwell_time: 0.0,
            total_time: 30.0,
            sample_dt: 0.1,
        }
    }
}

impl HarshBrake {
    /// Braking to a standstill at 4 s and waiting 6 s before recovering.
    pub fn stop_and_wait() -> Self {
        let d = Self::default();
        Self {
            cruise_time: 4.0,
            brake_time: d.v_cruise / d.decel,
            dwell_time: 6.0,
            ..d
        }
    }

    pub fn speed_at(&self, t: f64) -> f64 {
        let low = (self.v_cruise - self.decel * self.brake_time).max(0.0);
        let drop = self.v_cruise - low;
        let ramp = if self.decel > 0.0 {
            drop / self.decel
        } else {
            0.0
        };
        let t1 = self.cruise_time;
        let t2 = t1 + ramp;
        let t3 = t2 + self.dwell_time;
        let t4 = t3 + ramp;
        if t < t1 {
            self.v_cruise
        } else if t < t2 {
            self.v_cruise - self.decel * (t - t1)
        } else if t < t3 {
            low
        } else if t < t4 {
            low + self.decel * (t - t3)
        } else {
            self.v_cruise
        }
    }

    pub fn trace(&self) -> Result<HeadTrace> {
        if !(self.sample_dt > 0.0
            && self.total_time > 0.0
            && self.v_cruise >= 0.0
            && self.decel >= 0.0)
        {
            return Err(StcError::InvalidParameter(
                "harsh-brake trace needs sample_dt, total_time > 0 and v_cruise, decel >= 0".into(),
            ));
        }
        let n = (self.total_time / self.sample_dt).round() as usize;
        let times: Vec<f64> = (0..=n).map(|k| k as f64 * self.sample_dt).collect();
        let speeds = times.iter().map(|&t| self.speed_at(t)).collect();
        HeadTrace::new(times, speeds, "harsh-brake")
    }
}

pub fn write_head_trace(trace: &HeadTrace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "v"])?;
    for (t, v) in trace.times.iter().zip(&trace.speeds) {
        w.write_record([t.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Something with a CSV table and a JSON summary.
pub trait Export {
    fn write_csv<W: Write>(&self, out: W) -> Result<()>;
    fn json_summary(&self) -> Value;
}

pub fn export<T: Export>(item: &T, path: &Path, format: Format) -> Result<()> {
    let file = File::create(path)?;
    match format {
        Format::Csv => item.write_csv(file),
        Format::Json => {
            let mut w = std::io::BufWriter::new(file);
            serde_json::to_writer_pretty(&mut w, &item.json_summary())?;
            writeln!(w)?;
            Ok(())
        }
    }
}

fn indexed(prefix: &str, range: std::ops::Range<usize>) -> impl Iterator<Item = String> + '_ {
    range.map(move |i| format!("{prefix}_{i}"))
}

pub fn record_header(rec: &SimRecord) -> Vec<String> {
    let n = rec.n_followers;
    let mut h = vec!["time".to_string(), "head_speed".to_string()];
    for p in ["s", "v", "a", "h"] {
        h.extend(indexed(p, 0..n + 1));
    }
    h.extend(indexed("sigma", 1..n + 1));
    h.push("u_nominal".into());
    h.push("u_command".into());
    if let Some(est) = &rec.estimate {
        h.extend(indexed("xhat", 0..est.len()));
        h.push("error_bound".into());
    }
    h
}

impl Export for SimRecord {
    fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(record_header(self))?;
        for k in 0..self.len() {
            let mut row = vec![self.times[k], self.head_speed[k]];
            for traces in [
                &self.spacing,
                &self.speed,
                &self.accel,
                &self.cbf,
                &self.slack,
            ] {
                row.extend(traces.iter().map(|tr| tr[k]));
            }
            row.push(self.u_nominal[k]);
            row.push(self.u_command[k]);
            if let (Some(est), Some(bound)) = (&self.estimate, &self.error_bound) {
                row.extend(est.iter().map(|tr| tr[k]));
                row.push(bound[k]);
            }
            w.write_record(row.iter().map(f64::to_string))?;
        }
        w.flush()?;
        Ok(())
    }

    fn json_summary(&self) -> Value {
        json!({
            "n_followers": self.n_followers,
            "v_star": self.v_star,
            "samples": self.len(),
            "metrics": safety_metrics(self),
            "events": self.events,
            "robust_initial_ok": self.robust_initial_ok,
        })
    }
}

pub const SWEEP_FIXED_HEADER: [&str; 4] = ["accel", "speed", "duration", "chain_safe"];

pub fn sweep_header(n_vehicles: usize) -> Vec<String> {
    let mut h: Vec<String> = SWEEP_FIXED_HEADER.iter().map(|s| s.to_string()).collect();
    h.extend(indexed("safe", 0..n_vehicles));
    h.extend(indexed("min_s", 0..n_vehicles));
    h.push("diagnostic".into());
    h
}

impl Export for SweepResult {
    fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let nv = self.cells.first().map_or(0, |c| c.safe.len());
        w.write_record(sweep_header(nv))?;
        for c in &self.cells {
            let mut row = vec![
                c.accel.to_string(),
                c.speed.to_string(),
                c.duration.to_string(),
            ];
            row.push(c.chain_safe.to_string());
            row.extend(c.safe.iter().map(bool::to_string));
            row.extend(c.min_spacing.iter().map(f64::to_string));
            row.push(c.diagnostic.clone().unwrap_or_default());
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    fn json_summary(&self) -> Value {
        let ranges: Vec<Value> = self
            .accel_grid
            .iter()
            .zip(&self.ranges)
            .map(|(a, r)| json!({ "accel": a, "vehicles": &r[..r.len() - 1], "chain": r.last() }))
            .collect();
        json!({
            "kind": self.kind,
            "accel_grid": self.accel_grid,
            "speed_grid": self.speed_grid,
            "ranges": ranges,
        })
    }
}

impl Export for StabilityReport {
    fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["omega", "gain"])?;
        for (o, g) in self.grid.iter().zip(&self.gains) {
            w.write_record([o.to_string(), g.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    fn json_summary(&self) -> Value {
        json!({
            "max_gain": self.max_gain,
            "argmax_omega": self.argmax_omega,
            "string_stable": self.string_stable,
            "closed_loop_abscissa": self.closed_loop_abscissa,
            "singular_samples": self.singular_samples,
            "samples": self.grid.len(),
        })
    }
}

/// Parse an inclusive `start:stop:step` grid.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || {
        StcError::InvalidParameter(format!(
            "grid '{spec}' is not start:stop:step with step > 0"
        ))
    };
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    let [start, stop, step] = parts[..] else {
        return Err(bad());
    };
    if !(step > 0.0 && stop >= start && start.is_finite() && stop.is_finite()) {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| start + k as f64 * step).collect())
}

pub fn save_config(cfg: &ChainConfig, path: &Path) -> Result<()> {
    std::fs::write(path, cfg.to_json()? + "\n")?;
    Ok(())
}
