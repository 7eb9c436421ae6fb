//! Chain configuration: presets, JSON loading and cross-field validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, StcError};
use crate::model::{equilibrium_spacing, ChainState, Equilibrium, OvmParams};
use crate::nominal::LccGains;
use crate::observer::ObserverConfig;
use crate::safety::{FilterParams, PolicyKind, SpacingPolicy};
use crate::sim::SimSettings;

/// Allowed gap between the stated HDV equilibrium spacing and the one
/// implied by the range policy.
pub const EQUILIBRIUM_TOL: f64 = 0.2;

pub const PRESETS: [&str; 2] = ["table1", "table3-ngsim"];

/// Initial CAV spacing and speed, replacing the equilibrium values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InitialOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    #[serde(default)]
    pub preset: Option<String>,
    pub n_followers: usize,
    pub hdv: OvmParams,
    pub equilibrium: Equilibrium,
    pub gains: LccGains,
    pub filter: FilterParams,
    pub sim: SimSettings,
    #[serde(default)]
    pub observer: Option<ObserverConfig>,
    #[serde(default)]
    pub initial: InitialOverrides,
    /// Skip the equilibrium consistency check.
    #[serde(default)]
    pub equilibrium_override: bool,
    /// Treat consistency warnings as errors.
    #[serde(default)]
    pub strict: bool,
}

const REQUIRED_KEYS: [&str; 6] = [
    "n_followers",
    "hdv",
    "equilibrium",
    "gains",
    "filter",
    "sim",
];

impl ChainConfig {
    /// Synthetic benchmark chain: one CAV and two human followers at 20 m/s.
    pub fn table1() -> Self {
        Self {
            preset: Some("table1".into()),
            n_followers: 2,
            hdv: OvmParams::table1(),
            equilibrium: Equilibrium {
                v_star: 20.0,
                s_star_hdv: 20.0,
                s_star_cav: 20.0,
            },
            gains: LccGains::table1(),
            filter: FilterParams::uniform(
                2,
                10.0,
                100.0,
                SpacingPolicy::new(PolicyKind::Sdh, 1.0, 7.0),
            ),
            sim: SimSettings::default(),
            observer: None,
            initial: InitialOverrides::default(),
            equilibrium_override: false,
            strict: false,
        }
    }

    /// Chain calibrated to recorded highway data, starting with a 50 m CAV
    /// gap.
    pub fn table3_ngsim() -> Self {
        Self {
            preset: Some("table3-ngsim".into()),
            n_followers: 2,
            hdv: OvmParams::ngsim(),
            equilibrium: Equilibrium {
                v_star: 8.0,
                s_star_hdv: 14.8,
                s_star_cav: 14.8,
            },
            gains: LccGains::table1(),
            filter: FilterParams::uniform(
                2,
                10.0,
                100.0,
                SpacingPolicy::new(PolicyKind::Sdh, 3.0, 7.0),
            ),
            sim: SimSettings::default(),
            observer: None,
            initial: InitialOverrides {
                s0: Some(50.0),
                v0: None,
            },
            equilibrium_override: false,
            strict: false,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "table1" => Some(Self::table1()),
            "table3-ngsim" => Some(Self::table3_ngsim()),
            _ => None,
        }
    }

    /// Dimension and range checks on every field, collected into one error.
    pub fn validate_structure(&self) -> Result<()> {
        let n = self.n_followers;
        let mut errs = Vec::new();
        if n == 0 {
            errs.push("n_followers must be >= 1".to_string());
        }
        let mut collect = |r: Result<()>| match r {
            Ok(()) => {}
            Err(StcError::Config(mut e)) => errs.append(&mut e),
            Err(other) => errs.push(other.to_string()),
        };
        collect(self.hdv.validate());
        collect(self.gains.validate(n));
        collect(self.filter.validate(n));
        collect(self.sim.validate(n));
        let eq = &self.equilibrium;
        if !(eq.v_star >= 0.0 && eq.s_star_hdv > 0.0 && eq.s_star_cav > 0.0) {
            errs.push(format!(
                "equilibrium needs v_star >= 0 and positive spacings (got {}, {}, {})",
                eq.v_star, eq.s_star_hdv, eq.s_star_cav
            ));
        }
        if let Some(o) = &self.observer {
            if o.l.shape() != (2 * n + 2, n + 2) {
                errs.push(format!(
                    "observer.L is {}x{}, expected {}x{}",
                    o.l.nrows(),
                    o.l.ncols(),
                    2 * n + 2,
                    n + 2
                ));
            }
        }
        if let Some(s0) = self.initial.s0 {
            if !s0.is_finite() {
                errs.push("initial.s0 must be finite".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(StcError::Config(errs))
        }
    }

    /// Soft consistency checks; returned as warnings, or as an error when
    /// `strict` is set.
    pub fn consistency_warnings(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if !self.equilibrium_override {
            let eq = &self.equilibrium;
            match equilibrium_spacing(eq.v_star, &self.hdv) {
                Ok(s) if (s - eq.s_star_hdv).abs() > EQUILIBRIUM_TOL => warnings.push(format!(
                    "equilibrium.s_star_hdv = {} differs from the range-policy spacing {s:.4} by more than {EQUILIBRIUM_TOL} m",
                    eq.s_star_hdv
                )),
                Ok(_) => {}
                Err(e) => warnings.push(format!("equilibrium speed has no spacing: {e}")),
            }
        }
        if self.strict && !warnings.is_empty() {
            return Err(StcError::Config(warnings));
        }
        Ok(warnings)
    }

    /// Full validation; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        self.validate_structure()?;
        self.consistency_warnings()
    }

    /// Equilibrium state with the initial overrides applied.
    pub fn initial_state(&self) -> ChainState {
        let mut x = ChainState::at_equilibrium(&self.equilibrium, self.n_followers);
        if let Some(s0) = self.initial.s0 {
            x.set_s(0, s0);
        }
        if let Some(v0) = self.initial.v0 {
            x.set_v(0, v0);
        }
        x
    }

    /// Parse a JSON document. Scalar `filter.gamma` / `filter.penalty`
    /// values are broadcast to every vehicle.
    pub fn from_json(text: &str) -> Result<(Self, Vec<String>)> {
        let mut value: Value = serde_json::from_str(text)?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| StcError::Config(vec!["config must be a JSON object".into()]))?;
        let missing: Vec<String> = REQUIRED_KEYS
            .iter()
            .filter(|k| !obj.contains_key(**k))
            .map(|k| format!("missing field '{k}'"))
            .collect();
        if !missing.is_empty() {
            return Err(StcError::Config(missing));
        }
        if let Some(n) = obj.get("n_followers").and_then(Value::as_u64) {
            if let Some(filter) = obj.get_mut("filter").and_then(Value::as_object_mut) {
                for (key, count) in [("gamma", n + 1), ("penalty", n)] {
                    if let Some(x) = filter.get(key).and_then(Value::as_f64) {
                        filter.insert(key.into(), Value::from(vec![x; count as usize]));
                    }
                }
            }
        }
        let cfg: ChainConfig = serde_json::from_value(value)
            .map_err(|e| StcError::Config(vec![format!("schema: {e}")]))?;
        let warnings = cfg.validate()?;
        Ok((cfg, warnings))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Load a preset by name or a JSON file by path.
pub fn load_config(source: &str) -> Result<(ChainConfig, Vec<String>)> {
    if let Some(cfg) = ChainConfig::preset(source) {
        let warnings = cfg.validate()?;
        return Ok((cfg, warnings));
    }
    let path = Path::new(source);
    if !path.exists() {
        return Err(StcError::Config(vec![format!(
            "'{source}' is neither a preset ({}) nor an existing file",
            PRESETS.join(", ")
        )]));
    }
    ChainConfig::from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_preset() {
        let (cfg, warnings) = load_config("table1").unwrap();
        assert!(warnings.is_empty());
        assert_eq!(cfg.equilibrium.v_star, 20.0);
        assert_eq!(cfg.equilibrium.s_star_hdv, 20.0);
        assert_eq!(cfg.filter.policy.tau, 1.0);
        assert_eq!(cfg.filter.gamma, vec![10.0; 3]);
        assert_eq!(cfg.filter.penalty, vec![100.0; 2]);
        assert_eq!(cfg.gains.mu, vec![-2.0, -2.0]);
        assert_eq!(cfg.gains.k, vec![0.2, 0.2]);
    }

    #[test]
    fn ngsim_preset() {
        let (cfg, warnings) = load_config("table3-ngsim").unwrap();
        assert!(warnings.is_empty(), "{warnings:?}");
        assert_eq!(cfg.equilibrium.v_star, 8.0);
        assert_eq!(cfg.equilibrium.s_star_hdv, 14.8);
        assert_eq!(cfg.filter.policy.tau, 3.0);
        assert_eq!(cfg.initial_state().s(0), 50.0);
    }

    #[test]
    fn short_gain_list_rejected() {
        let mut cfg = ChainConfig::table1();
        cfg.gains.k = vec![0.2];
        match cfg.validate() {
            Err(StcError::Config(errs)) => {
                assert!(errs.iter().any(|e| e.contains("gains.k")), "{errs:?}")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn itemized_errors() {
        let mut cfg = ChainConfig::table1();
        cfg.gains.k = vec![0.2];
        cfg.filter.gamma = vec![10.0];
        cfg.sim.dt = -1.0;
        match cfg.validate() {
            Err(StcError::Config(errs)) => assert!(errs.len() >= 3, "{errs:?}"),
            other => panic!("{other:?}"),
        }
        match ChainConfig::from_json(r#"{"n_followers": 2}"#) {
            Err(StcError::Config(errs)) => assert_eq!(errs.len(), 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn equilibrium_consistency() {
        let mut cfg = ChainConfig::table1();
        cfg.equilibrium.s_star_hdv = 21.0;
        assert_eq!(cfg.validate().unwrap().len(), 1);
        cfg.strict = true;
        assert!(cfg.validate().is_err());
        cfg.equilibrium_override = true;
        assert!(cfg.validate().unwrap().is_empty());
    }

    #[test]
    fn json_round_trip_and_broadcast() {
        let cfg = ChainConfig::table3_ngsim();
        let (back, _) = ChainConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);

        let mut v: Value = serde_json::from_str(&ChainConfig::table1().to_json().unwrap()).unwrap();
        v["filter"]["gamma"] = Value::from(5.0);
        v["filter"]["penalty"] = Value::from(10.0);
        let (cfg, _) = ChainConfig::from_json(&v.to_string()).unwrap();
        assert_eq!(cfg.filter.gamma, vec![5.0; 3]);
        assert_eq!(cfg.filter.penalty, vec![10.0; 2]);
    }
}
