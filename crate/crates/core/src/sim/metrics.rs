use serde::{Deserialize, Serialize};

use super::SimRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyMetrics {
    pub min_spacing: Vec<f64>,
    pub min_cbf: Vec<f64>,
    /// Peak `|v_i - v*|`.
    pub max_speed_dev: Vec<f64>,
    /// Peak `v* - v_i`.
    pub max_speed_drop: Vec<f64>,
    pub min_speed: Vec<f64>,
    pub head_max_dev: f64,
    pub head_max_drop: f64,
    /// Peak tail speed deviation over peak head speed deviation; `None` when
    /// the head never deviates.
    pub amplification_ratio: Option<f64>,
    /// Vehicle `i` reached `s_i <= 0`.
    pub collisions: Vec<bool>,
}

fn fold_min(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::INFINITY, f64::min)
}

fn fold_max(xs: impl Iterator<Item = f64>) -> f64 {
    xs.fold(0.0, f64::max)
}

pub fn safety_metrics(rec: &SimRecord) -> SafetyMetrics {
    let vs = rec.v_star;
    let min_spacing: Vec<f64> = rec.spacing.iter().map(|s| fold_min(s)).collect();
    let max_speed_dev: Vec<f64> = rec
        .speed
        .iter()
        .map(|v| fold_max(v.iter().map(|x| (x - vs).abs())))
        .collect();
    let head_max_dev = fold_max(rec.head_speed.iter().map(|x| (x - vs).abs()));
    let tail = max_speed_dev.last().copied().unwrap_or(0.0);
    SafetyMetrics {
        collisions: min_spacing.iter().map(|s| *s <= 0.0).collect(),
        min_cbf: rec.cbf.iter().map(|h| fold_min(h)).collect(),
        max_speed_drop: rec
            .speed
            .iter()
            .map(|v| fold_max(v.iter().map(|x| vs - x)))
            .collect(),
        min_speed: rec.speed.iter().map(|v| fold_min(v)).collect(),
        head_max_drop: fold_max(rec.head_speed.iter().map(|x| vs - x)),
        amplification_ratio: (head_max_dev > 0.0).then(|| tail / head_max_dev),
        head_max_dev,
        max_speed_dev,
        min_spacing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ChainConfig;
    use crate::sim::{simulate, ScenarioSpec, SimSettings};

    #[test]
    fn equilibrium_metrics() {
        let cfg = ChainConfig::table1();
        let settings = SimSettings {
            t_end: 2.0,
            ..SimSettings::default()
        };
        let rec = simulate(&cfg, &ScenarioSpec::scenario2(0.0, 0.0), &settings).unwrap();
        let m = safety_metrics(&rec);
        assert!(m.min_spacing.iter().all(|s| (s - 20.0).abs() < 1e-9));
        assert_eq!(m.amplification_ratio, None);
        assert_eq!(m.collisions, vec![false; 3]);
    }

    #[test]
    fn collision_flags_follow_spacing() {
        let cfg = ChainConfig::table1();
        let settings = SimSettings {
            t_end: 2.0,
            ..SimSettings::default()
        };
        let mut rec = simulate(&cfg, &ScenarioSpec::scenario2(0.0, 0.0), &settings).unwrap();
        rec.spacing[1][50] = -0.1;
        rec.spacing[2][10] = 0.0;
        assert_eq!(safety_metrics(&rec).collisions, vec![false, true, true]);
    }
}
