//! Exposure risk from transmission, duration, recency and attenuation levels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_LEVEL: u8 = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RiskError {
    #[error("level {0} outside 0..=8")]
    LevelOutOfRange(u8),
    #[error("no confirmed contacts")]
    NoHits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskFactors {
    pub trv: u8,
    pub durv: u8,
    pub darv: u8,
    pub arv: u8,
}

pub fn risk_score(f: &RiskFactors) -> Result<u32, RiskError> {
    let levels = [f.trv, f.durv, f.darv, f.arv];
    if let Some(&bad) = levels.iter().find(|&&l| l > MAX_LEVEL) {
        return Err(RiskError::LevelOutOfRange(bad));
    }
    Ok(levels.iter().map(|&l| l as u32).product())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskConfig {
    pub duration_bucket_min: u32,
    pub days_bucket: u32,
    pub warn_threshold: u32,
    /// Ascending attenuation thresholds in dB. Each threshold at or below the
    /// measured attenuation lowers the level by one.
    pub attenuation_bands: Vec<u32>,
    pub minutes_per_beacon: f64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        RiskConfig {
            duration_bucket_min: 5,
            days_bucket: 2,
            warn_threshold: 64,
            attenuation_bands: (1..=8).map(|i| 40 + 8 * i).collect(),
            minutes_per_beacon: 2.0,
        }
    }
}

/// One confirmed match as seen by the user's device.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposureSample {
    pub beacons: u32,
    pub rssi: i32,
}

pub fn duration_level(minutes: f64, cfg: &RiskConfig) -> u8 {
    let buckets = (minutes / cfg.duration_bucket_min.max(1) as f64).floor();
    buckets.clamp(0.0, MAX_LEVEL as f64) as u8
}

pub fn days_level(days_since: u32, cfg: &RiskConfig) -> u8 {
    MAX_LEVEL.saturating_sub((days_since / cfg.days_bucket.max(1)).min(MAX_LEVEL as u32) as u8)
}

pub fn attenuation_level(attenuation_db: f64, cfg: &RiskConfig) -> u8 {
    let passed = cfg
        .attenuation_bands
        .iter()
        .filter(|&&t| attenuation_db >= t as f64)
        .count()
        .min(MAX_LEVEL as usize);
    MAX_LEVEL - passed as u8
}

pub fn derive_factors(
    hits: &[ExposureSample],
    days_since: u32,
    trv: u8,
    cfg: &RiskConfig,
) -> Result<RiskFactors, RiskError> {
    if hits.is_empty() {
        return Err(RiskError::NoHits);
    }
    if trv > MAX_LEVEL {
        return Err(RiskError::LevelOutOfRange(trv));
    }
    let minutes: Vec<f64> = hits
        .iter()
        .map(|h| h.beacons as f64 * cfg.minutes_per_beacon)
        .collect();
    let total: f64 = minutes.iter().sum();
    let mean_att = if total > 0.0 {
        hits.iter()
            .zip(&minutes)
            .map(|(h, m)| -(h.rssi as f64) * m)
            .sum::<f64>()
            / total
    } else {
        hits.iter().map(|h| -(h.rssi as f64)).sum::<f64>() / hits.len() as f64
    };
    Ok(RiskFactors {
        trv,
        durv: duration_level(total, cfg),
        darv: days_level(days_since, cfg),
        arv: attenuation_level(mean_att, cfg),
    })
}

pub fn should_warn(score: u32, cfg: &RiskConfig) -> bool {
    score >= cfg.warn_threshold
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(trv: u8, durv: u8, darv: u8, arv: u8) -> RiskFactors {
        RiskFactors { trv, durv, darv, arv }
    }

    #[test]
    fn score_examples() {
        assert_eq!(risk_score(&f(0, 5, 5, 5)).unwrap(), 0);
        assert_eq!(risk_score(&f(8, 8, 8, 8)).unwrap(), 4096);
        assert_eq!(risk_score(&f(2, 3, 1, 4)).unwrap(), 24);
        assert_eq!(risk_score(&f(9, 1, 1, 1)), Err(RiskError::LevelOutOfRange(9)));
    }

    #[test]
    fn passer_by_gets_no_warning() {
        let cfg = RiskConfig::default();
        let hits = [ExposureSample { beacons: 1, rssi: -45 }];
        let fac = derive_factors(&hits, 0, 5, &cfg).unwrap();
        assert_eq!(fac.durv, 0);
        assert_eq!(fac.darv, 8);
        assert_eq!(fac.arv, 8);
        let score = risk_score(&fac).unwrap();
        assert_eq!(score, 0);
        assert!(!should_warn(score, &cfg));
    }

    #[test]
    fn level_functions() {
        let cfg = RiskConfig::default();
        assert_eq!(duration_level(30.0, &cfg), 6);
        assert_eq!(duration_level(4.9, &cfg), 0);
        assert_eq!(duration_level(500.0, &cfg), 8);
        assert_eq!(days_level(16, &cfg), 0);
        assert_eq!(days_level(0, &cfg), 8);
        assert_eq!(days_level(3, &cfg), 7);
        assert_eq!(attenuation_level(47.9, &cfg), 8);
        assert_eq!(attenuation_level(48.0, &cfg), 7);
        assert_eq!(attenuation_level(103.0, &cfg), 1);
        assert_eq!(attenuation_level(150.0, &cfg), 0);
    }

    #[test]
    fn attenuation_is_duration_weighted() {
        let cfg = RiskConfig::default();
        let hits = [
            ExposureSample { beacons: 3, rssi: -50 },
            ExposureSample { beacons: 1, rssi: -90 },
        ];
        // (3*50 + 1*90) / 4 = 60 dB
        let fac = derive_factors(&hits, 0, 8, &cfg).unwrap();
        assert_eq!(fac.arv, attenuation_level(60.0, &cfg));
        assert_eq!(fac.durv, 1);
    }

    #[test]
    fn no_hits_is_an_error() {
        assert_eq!(derive_factors(&[], 0, 1, &RiskConfig::default()), Err(RiskError::NoHits));
    }

    #[test]
    fn monotone_in_every_factor() {
        for a in 0..=8u8 {
            for b in 0..=8u8 {
                for c in 0..=8u8 {
                    for d in 0..=8u8 {
                        let s = risk_score(&f(a, b, c, d)).unwrap();
                        if a < 8 {
                            assert!(risk_score(&f(a + 1, b, c, d)).unwrap() >= s);
                        }
                        if b < 8 {
                            assert!(risk_score(&f(a, b + 1, c, d)).unwrap() >= s);
                        }
                        if c < 8 {
                            assert!(risk_score(&f(a, b, c + 1, d)).unwrap() >= s);
                        }
                        if d < 8 {
                            assert!(risk_score(&f(a, b, c, d + 1)).unwrap() >= s);
                        }
                        if a == 0 || b == 0 || c == 0 || d == 0 {
                            assert_eq!(s, 0);
                        }
                    }
                }
            }
        }
    }
}
