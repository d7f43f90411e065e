//! Simulation settings and the TOML file layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::finematch::ParamSpec;
use crate::geocell::{GeoPoint, Region, DEFAULT_RESOLUTION, MAX_RESOLUTION};
use crate::keysched::RETENTION_DAYS;
use crate::riskscore::RiskConfig;

/// 2020-08-09.
pub const DEFAULT_START_DAY: u32 = 18_483;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Wormhole,
    Replay,
}

impl std::str::FromStr for AttackKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wormhole" => Ok(AttackKind::Wormhole),
            "replay" => Ok(AttackKind::Replay),
            other => Err(SimError::ScenarioInvalid(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackScenario {
    pub kind: AttackKind,
    /// Place where beacons are captured.
    pub tap_place: usize,
    /// Place where captured beacons are re-emitted. `None` keeps the tap
    /// place and shifts the antenna by `emit_offset_m`.
    pub emit_place: Option<usize>,
    pub emit_offset_m: f64,
    /// Simulation day (0-based) on which the attacker operates.
    pub day: u32,
    /// Hour slots (0-based within the day's slots) the attacker is active.
    pub slots: Vec<u32>,
    pub victims: usize,
    pub victim_spread_m: f64,
    pub replay_delay_intervals: u32,
    /// Diagnose every tapped agent at the end of the attack day.
    pub targeted: bool,
}

impl Default for AttackScenario {
    fn default() -> Self {
        AttackScenario {
            kind: AttackKind::Wormhole,
            tap_place: 0,
            emit_place: None,
            emit_offset_m: 80.0,
            day: 0,
            slots: (0..12).collect(),
            victims: 10,
            victim_spread_m: 5.0,
            replay_delay_intervals: 8,
            targeted: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub users: usize,
    pub places: usize,
    pub days: u32,
    pub seed: u64,
    pub infection_rate: f64,
    pub resolution: u8,
    pub region_centroid: (f64, f64),
    pub region_extent_deg: f64,
    pub start_day: u32,
    pub retention_days: u32,
    pub day_start_hour: u32,
    /// Number of one-hour visit slots per day.
    pub slots: u32,
    pub visits_per_day: u32,
    pub partners_mean: f64,
    pub beacons_mean: f64,
    pub beacon_interval_s: u64,
    pub place_radius_m: f64,
    pub contact_radius_m: u64,
    pub rssi_noise_db: f64,
    pub initial_patient_fraction: f64,
    /// Extra diagnoses as (day, agent id).
    pub forced_patients: Vec<(u32, u32)>,
    pub params: ParamSpec,
    pub param_pool: usize,
    pub signature: String,
    pub transmission_level: u8,
    pub risk: RiskConfig,
    /// Users per day whose full-dataset baseline scan is timed.
    pub timing_sample: usize,
    pub attack: Option<AttackScenario>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            users: 1000,
            places: 50,
            days: 14,
            seed: 42,
            infection_rate: 1.0,
            resolution: DEFAULT_RESOLUTION,
            region_centroid: (34.3416, 108.9398),
            region_extent_deg: 1.0,
            start_day: DEFAULT_START_DAY,
            retention_days: RETENTION_DAYS,
            day_start_hour: 8,
            slots: 12,
            visits_per_day: 3,
            partners_mean: 1.0,
            beacons_mean: 3.0,
            beacon_interval_s: 120,
            place_radius_m: 30.0,
            contact_radius_m: 10,
            rssi_noise_db: 3.0,
            initial_patient_fraction: 0.01,
            forced_patients: Vec::new(),
            params: ParamSpec::DEFAULT,
            param_pool: 4,
            signature: "ed25519".into(),
            transmission_level: 5,
            risk: RiskConfig::default(),
            timing_sample: 4,
            attack: None,
        }
    }
}

impl SimConfig {
    pub fn region(&self) -> Result<Region, SimError> {
        let (lat, lon) = self.region_centroid;
        let c = GeoPoint::new(lat, lon).map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        Region::new(c, self.region_extent_deg).map_err(|e| SimError::ConfigInvalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::ConfigInvalid(m));
        if self.users == 0 || self.places == 0 || self.days == 0 {
            return bad("users, places and days must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.infection_rate) {
            return bad(format!("infection_rate {} outside [0, 1]", self.infection_rate));
        }
        if !(0.0..=1.0).contains(&self.initial_patient_fraction) {
            return bad("initial_patient_fraction outside [0, 1]".into());
        }
        if self.resolution > MAX_RESOLUTION {
            return bad(format!("resolution {} above {MAX_RESOLUTION}", self.resolution));
        }
        if self.slots == 0 || self.day_start_hour + self.slots > 24 {
            return bad("visit slots must fit in one day".into());
        }
        if self.visits_per_day > self.slots {
            return bad("more visits than slots".into());
        }
        if self.beacons_mean < 1.0 || self.partners_mean < 0.0 {
            return bad("beacons_mean must be >= 1 and partners_mean >= 0".into());
        }
        if self.beacon_interval_s == 0 || self.beacon_interval_s > 3600 {
            return bad("beacon_interval_s outside 1..=3600".into());
        }
        if self.place_radius_m < 0.0 || self.contact_radius_m == 0 {
            return bad("place radius must be >= 0 and contact radius > 0".into());
        }
        if self.retention_days == 0 || self.param_pool == 0 {
            return bad("retention_days and param_pool must be positive".into());
        }
        if crate::finematch::signature::scheme_by_name(&self.signature).is_none() {
            return bad(format!("unknown signature scheme {:?}", self.signature));
        }
        if self.transmission_level > crate::riskscore::MAX_LEVEL {
            return bad("transmission_level above 8".into());
        }
        self.params
            .check()
            .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        if let Some((_, a)) = self.forced_patients.iter().find(|(_, a)| *a as usize >= self.users) {
            return bad(format!("forced patient {a} is not an agent"));
        }
        self.region()?;
        Ok(())
    }
}

/// Top-level file layout. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub geocell: GeocellSection,
    pub risk: Option<RiskConfig>,
    pub server: ServerSection,
    pub finematch: FinematchSection,
    pub sim: Option<SimSection>,
    pub attack: Option<AttackScenario>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeocellSection {
    pub resolution: u8,
    pub region_centroid: (f64, f64),
    pub region_extent_deg: f64,
}

impl Default for GeocellSection {
    fn default() -> Self {
        let d = SimConfig::default();
        GeocellSection {
            resolution: d.resolution,
            region_centroid: d.region_centroid,
            region_extent_deg: d.region_extent_deg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub port: u16,
    pub epoch_seconds: u64,
    pub retention_days: u32,
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection {
            port: crate::edgeserver::wire::DEFAULT_PORT,
            epoch_seconds: 3600,
            retention_days: RETENTION_DAYS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinematchSection {
    pub k1: u32,
    pub k2: u32,
    pub k3: u32,
    pub k4: u32,
    pub coord_bits: u32,
    pub contact_radius_m: u64,
    pub signature: String,
}

impl Default for FinematchSection {
    fn default() -> Self {
        let p = ParamSpec::DEFAULT;
        FinematchSection {
            k1: p.k1,
            k2: p.k2,
            k3: p.k3,
            k4: p.k4,
            coord_bits: p.coord_bits,
            contact_radius_m: 10,
            signature: "ed25519".into(),
        }
    }
}

/// Simulation keys that are not covered by another section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub users: Option<usize>,
    pub places: Option<usize>,
    pub days: Option<u32>,
    pub seed: Option<u64>,
    pub infection_rate: Option<f64>,
    pub start_day: Option<u32>,
    pub slots: Option<u32>,
    pub day_start_hour: Option<u32>,
    pub visits_per_day: Option<u32>,
    pub partners_mean: Option<f64>,
    pub beacons_mean: Option<f64>,
    pub beacon_interval_s: Option<u64>,
    pub place_radius_m: Option<f64>,
    pub rssi_noise_db: Option<f64>,
    pub initial_patient_fraction: Option<f64>,
    pub forced_patients: Option<Vec<(u32, u32)>>,
    pub param_pool: Option<usize>,
    pub transmission_level: Option<u8>,
    pub timing_sample: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::ConfigInvalid(e.to_string()))
    }

    /// Applies the file on top of the defaults.
    pub fn sim_config(&self) -> SimConfig {
        let mut c = SimConfig {
            resolution: self.geocell.resolution,
            region_centroid: self.geocell.region_centroid,
            region_extent_deg: self.geocell.region_extent_deg,
            retention_days: self.server.retention_days,
            contact_radius_m: self.finematch.contact_radius_m,
            signature: self.finematch.signature.clone(),
            params: ParamSpec::new(
                self.finematch.k1,
                self.finematch.k2,
                self.finematch.k3,
                self.finematch.k4,
                self.finematch.coord_bits,
            ),
            risk: self.risk.clone().unwrap_or_default(),
            attack: self.attack.clone(),
            ..SimConfig::default()
        };
        if let Some(s) = &self.sim {
            macro_rules! take {
                ($($f:ident),*) => { $( if let Some(v) = s.$f.clone() { c.$f = v; } )* };
            }
            take!(
                users,
                places,
                days,
                seed,
                infection_rate,
                start_day,
                slots,
                day_start_hour,
                visits_per_day,
                partners_mean,
                beacons_mean,
                beacon_interval_s,
                place_radius_m,
                rssi_noise_db,
                initial_patient_fraction,
                forced_patients,
                param_pool,
                transmission_level,
                timing_sample
            );
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        SimConfig::default().validate().unwrap();
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut c = SimConfig {
            infection_rate: 1.5,
            ..SimConfig::default()
        };
        assert!(c.validate().is_err());
        c.infection_rate = 1.0;
        c.params = ParamSpec::new(800, 300, 128, 128, 22);
        assert!(c.validate().is_err());
        c.params = ParamSpec::DEFAULT;
        c.signature = "rsa".into();
        assert!(c.validate().is_err());
        c.signature = "ed25519".into();
        c.forced_patients = vec![(0, 5000)];
        assert!(c.validate().is_err());
    }

    #[test]
    fn file_overrides_defaults() {
        let text = r#"
            [geocell]
            resolution = 8
            region_centroid = [30.0, 120.0]
            region_extent_deg = 0.5

            [risk]
            duration_bucket_min = 10
            warn_threshold = 100
            attenuation_bands = [50, 60, 70, 80, 90, 100, 110, 120]

            [finematch]
            signature = "bls12-381"

            [sim]
            users = 200
            seed = 7

            [attack]
            kind = "replay"
            tap_place = 3
            victims = 4
        "#;
        let f = FileConfig::parse(text).unwrap();
        let c = f.sim_config();
        assert_eq!(c.resolution, 8);
        assert_eq!(c.region_centroid, (30.0, 120.0));
        assert_eq!(c.risk.warn_threshold, 100);
        assert_eq!(c.risk.days_bucket, 2);
        assert_eq!(c.signature, "bls12-381");
        assert_eq!((c.users, c.seed, c.places), (200, 7, 50));
        let a = c.attack.unwrap();
        assert_eq!(a.kind, AttackKind::Replay);
        assert_eq!((a.tap_place, a.victims), (3, 4));
    }

    #[test]
    fn shipped_configs_parse() {
        let d = FileConfig::parse(include_str!("../../../../configs/default.toml")).unwrap();
        assert_eq!(d.sim_config(), SimConfig::default());
        let a = FileConfig::parse(include_str!("../../../../configs/attack.toml")).unwrap();
        let c = a.sim_config();
        c.validate().unwrap();
        assert_eq!(c.attack.unwrap().emit_place, Some(1));
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(FileConfig::parse("[geocell]\nresolutoin = 3\n").is_err());
    }
}
