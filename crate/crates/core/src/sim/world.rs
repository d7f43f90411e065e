//! Places, agents and the seeded random streams that drive them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{SimConfig, SimError};
use crate::devicelog::DeviceLog;
use crate::finematch::FixedPoint;
use crate::geocell::{digest_cell, CellDigest, CellIndex, HexGrid, PlanarPoint};
use crate::keysched::{KeyStore, Rpi};

/// Independent generator for one labelled purpose. Streams never share
/// state, so adding draws in one place leaves every other stream intact.
pub fn stream(seed: u64, label: &str, a: u64, b: u64) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(label.as_bytes());
    h.update([0]);
    h.update(a.to_be_bytes());
    h.update(b.to_be_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

#[derive(Debug, Clone)]
pub struct Place {
    pub center: PlanarPoint,
    pub cell: CellIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Health {
    Healthy,
    Suspected,
    Sick,
}

/// One entry of the device's private location history.
#[derive(Debug, Clone, Copy)]
pub struct Stay {
    pub start: u64,
    pub end: u64,
    pub pos: PlanarPoint,
    pub fixed: FixedPoint,
    pub digest: CellDigest,
}

pub struct Agent {
    pub id: u32,
    pub health: Health,
    pub victim: bool,
    pub home_digest: CellDigest,
    pub keys: KeyStore,
    pub today: Vec<Rpi>,
    pub log: DeviceLog,
    pub stays: Vec<Stay>,
    pub since_epoch: u64,
    pub walk: ChaCha20Rng,
    pub crypto: ChaCha20Rng,
}

impl Agent {
    pub fn stay_at(&self, t: u64) -> Option<&Stay> {
        self.stays.iter().rev().find(|s| s.start <= t && t < s.end)
    }
}

pub fn uniform_in_disk<R: Rng>(center: &PlanarPoint, radius: f64, rng: &mut R) -> PlanarPoint {
    let r = radius * rng.gen::<f64>().sqrt();
    let th = rng.gen::<f64>() * std::f64::consts::TAU;
    PlanarPoint::new(center.x + r * th.cos(), center.y + r * th.sin())
}

pub struct World {
    pub grid: HexGrid,
    pub resolution: u8,
    pub coord_bits: u32,
    pub places: Vec<Place>,
    pub agents: Vec<Agent>,
}

impl World {
    pub fn new(cfg: &SimConfig, victims: usize) -> Result<Self, SimError> {
        let grid = HexGrid::new(cfg.region()?);
        let (hx, hy) = grid.region().half_extent_m();
        let (mx, my) = ((hx - 2_000.0).max(hx / 2.0), (hy - 2_000.0).max(hy / 2.0));
        let mut rng = stream(cfg.seed, "places", 0, 0);
        let mut places: Vec<Place> = Vec::with_capacity(cfg.places);
        let mut tries = 0usize;
        while places.len() < cfg.places {
            tries += 1;
            if tries > 1000 * cfg.places + 1000 {
                return Err(SimError::ConfigInvalid(format!(
                    "cannot fit {} places in distinct cells",
                    cfg.places
                )));
            }
            let p = PlanarPoint::new(rng.gen_range(-mx..=mx), rng.gen_range(-my..=my));
            let cell = grid.cell_of_planar(&p, cfg.resolution);
            if places.iter().any(|q| q.cell == cell) {
                continue;
            }
            places.push(Place {
                center: grid.cell_center(&cell),
                cell,
            });
        }

        let agents = (0..cfg.users + victims)
            .map(|i| {
                let id = i as u32;
                let mut walk = stream(cfg.seed, "walk", i as u64, 0);
                let home = PlanarPoint::new(walk.gen_range(-mx..=mx), walk.gen_range(-my..=my));
                Agent {
                    id,
                    health: Health::Healthy,
                    victim: i >= cfg.users,
                    home_digest: digest_cell(&grid.cell_of_planar(&home, cfg.resolution)),
                    keys: KeyStore::new(),
                    today: Vec::new(),
                    log: DeviceLog::new(),
                    stays: Vec::new(),
                    since_epoch: 0,
                    walk,
                    crypto: stream(cfg.seed, "crypto", i as u64, 0),
                }
            })
            .collect();

        Ok(World {
            grid,
            resolution: cfg.resolution,
            coord_bits: cfg.params.coord_bits,
            places,
            agents,
        })
    }
}

pub fn make_stay(
    grid: &HexGrid,
    resolution: u8,
    coord_bits: u32,
    start: u64,
    end: u64,
    pos: PlanarPoint,
) -> Result<Stay, SimError> {
    let fixed = FixedPoint::from_planar(&pos, coord_bits)
        .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
    Ok(Stay {
        start,
        end,
        pos,
        fixed,
        digest: digest_cell(&grid.cell_of_planar(&pos, resolution)),
    })
}
