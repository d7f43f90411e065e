//! Location fuzzing onto a hexagonal grid and hashing of the resulting cell.
//!
//! The grid is planar: coordinates are projected equirectangularly around the
//! centroid of a configured region, and each resolution is a regular tiling
//! of pointy-top hexagons. Edge lengths follow an aperture-7 ladder anchored
//! at 174.375668 m for resolution 9. Odd resolutions are rotated by
//! `atan(sqrt(3) / 5)` so every coarse cell center is also a center one
//! resolution finer.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAX_RESOLUTION: u8 = 15;
pub const DEFAULT_RESOLUTION: u8 = 9;
pub const DIGEST_LEN: usize = 32;

const EDGE_RES9_M: f64 = 174.375668;
const EARTH_RADIUS_M: f64 = 6_371_008.8;
const SERIALIZATION_VERSION: u8 = 0x01;
const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Axial offsets of the six neighbors.
const NEIGHBOR_OFFSETS: [(i32, i32); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("resolution {0} outside 0..=15")]
    ResolutionOutOfRange(u8),
    #[error("invalid coordinate lat={lat} lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("point lat={lat} lon={lon} lies outside the configured region")]
    OutsideRegion { lat: f64, lon: f64 },
    #[error("malformed cell digest: {0}")]
    MalformedDigest(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !lon.is_finite() || lat.abs() > 90.0 || lon.abs() > 180.0 {
            return Err(GeoError::InvalidCoordinate { lat, lon });
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Meters east (`x`) and north (`y`) of the region centroid.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlanarPoint {
    pub x: f64,
    pub y: f64,
}

impl PlanarPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &PlanarPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Square region (in degrees) the grid is defined over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub centroid: GeoPoint,
    pub extent_deg: f64,
}

impl Default for Region {
    /// One degree square around central Xi'an.
    fn default() -> Self {
        Self {
            centroid: GeoPoint {
                lat: 34.3416,
                lon: 108.9398,
            },
            extent_deg: 1.0,
        }
    }
}

impl Region {
    pub fn new(centroid: GeoPoint, extent_deg: f64) -> Result<Self, GeoError> {
        if !(extent_deg.is_finite() && extent_deg > 0.0) {
            return Err(GeoError::InvalidCoordinate {
                lat: centroid.lat,
                lon: centroid.lon,
            });
        }
        Ok(Self {
            centroid,
            extent_deg,
        })
    }

    fn meters_per_degree() -> f64 {
        EARTH_RADIUS_M * std::f64::consts::PI / 180.0
    }

    pub fn project(&self, p: &GeoPoint) -> PlanarPoint {
        let m = Self::meters_per_degree();
        PlanarPoint {
            x: (p.lon - self.centroid.lon) * self.centroid.lat.to_radians().cos() * m,
            y: (p.lat - self.centroid.lat) * m,
        }
    }

    pub fn unproject(&self, q: &PlanarPoint) -> GeoPoint {
        let m = Self::meters_per_degree();
        GeoPoint {
            lat: self.centroid.lat + q.y / m,
            lon: self.centroid.lon + q.x / (m * self.centroid.lat.to_radians().cos()),
        }
    }

    /// Half width and half height of the region in meters.
    pub fn half_extent_m(&self) -> (f64, f64) {
        let m = Self::meters_per_degree();
        let half = self.extent_deg / 2.0;
        (half * self.centroid.lat.to_radians().cos() * m, half * m)
    }

    pub fn contains(&self, p: &GeoPoint) -> bool {
        let half = self.extent_deg / 2.0;
        (p.lat - self.centroid.lat).abs() <= half && (p.lon - self.centroid.lon).abs() <= half
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex {
    resolution: u8,
    cell_id: u64,
}

impl CellIndex {
    pub fn from_axial(resolution: u8, q: i32, r: i32) -> Self {
        Self {
            resolution,
            cell_id: ((q as u32 as u64) << 32) | r as u32 as u64,
        }
    }

    pub fn from_raw(resolution: u8, cell_id: u64) -> Result<Self, GeoError> {
        check_resolution(resolution)?;
        Ok(Self {
            resolution,
            cell_id,
        })
    }

    pub fn resolution(&self) -> u8 {
        self.resolution
    }

    pub fn cell_id(&self) -> u64 {
        self.cell_id
    }

    pub fn axial(&self) -> (i32, i32) {
        ((self.cell_id >> 32) as u32 as i32, self.cell_id as u32 as i32)
    }

    /// Frozen 10-byte layout: resolution, big-endian cell id, version byte.
    pub fn canonical_bytes(&self) -> [u8; 10] {
        let mut out = [0u8; 10];
        out[0] = self.resolution;
        out[1..9].copy_from_slice(&self.cell_id.to_be_bytes());
        out[9] = SERIALIZATION_VERSION;
        out
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct CellDigest(pub [u8; DIGEST_LEN]);

impl CellDigest {
    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for CellDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for CellDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CellDigest({})", self.to_hex())
    }
}

impl FromStr for CellDigest {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; DIGEST_LEN];
        hex::decode_to_slice(s, &mut out).map_err(|e| GeoError::MalformedDigest(e.to_string()))?;
        Ok(CellDigest(out))
    }
}

pub fn digest_cell(cell: &CellIndex) -> CellDigest {
    CellDigest(Sha256::digest(cell.canonical_bytes()).into())
}

/// Anything that can fuzz a coordinate into a cell. A spherical index can be
/// dropped in behind this trait without touching callers.
pub trait CellIndexer: Send + Sync {
    fn cell_index(&self, p: &GeoPoint, resolution: u8) -> Result<CellIndex, GeoError>;

    fn neighbors(&self, cell: &CellIndex) -> Vec<CellIndex>;

    fn hide_location(&self, p: &GeoPoint, resolution: u8) -> Result<CellDigest, GeoError> {
        Ok(digest_cell(&self.cell_index(p, resolution)?))
    }
}

fn check_resolution(resolution: u8) -> Result<(), GeoError> {
    if resolution > MAX_RESOLUTION {
        Err(GeoError::ResolutionOutOfRange(resolution))
    } else {
        Ok(())
    }
}

/// Hexagon edge length (equal to circumradius) at `resolution`, in meters.
pub fn edge_length_m(resolution: u8) -> f64 {
    EDGE_RES9_M * 7f64.sqrt().powi(9 - resolution as i32)
}

fn rotation(resolution: u8) -> f64 {
    if resolution % 2 == 1 {
        (SQRT3 / 5.0).atan()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct HexGrid {
    region: Region,
}

impl HexGrid {
    pub fn new(region: Region) -> Self {
        Self { region }
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    /// Cell containing a planar point, without any region check.
    pub fn cell_of_planar(&self, p: &PlanarPoint, resolution: u8) -> CellIndex {
        let e = edge_length_m(resolution);
        let (s, c) = (-rotation(resolution)).sin_cos();
        let x = c * p.x - s * p.y;
        let y = s * p.x + c * p.y;
        let qf = (SQRT3 / 3.0 * x - y / 3.0) / e;
        let rf = (2.0 / 3.0 * y) / e;
        let (q, r) = cube_round(qf, rf);
        CellIndex::from_axial(resolution, q, r)
    }

    pub fn cell_center(&self, cell: &CellIndex) -> PlanarPoint {
        let (q, r) = cell.axial();
        let e = edge_length_m(cell.resolution);
        let x = e * SQRT3 * (q as f64 + r as f64 / 2.0);
        let y = e * 1.5 * r as f64;
        let (s, c) = rotation(cell.resolution).sin_cos();
        PlanarPoint {
            x: c * x - s * y,
            y: s * x + c * y,
        }
    }

    pub fn cell_vertices(&self, cell: &CellIndex) -> [PlanarPoint; 6] {
        let center = self.cell_center(cell);
        let e = edge_length_m(cell.resolution);
        let base = rotation(cell.resolution) + std::f64::consts::FRAC_PI_6;
        std::array::from_fn(|k| {
            let a = base + k as f64 * std::f64::consts::FRAC_PI_3;
            PlanarPoint {
                x: center.x + e * a.cos(),
                y: center.y + e * a.sin(),
            }
        })
    }

    /// True when the hexagon overlaps the region rectangle (separating-axis
    /// test over both polygons' edge normals).
    pub fn intersects_region(&self, cell: &CellIndex) -> bool {
        let (hw, hh) = self.region.half_extent_m();
        let rect = [
            PlanarPoint::new(-hw, -hh),
            PlanarPoint::new(hw, -hh),
            PlanarPoint::new(hw, hh),
            PlanarPoint::new(-hw, hh),
        ];
        let hex = self.cell_vertices(cell);
        let rot = rotation(cell.resolution);
        let mut axes = vec![(1.0, 0.0), (0.0, 1.0)];
        for k in 0..3 {
            let a = rot + k as f64 * std::f64::consts::FRAC_PI_3;
            axes.push(a.sin_cos());
        }
        axes.iter().all(|&(ax, ay)| {
            let span = |pts: &[PlanarPoint]| {
                pts.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| {
                    let d = p.x * ax + p.y * ay;
                    (lo.min(d), hi.max(d))
                })
            };
            let (a0, a1) = span(&hex);
            let (b0, b1) = span(&rect);
            a0 <= b1 && b0 <= a1
        })
    }

    pub fn cell_index_planar(
        &self,
        p: &PlanarPoint,
        resolution: u8,
    ) -> Result<CellIndex, GeoError> {
        check_resolution(resolution)?;
        Ok(self.cell_of_planar(p, resolution))
    }
}

impl CellIndexer for HexGrid {
    fn cell_index(&self, p: &GeoPoint, resolution: u8) -> Result<CellIndex, GeoError> {
        check_resolution(resolution)?;
        if !self.region.contains(p) {
            return Err(GeoError::OutsideRegion {
                lat: p.lat,
                lon: p.lon,
            });
        }
        Ok(self.cell_of_planar(&self.region.project(p), resolution))
    }

    fn neighbors(&self, cell: &CellIndex) -> Vec<CellIndex> {
        let (q, r) = cell.axial();
        NEIGHBOR_OFFSETS
            .iter()
            .map(|(dq, dr)| CellIndex::from_axial(cell.resolution, q + dq, r + dr))
            .filter(|n| self.intersects_region(n))
            .collect()
    }
}

fn cube_round(qf: f64, rf: f64) -> (i32, i32) {
    let sf = -qf - rf;
    let mut q = qf.round();
    let mut r = rf.round();
    let s = sf.round();
    let dq = (q - qf).abs();
    let dr = (r - rf).abs();
    let ds = (s - sf).abs();
    if dq > dr && dq > ds {
        q = -r - s;
    } else if dr > ds {
        r = -q - s;
    }
    (q as i32, r as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_sixteen_is_rejected() {
        let grid = HexGrid::default();
        let p = Region::default().centroid;
        assert_eq!(
            grid.cell_index(&p, 16),
            Err(GeoError::ResolutionOutOfRange(16))
        );
    }

    #[test]
    fn invalid_coordinates_rejected() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, f64::NAN).is_err());
        assert!(GeoPoint::new(-90.0, 180.0).is_ok());
    }

    #[test]
    fn outside_region_rejected() {
        let grid = HexGrid::default();
        let far = GeoPoint::new(0.0, 0.0).unwrap();
        assert!(matches!(
            grid.cell_index(&far, 9),
            Err(GeoError::OutsideRegion { .. })
        ));
    }

    #[test]
    fn edge_ladder_matches_reference_scale() {
        assert!((edge_length_m(9) - 174.375668).abs() < 1e-9);
        assert!((edge_length_m(0) / 1000.0 - 1107.71).abs() < 0.1);
        assert!((edge_length_m(15) - 0.5097).abs() < 0.002);
    }

    #[test]
    fn axial_round_trip() {
        for (q, r) in [(0, 0), (-5, 7), (i32::MAX, i32::MIN), (-1, -1)] {
            assert_eq!(CellIndex::from_axial(3, q, r).axial(), (q, r));
        }
    }

    #[test]
    fn canonical_layout() {
        let c = CellIndex::from_axial(9, 1, -1);
        let b = c.canonical_bytes();
        assert_eq!(b[0], 9);
        assert_eq!(&b[1..9], &c.cell_id().to_be_bytes());
        assert_eq!(b[9], 0x01);
    }

    #[test]
    fn center_maps_back_to_cell() {
        let grid = HexGrid::default();
        for res in 0..=15u8 {
            for (q, r) in [(0, 0), (3, -2), (-7, 11)] {
                let c = CellIndex::from_axial(res, q, r);
                assert_eq!(grid.cell_of_planar(&grid.cell_center(&c), res), c);
            }
        }
    }

    #[test]
    fn coarse_centers_are_fine_centers() {
        let grid = HexGrid::default();
        for res in 0..15u8 {
            for (q, r) in [(0, 0), (1, 0), (2, -5), (-4, 3)] {
                let coarse = CellIndex::from_axial(res, q, r);
                let center = grid.cell_center(&coarse);
                let fine = grid.cell_of_planar(&center, res + 1);
                let d = grid.cell_center(&fine).distance(&center);
                assert!(d < 1e-6 * edge_length_m(res), "res {res}: off by {d}");
            }
        }
    }

    #[test]
    fn interior_cell_has_six_symmetric_neighbors() {
        let grid = HexGrid::default();
        let c = grid.cell_index(&Region::default().centroid, 9).unwrap();
        let ns = grid.neighbors(&c);
        assert_eq!(ns.len(), 6);
        assert!(!ns.contains(&c));
        for n in &ns {
            assert!(grid.neighbors(n).contains(&c));
        }
    }

    #[test]
    fn edge_cell_has_fewer_neighbors() {
        let region = Region::default();
        let grid = HexGrid::new(region);
        let c = region.centroid;
        let corner = GeoPoint::new(c.lat() + 0.4999999, c.lon() + 0.4999999).unwrap();
        let cell = grid.cell_index(&corner, 9).unwrap();
        assert!(grid.neighbors(&cell).len() < 6);
    }

    #[test]
    fn coarse_resolution_region_is_a_single_cell() {
        let grid = HexGrid::default();
        let c = grid.cell_index(&Region::default().centroid, 0).unwrap();
        assert!(grid.neighbors(&c).is_empty());
    }

    #[test]
    fn digest_is_sha256_of_layout() {
        let c = CellIndex::from_axial(9, 12, -4);
        let d = digest_cell(&c);
        assert_eq!(d.0.len(), 32);
        let expect: [u8; 32] = Sha256::digest(c.canonical_bytes()).into();
        assert_eq!(d.0, expect);
        let parsed: CellDigest = d.to_hex().parse().unwrap();
        assert_eq!(parsed, d);
    }
}
