//! Daily tracing keys and rolling proximity identifiers.
//!
//! Each device draws a fresh 16-byte daily tracing key (DTK) per day. The
//! identifier key is `SHA-256(DTK || "EN-RPIK")` truncated to 16 bytes, and
//! the identifier for interval `i` is the AES-128 encryption of
//! `"EN-RPI" || 0x00 * 6 || BE32(i)` under that key.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use aes::cipher::{generic_array::GenericArray, BlockEncrypt, KeyInit};
use aes::Aes128;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const KEY_LEN: usize = 16;
pub const INTERVALS_PER_DAY: u32 = 96;
pub const INTERVAL_SECONDS: u64 = 900;
pub const SECONDS_PER_DAY: u64 = 86_400;
pub const RETENTION_DAYS: u32 = 14;

const RPIK_INFO: &[u8] = b"EN-RPIK";
const RPI_PREFIX: &[u8; 6] = b"EN-RPI";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyError {
    #[error("interval {0} outside 1..=96")]
    IntervalOutOfRange(u32),
    #[error("malformed identifier: {0}")]
    Malformed(String),
}

#[derive(Clone, PartialEq, Eq)]
pub struct DailyTracingKey {
    day_index: u32,
    key: [u8; KEY_LEN],
}

impl DailyTracingKey {
    pub fn generate<R: RngCore + CryptoRng>(day_index: u32, rng: &mut R) -> Self {
        let mut key = [0u8; KEY_LEN];
        rng.fill_bytes(&mut key);
        Self { day_index, key }
    }

    pub fn from_bytes(day_index: u32, key: [u8; KEY_LEN]) -> Self {
        Self { day_index, key }
    }

    pub fn day_index(&self) -> u32 {
        self.day_index
    }

    pub fn key(&self) -> &[u8; KEY_LEN] {
        &self.key
    }

    /// Identifier broadcast during `interval` of this key's day.
    pub fn rpi_for(&self, interval: u32) -> Result<RollingProximityIdentifier, KeyError> {
        let rpi = derive_rpi(&derive_rpik(self), interval)?;
        Ok(RollingProximityIdentifier {
            rpi,
            interval,
            day_index: self.day_index,
        })
    }

    /// All 96 identifiers of the day, index 0 holding interval 1.
    pub fn day_rpis(&self) -> Vec<Rpi> {
        let rpik = derive_rpik(self);
        (1..=INTERVALS_PER_DAY)
            .map(|i| encrypt_interval(&rpik, i))
            .collect()
    }
}

impl fmt::Debug for DailyTracingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DailyTracingKey")
            .field("day_index", &self.day_index)
            .field("key", &"<redacted>")
            .finish()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct RollingProximityKey([u8; KEY_LEN]);

impl RollingProximityKey {
    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for RollingProximityKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("RollingProximityKey(<redacted>)")
    }
}

/// A 16-byte broadcast identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Rpi(pub [u8; KEY_LEN]);

impl Rpi {
    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Rpi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Rpi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Rpi({})", self.to_hex())
    }
}

impl FromStr for Rpi {
    type Err = KeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; KEY_LEN];
        hex::decode_to_slice(s, &mut out).map_err(|e| KeyError::Malformed(e.to_string()))?;
        Ok(Rpi(out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RollingProximityIdentifier {
    pub rpi: Rpi,
    pub interval: u32,
    pub day_index: u32,
}

pub fn derive_rpik(dtk: &DailyTracingKey) -> RollingProximityKey {
    let mut h = Sha256::new();
    h.update(dtk.key);
    h.update(RPIK_INFO);
    let digest = h.finalize();
    let mut out = [0u8; KEY_LEN];
    out.copy_from_slice(&digest[..KEY_LEN]);
    RollingProximityKey(out)
}

/// The 16-byte AES plaintext for an interval number.
pub fn padded_data(interval: u32) -> [u8; 16] {
    let mut block = [0u8; 16];
    block[..6].copy_from_slice(RPI_PREFIX);
    block[12..].copy_from_slice(&interval.to_be_bytes());
    block
}

pub fn derive_rpi(rpik: &RollingProximityKey, interval: u32) -> Result<Rpi, KeyError> {
    if !(1..=INTERVALS_PER_DAY).contains(&interval) {
        return Err(KeyError::IntervalOutOfRange(interval));
    }
    Ok(encrypt_interval(rpik, interval))
}

fn encrypt_interval(rpik: &RollingProximityKey, interval: u32) -> Rpi {
    let cipher = Aes128::new(GenericArray::from_slice(&rpik.0));
    let mut block = GenericArray::clone_from_slice(&padded_data(interval));
    cipher.encrypt_block(&mut block);
    let mut out = [0u8; KEY_LEN];
    out.copy_from_slice(&block);
    Rpi(out)
}

/// Maps a UTC timestamp in seconds to `(day_index, interval)` with the
/// interval in `1..=96`.
pub fn interval_of(timestamp: u64) -> (u32, u32) {
    let day = timestamp / SECONDS_PER_DAY;
    let interval = 1 + (timestamp % SECONDS_PER_DAY) / INTERVAL_SECONDS;
    (day as u32, interval as u32)
}

/// First second of `interval` on `day_index`.
pub fn interval_start(day_index: u32, interval: u32) -> u64 {
    day_index as u64 * SECONDS_PER_DAY + (interval.saturating_sub(1)) as u64 * INTERVAL_SECONDS
}

/// Interval-granular time: a day index plus an interval in `1..=96`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CoarseTime {
    pub day_index: u32,
    pub interval: u32,
}

impl CoarseTime {
    pub fn new(day_index: u32, interval: u32) -> Result<Self, KeyError> {
        if !(1..=INTERVALS_PER_DAY).contains(&interval) {
            return Err(KeyError::IntervalOutOfRange(interval));
        }
        Ok(Self {
            day_index,
            interval,
        })
    }

    pub fn of(timestamp: u64) -> Self {
        let (day_index, interval) = interval_of(timestamp);
        Self {
            day_index,
            interval,
        }
    }

    /// Intervals elapsed since the epoch; consecutive across day boundaries.
    pub fn absolute(&self) -> i64 {
        self.day_index as i64 * INTERVALS_PER_DAY as i64 + self.interval as i64 - 1
    }

    pub fn start(&self) -> u64 {
        interval_start(self.day_index, self.interval)
    }
}

impl fmt::Display for CoarseTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.day_index, self.interval)
    }
}

impl FromStr for CoarseTime {
    type Err = KeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (d, i) = s
            .split_once(':')
            .ok_or_else(|| KeyError::Malformed(format!("coarse time {s:?}")))?;
        let day = d
            .parse()
            .map_err(|_| KeyError::Malformed(format!("day {d:?}")))?;
        let interval = i
            .parse()
            .map_err(|_| KeyError::Malformed(format!("interval {i:?}")))?;
        CoarseTime::new(day, interval)
    }
}

/// Per-device key store. Holds at most one key per day and forgets keys that
/// fall outside the retention window.
#[derive(Debug, Default, Clone)]
pub struct KeyStore {
    keys: BTreeMap<u32, DailyTracingKey>,
    current_day: u32,
}

impl KeyStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Moves the clock to `day_index` and purges keys older than the
    /// retention window.
    pub fn advance_to(&mut self, day_index: u32) {
        self.current_day = self.current_day.max(day_index);
        let oldest = self.current_day.saturating_sub(RETENTION_DAYS);
        self.keys = self.keys.split_off(&oldest);
    }

    pub fn current_day(&self) -> u32 {
        self.current_day
    }

    /// Returns the key for `day_index`, generating it on first use. Days
    /// outside the retention window relative to the current day yield `None`.
    pub fn key_for_day<R: RngCore + CryptoRng>(
        &mut self,
        day_index: u32,
        rng: &mut R,
    ) -> Option<&DailyTracingKey> {
        if day_index > self.current_day
            || day_index < self.current_day.saturating_sub(RETENTION_DAYS)
        {
            return None;
        }
        Some(
            self.keys
                .entry(day_index)
                .or_insert_with(|| DailyTracingKey::generate(day_index, rng)),
        )
    }

    pub fn get(&self, day_index: u32) -> Option<&DailyTracingKey> {
        self.keys.get(&day_index)
    }

    pub fn days(&self) -> impl Iterator<Item = u32> + '_ {
        self.keys.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}
