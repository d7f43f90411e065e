//! Per-device broadcast and exchange logs.
//!
//! Both logs are kept in timestamp order and retain 14 days of history
//! relative to the newest record. On disk a log is a tab-separated text file
//! with one `BC` or `EX` record per line.

use std::io::{self, BufRead, Write};

use chrono::{DateTime, SecondsFormat, Utc};
use thiserror::Error;

use crate::geocell::CellDigest;
use crate::keysched::{CoarseTime, Rpi, RETENTION_DAYS, SECONDS_PER_DAY};

pub const RETENTION_SECONDS: u64 = RETENTION_DAYS as u64 * SECONDS_PER_DAY;

/// Accepted distance, in intervals, between a record's receipt time and the
/// interval its identifier was claimed for.
pub const SKEW_TOLERANCE_INTERVALS: i64 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BroadcastRecord {
    pub timestamp: u64,
    pub rpi: Rpi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExchangeRecord {
    pub timestamp: u64,
    pub rpi: Rpi,
    pub cell_digest: CellDigest,
    pub rssi: i32,
}

impl ExchangeRecord {
    pub fn coarse_time(&self) -> CoarseTime {
        CoarseTime::of(self.timestamp)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeviceLog {
    broadcasts: Vec<BroadcastRecord>,
    exchanges: Vec<ExchangeRecord>,
}

impl DeviceLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn broadcasts(&self) -> &[BroadcastRecord] {
        &self.broadcasts
    }

    pub fn exchanges(&self) -> &[ExchangeRecord] {
        &self.exchanges
    }

    pub fn record_broadcast(&mut self, timestamp: u64, rpi: Rpi) {
        insert_sorted(&mut self.broadcasts, BroadcastRecord { timestamp, rpi }, |r| {
            r.timestamp
        });
        self.prune_to_newest();
    }

    pub fn record_exchange(&mut self, timestamp: u64, rpi: Rpi, cell_digest: CellDigest, rssi: i32) {
        let rec = ExchangeRecord {
            timestamp,
            rpi,
            cell_digest,
            rssi,
        };
        insert_sorted(&mut self.exchanges, rec, |r| r.timestamp);
        self.prune_to_newest();
    }

    /// Drops every record with a timestamp strictly before `cutoff`.
    pub fn prune_before(&mut self, cutoff: u64) {
        let b = self.broadcasts.partition_point(|r| r.timestamp < cutoff);
        self.broadcasts.drain(..b);
        let e = self.exchanges.partition_point(|r| r.timestamp < cutoff);
        self.exchanges.drain(..e);
    }

    pub fn newest_timestamp(&self) -> Option<u64> {
        let b = self.broadcasts.last().map(|r| r.timestamp);
        let e = self.exchanges.last().map(|r| r.timestamp);
        b.max(e)
    }

    fn prune_to_newest(&mut self) {
        if let Some(newest) = self.newest_timestamp() {
            self.prune_before(newest.saturating_sub(RETENTION_SECONDS));
        }
    }

    pub fn len(&self) -> usize {
        self.broadcasts.len() + self.exchanges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes both logs merged by timestamp, broadcasts first on ties.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut b = self.broadcasts.iter().peekable();
        let mut e = self.exchanges.iter().peekable();
        loop {
            let take_b = match (b.peek(), e.peek()) {
                (Some(x), Some(y)) => x.timestamp <= y.timestamp,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => break,
            };
            if take_b {
                let r = b.next().unwrap();
                writeln!(w, "BC\t{}\t{}", iso8601(r.timestamp), r.rpi)?;
            } else {
                let r = e.next().unwrap();
                writeln!(
                    w,
                    "EX\t{}\t{}\t{}\t{}",
                    iso8601(r.timestamp),
                    r.rpi,
                    r.cell_digest,
                    r.rssi
                )?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, LogError> {
        let mut log = DeviceLog::new();
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| LogError::Parse {
                line: idx + 1,
                reason,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["BC", ts, rpi] => {
                    let ts = parse_iso8601(ts).map_err(&bad)?;
                    let rpi = rpi.parse().map_err(|e| bad(format!("{e}")))?;
                    insert_sorted(&mut log.broadcasts, BroadcastRecord { timestamp: ts, rpi }, |r| {
                        r.timestamp
                    });
                }
                ["EX", ts, rpi, digest, rssi] => {
                    let rec = ExchangeRecord {
                        timestamp: parse_iso8601(ts).map_err(&bad)?,
                        rpi: rpi.parse().map_err(|e| bad(format!("{e}")))?,
                        cell_digest: digest.parse().map_err(|e| bad(format!("{e}")))?,
                        rssi: rssi.parse().map_err(|e| bad(format!("rssi: {e}")))?,
                    };
                    insert_sorted(&mut log.exchanges, rec, |r| r.timestamp);
                }
                _ => return Err(bad(format!("unrecognized record {line:?}"))),
            }
        }
        Ok(log)
    }
}

fn insert_sorted<T, F: Fn(&T) -> u64>(v: &mut Vec<T>, item: T, key: F) {
    let k = key(&item);
    if v.last().is_none_or(|last| key(last) <= k) {
        v.push(item);
    } else {
        let at = v.partition_point(|x| key(x) <= k);
        v.insert(at, item);
    }
}

pub fn iso8601(timestamp: u64) -> String {
    DateTime::<Utc>::from_timestamp(timestamp as i64, 0)
        .map(|t| t.to_rfc3339_opts(SecondsFormat::Secs, true))
        .unwrap_or_default()
}

pub fn parse_iso8601(s: &str) -> Result<u64, String> {
    let t = DateTime::parse_from_rfc3339(s).map_err(|e| format!("timestamp {s:?}: {e}"))?;
    u64::try_from(t.timestamp()).map_err(|_| format!("timestamp {s:?} before epoch"))
}

/// True when the record's receipt interval is within one interval of the
/// interval the identifier was issued for. False marks a stale (replayed)
/// identifier.
pub fn validate_timestamp(record: &ExchangeRecord, claimed: CoarseTime) -> bool {
    (record.coarse_time().absolute() - claimed.absolute()).abs() <= SKEW_TOLERANCE_INTERVALS
}

/// Synthetic received signal strength for a beacon heard at `distance_m`.
pub fn rssi_from_distance(distance_m: f64, noise_db: f64) -> i32 {
    (-40.0 - 25.0 * distance_m.max(0.5).log10() + noise_db).round() as i32
}
