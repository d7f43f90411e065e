//! Patient-side selection of upload records.
//!
//! Only intervals that saw at least one exchange are uploaded. Each exchange
//! is paired with the patient's own identifier for that interval and the
//! location digest recorded at the exchange; partner identifiers never leave
//! the device.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::devicelog::{BroadcastRecord, ExchangeRecord};
use crate::geocell::CellDigest;
use crate::keysched::{CoarseTime, Rpi};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FilterError {
    #[error("no own broadcast for interval {0}")]
    MissingBroadcast(CoarseTime),
    #[error("malformed upload line: {0}")]
    MalformedLine(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecombinedRecord {
    pub coarse_time: CoarseTime,
    pub cell_digest: CellDigest,
    pub rpi: Rpi,
}

/// A recombined record with the number of identical copies it stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UploadRecord {
    pub rpi: Rpi,
    pub cell_digest: CellDigest,
    pub coarse_time: CoarseTime,
    pub multiplicity: u32,
}

impl UploadRecord {
    pub fn single(r: RecombinedRecord) -> Self {
        UploadRecord {
            rpi: r.rpi,
            cell_digest: r.cell_digest,
            coarse_time: r.coarse_time,
            multiplicity: 1,
        }
    }

    pub fn to_line(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for UploadRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}",
            self.rpi, self.cell_digest, self.coarse_time, self.multiplicity
        )
    }
}

impl FromStr for UploadRecord {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FilterError::MalformedLine(s.to_string());
        let mut it = s.split('\t');
        let (Some(rpi), Some(digest), Some(time), Some(mult), None) =
            (it.next(), it.next(), it.next(), it.next(), it.next())
        else {
            return Err(bad());
        };
        let multiplicity: u32 = mult.parse().map_err(|_| bad())?;
        if multiplicity == 0 {
            return Err(bad());
        }
        Ok(UploadRecord {
            rpi: rpi.parse().map_err(|_| bad())?,
            cell_digest: digest.parse().map_err(|_| bad())?,
            coarse_time: time.parse().map_err(|_| bad())?,
            multiplicity,
        })
    }
}

/// Pairs every exchange with the patient's own identifier of the same
/// interval. Output is sorted by (day, interval, digest).
pub fn filter_and_recombine(
    exchanges: &[ExchangeRecord],
    broadcasts: &[BroadcastRecord],
) -> Result<Vec<RecombinedRecord>, FilterError> {
    let mut own: BTreeMap<CoarseTime, Rpi> = BTreeMap::new();
    for b in broadcasts {
        own.entry(CoarseTime::of(b.timestamp)).or_insert(b.rpi);
    }
    let mut out = Vec::with_capacity(exchanges.len());
    for e in exchanges {
        let t = e.coarse_time();
        let rpi = *own.get(&t).ok_or(FilterError::MissingBroadcast(t))?;
        out.push(RecombinedRecord {
            coarse_time: t,
            cell_digest: e.cell_digest,
            rpi,
        });
    }
    out.sort();
    Ok(out)
}

/// Collapses exact duplicates into one record carrying a multiplicity.
pub fn dedupe_policy(records: &[RecombinedRecord]) -> Vec<UploadRecord> {
    let mut counts: BTreeMap<RecombinedRecord, u32> = BTreeMap::new();
    for r in records {
        *counts.entry(*r).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(r, n)| UploadRecord {
            multiplicity: n,
            ..UploadRecord::single(r)
        })
        .collect()
}

pub fn encode_upload(records: &[UploadRecord]) -> String {
    let mut s = String::with_capacity(records.len() * 118);
    for r in records {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

pub fn decode_upload(text: &str) -> Result<Vec<UploadRecord>, FilterError> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(str::parse)
        .collect()
}
