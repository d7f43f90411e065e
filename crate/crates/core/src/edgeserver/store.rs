//! Upload store with per-publish reshuffling.

use std::sync::Arc;

use rand::{CryptoRng, RngCore};

use super::ServerError;
use crate::filter::UploadRecord;
use crate::geocell::CellDigest;
use crate::keysched::{CoarseTime, Rpi, RETENTION_DAYS, SECONDS_PER_DAY};

/// Everything the server keeps about a published record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StoredRecord {
    pub rpi: Rpi,
    pub cell_digest: CellDigest,
    pub coarse_time: CoarseTime,
    pub multiplicity: u32,
    /// Epoch in which the record first became visible.
    pub epoch: u64,
}

impl StoredRecord {
    pub fn upload_record(&self) -> UploadRecord {
        UploadRecord {
            rpi: self.rpi,
            cell_digest: self.cell_digest,
            coarse_time: self.coarse_time,
            multiplicity: self.multiplicity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Receipt {
    pub count: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    pub epoch: u64,
    pub records: Vec<StoredRecord>,
}

impl Snapshot {
    /// Records first published after `since_epoch`.
    pub fn since(&self, since_epoch: u64) -> Result<Vec<StoredRecord>, ServerError> {
        if since_epoch > self.epoch {
            return Err(ServerError::EpochFromFuture {
                requested: since_epoch,
                current: self.epoch,
            });
        }
        Ok(self
            .records
            .iter()
            .filter(|r| r.epoch > since_epoch)
            .copied()
            .collect())
    }
}

pub struct ObfuscatedStore<R> {
    rng: R,
    pending: Vec<(u64, UploadRecord)>,
    published: Arc<Snapshot>,
    retention_days: u32,
}

impl<R: RngCore + CryptoRng> ObfuscatedStore<R> {
    pub fn new(rng: R) -> Self {
        Self::with_retention(rng, RETENTION_DAYS)
    }

    pub fn with_retention(rng: R, retention_days: u32) -> Self {
        ObfuscatedStore {
            rng,
            pending: Vec::new(),
            published: Arc::new(Snapshot::default()),
            retention_days,
        }
    }

    pub fn epoch(&self) -> u64 {
        self.published.epoch
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn accept_upload(&mut self, payload: &[UploadRecord]) -> Result<Receipt, ServerError> {
        if payload.is_empty() {
            return Err(ServerError::MalformedPayload("empty upload".into()));
        }
        if let Some(bad) = payload.iter().find(|r| r.multiplicity == 0) {
            return Err(ServerError::MalformedPayload(format!(
                "zero multiplicity for {}",
                bad.rpi
            )));
        }
        for r in payload {
            let s = self.rng.next_u64();
            self.pending.push((s, *r));
        }
        Ok(Receipt {
            count: payload.len(),
        })
    }

    /// Merges pending uploads into the live set, drops expired records and
    /// reorders everything by fresh random keys.
    pub fn publish(&mut self, now: u64) -> Arc<Snapshot> {
        let epoch = self.published.epoch + 1;
        let cutoff = now.saturating_sub(self.retention_days as u64 * SECONDS_PER_DAY);
        let live = |t: &CoarseTime| t.start() >= cutoff;

        let mut keyed: Vec<(u64, StoredRecord)> =
            Vec::with_capacity(self.published.records.len() + self.pending.len());
        for r in self.published.records.iter().filter(|r| live(&r.coarse_time)) {
            keyed.push((self.rng.next_u64(), *r));
        }
        for (s, r) in self.pending.drain(..) {
            if live(&r.coarse_time) {
                keyed.push((
                    s,
                    StoredRecord {
                        rpi: r.rpi,
                        cell_digest: r.cell_digest,
                        coarse_time: r.coarse_time,
                        multiplicity: r.multiplicity,
                        epoch,
                    },
                ));
            }
        }
        keyed.sort_unstable_by_key(|(s, _)| *s);
        let records = keyed.into_iter().map(|(_, r)| r).collect();
        self.published = Arc::new(Snapshot { epoch, records });
        Arc::clone(&self.published)
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        Arc::clone(&self.published)
    }

    pub fn download(&self, since_epoch: u64) -> Result<Vec<StoredRecord>, ServerError> {
        self.published.since(since_epoch)
    }
}
