//! Edge server: obfuscated upload store, relay for fine matching, and the
//! TCP front end.

pub mod relay;
pub mod store;
pub mod wire;

use std::io;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::filter::UploadRecord;
pub use relay::{record_tag, Direction, RecordTag, Relay, RelayEnvelope, SessionId};
pub use store::{ObfuscatedStore, Receipt, Snapshot, StoredRecord};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("epoch {requested} is ahead of current epoch {current}")]
    EpochFromFuture { requested: u64, current: u64 },
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("server: {0}")]
    Remote(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Transport for fine-matching messages, either in process or over TCP.
pub trait RelayPort {
    fn open_session(&mut self, tag: RecordTag, now: u64) -> Result<SessionId, ServerError>;
    fn pending(&mut self, tag: &RecordTag) -> Result<Vec<SessionId>, ServerError>;
    fn send(&mut self, envelope: RelayEnvelope) -> Result<usize, ServerError>;
    fn fetch(
        &mut self,
        sid: &SessionId,
        direction: Direction,
    ) -> Result<Vec<RelayEnvelope>, ServerError>;
}

/// A relay together with the randomness it draws session ids from.
pub struct LocalRelay<R> {
    pub relay: Relay,
    rng: R,
}

impl<R: RngCore + CryptoRng> LocalRelay<R> {
    pub fn new(rng: R) -> Self {
        LocalRelay {
            relay: Relay::new(),
            rng,
        }
    }
}

impl<R: RngCore + CryptoRng> RelayPort for LocalRelay<R> {
    fn open_session(&mut self, tag: RecordTag, now: u64) -> Result<SessionId, ServerError> {
        Ok(self.relay.open_session(tag, now, &mut self.rng))
    }

    fn pending(&mut self, tag: &RecordTag) -> Result<Vec<SessionId>, ServerError> {
        Ok(self.relay.pending(tag))
    }

    fn send(&mut self, envelope: RelayEnvelope) -> Result<usize, ServerError> {
        self.relay.relay(envelope)
    }

    fn fetch(
        &mut self,
        sid: &SessionId,
        direction: Direction,
    ) -> Result<Vec<RelayEnvelope>, ServerError> {
        self.relay.fetch(sid, direction)
    }
}

/// Shared server state. Uploads and relay traffic take short locks; downloads
/// read an immutable snapshot.
pub struct EdgeState {
    store: Mutex<ObfuscatedStore<ChaCha20Rng>>,
    relay: Mutex<LocalRelay<ChaCha20Rng>>,
}

impl EdgeState {
    pub fn new(retention_days: u32) -> Self {
        Self::from_rngs(
            ChaCha20Rng::from_entropy(),
            ChaCha20Rng::from_entropy(),
            retention_days,
        )
    }

    pub fn seeded(seed: u64, retention_days: u32) -> Self {
        let mut master = ChaCha20Rng::seed_from_u64(seed);
        let a = ChaCha20Rng::from_rng(&mut master).expect("chacha seeding");
        let b = ChaCha20Rng::from_rng(&mut master).expect("chacha seeding");
        Self::from_rngs(a, b, retention_days)
    }

    fn from_rngs(store_rng: ChaCha20Rng, relay_rng: ChaCha20Rng, retention_days: u32) -> Self {
        EdgeState {
            store: Mutex::new(ObfuscatedStore::with_retention(store_rng, retention_days)),
            relay: Mutex::new(LocalRelay::new(relay_rng)),
        }
    }

    pub fn upload(&self, records: &[UploadRecord]) -> Result<Receipt, ServerError> {
        self.store.lock().unwrap().accept_upload(records)
    }

    pub fn publish(&self, now: u64) -> Arc<Snapshot> {
        self.store.lock().unwrap().publish(now)
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.store.lock().unwrap().snapshot()
    }

    pub fn open(&self, tag: RecordTag, now: u64) -> SessionId {
        let mut r = self.relay.lock().unwrap();
        r.open_session(tag, now).expect("local relay never fails to open")
    }

    pub fn pending_for(&self, tag: &RecordTag) -> Vec<SessionId> {
        self.relay.lock().unwrap().relay.pending(tag)
    }

    pub fn relay_envelope(&self, env: RelayEnvelope) -> Result<usize, ServerError> {
        self.relay.lock().unwrap().relay.relay(env)
    }

    pub fn fetch_mail(
        &self,
        sid: &SessionId,
        direction: Direction,
    ) -> Result<Vec<RelayEnvelope>, ServerError> {
        self.relay.lock().unwrap().relay.fetch(sid, direction)
    }

    pub fn expire_sessions(&self, older_than: u64) {
        self.relay.lock().unwrap().relay.expire(older_than);
    }
}
