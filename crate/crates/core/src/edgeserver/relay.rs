//! Mailbox relay for fine-grained matching sessions.
//!
//! A user that coarse-matched a published record opens a session under the
//! record's tag. The patient who uploaded that record polls the tag, and both
//! parties then exchange opaque payloads through per-direction mailboxes.
//! Fetching drains a mailbox, so nothing is retained once delivered.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ServerError;
use crate::geocell::CellDigest;
use crate::keysched::{CoarseTime, Rpi};

macro_rules! hex_id {
    ($name:ident) => {
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub [u8; 16]);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&hex::encode(self.0))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self)
            }
        }

        impl FromStr for $name {
            type Err = ServerError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let mut out = [0u8; 16];
                hex::decode_to_slice(s, &mut out)
                    .map_err(|_| ServerError::MalformedPayload(format!("bad id {s:?}")))?;
                Ok($name(out))
            }
        }
    };
}

hex_id!(SessionId);
hex_id!(RecordTag);

/// Rendezvous tag for a published record, computable by both the uploader
/// and anyone who matched it.
pub fn record_tag(rpi: &Rpi, digest: &CellDigest, time: CoarseTime) -> RecordTag {
    let mut h = Sha256::new();
    h.update(b"coavoid-session");
    h.update(rpi.0);
    h.update(digest.0);
    h.update(time.day_index.to_be_bytes());
    h.update(time.interval.to_be_bytes());
    let mut tag = [0u8; 16];
    tag.copy_from_slice(&h.finalize()[..16]);
    RecordTag(tag)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    PatientToUser,
    UserToPatient,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::PatientToUser => "patient_to_user",
            Direction::UserToPatient => "user_to_patient",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayEnvelope {
    pub session_id: SessionId,
    pub direction: Direction,
    pub payload: Vec<u8>,
    pub timestamp: u64,
}

#[derive(Debug, Default)]
struct Session {
    tag: Option<RecordTag>,
    opened_at: u64,
    to_patient: VecDeque<RelayEnvelope>,
    to_user: VecDeque<RelayEnvelope>,
}

#[derive(Debug, Default)]
pub struct Relay {
    sessions: HashMap<SessionId, Session>,
    by_tag: BTreeMap<RecordTag, Vec<SessionId>>,
}

impl Relay {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open_session<R: RngCore + CryptoRng>(
        &mut self,
        tag: RecordTag,
        now: u64,
        rng: &mut R,
    ) -> SessionId {
        let mut sid = SessionId([0; 16]);
        loop {
            rng.fill_bytes(&mut sid.0);
            if !self.sessions.contains_key(&sid) {
                break;
            }
        }
        self.sessions.insert(
            sid,
            Session {
                tag: Some(tag),
                opened_at: now,
                ..Session::default()
            },
        );
        self.by_tag.entry(tag).or_default().push(sid);
        sid
    }

    /// Sessions opened under `tag` that the uploader has not yet picked up.
    /// Each session is handed out once.
    pub fn pending(&mut self, tag: &RecordTag) -> Vec<SessionId> {
        self.by_tag.remove(tag).unwrap_or_default()
    }

    pub fn relay(&mut self, envelope: RelayEnvelope) -> Result<usize, ServerError> {
        let session = self
            .sessions
            .get_mut(&envelope.session_id)
            .ok_or(ServerError::UnknownSession(envelope.session_id))?;
        match envelope.direction {
            Direction::PatientToUser => session.to_user.push_back(envelope),
            Direction::UserToPatient => session.to_patient.push_back(envelope),
        }
        Ok(1)
    }

    /// Drains the mailbox holding envelopes travelling in `direction`.
    pub fn fetch(
        &mut self,
        sid: &SessionId,
        direction: Direction,
    ) -> Result<Vec<RelayEnvelope>, ServerError> {
        let session = self
            .sessions
            .get_mut(sid)
            .ok_or(ServerError::UnknownSession(*sid))?;
        let q = match direction {
            Direction::PatientToUser => &mut session.to_user,
            Direction::UserToPatient => &mut session.to_patient,
        };
        Ok(q.drain(..).collect())
    }

    pub fn close(&mut self, sid: &SessionId) {
        if let Some(s) = self.sessions.remove(sid) {
            if let Some(tag) = s.tag {
                if let Some(v) = self.by_tag.get_mut(&tag) {
                    v.retain(|x| x != sid);
                    if v.is_empty() {
                        self.by_tag.remove(&tag);
                    }
                }
            }
        }
    }

    pub fn expire(&mut self, older_than: u64) {
        let stale: Vec<SessionId> = self
            .sessions
            .iter()
            .filter(|(_, s)| s.opened_at < older_than)
            .map(|(k, _)| *k)
            .collect();
        for sid in stale {
            self.close(&sid);
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    /// Envelopes currently waiting in any mailbox.
    pub fn queued(&self) -> usize {
        self.sessions
            .values()
            .map(|s| s.to_patient.len() + s.to_user.len())
            .sum()
    }
}
