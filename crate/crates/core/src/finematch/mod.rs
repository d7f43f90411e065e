//! Coarse screening of downloaded records and the fine-grained encrypted
//! proximity check.

pub mod params;
pub mod protocol;
pub mod session;
pub mod signature;

use std::collections::HashMap;

use thiserror::Error;

use crate::devicelog::{validate_timestamp, ExchangeRecord};
use crate::filter::UploadRecord;
use crate::keysched::Rpi;

pub use params::{gen_params, FineGrainParams, Inequality, ParamSpec};
pub use protocol::{
    decide, decision_quantity, encrypt_anchor, format_quantity, make_diameter_pair, respond,
    respond_with_blind, AnchorSecrets, Blind, DecisionKey, DiameterPair, EncryptedAnchor,
    FixedPoint, Heading, UserResponse, Verdict,
};
pub use session::{sign_announcement, verify_announcement, Announcement, SignedAnnouncement};
pub use signature::{Bls12381, Ed25519, KeyPair, SignatureScheme};

#[derive(Debug, Error)]
pub enum FineMatchError {
    #[error("constraint {which} violated: {lhs} is not below {rhs}")]
    ConstraintViolation {
        which: Inequality,
        lhs: u64,
        rhs: u64,
    },
    #[error("unsupported parameters: {0}")]
    UnsupportedSpec(String),
    #[error("coordinate outside the fixed-point grid")]
    CoordinateOverflow,
    #[error("encrypted anchor is degenerate; draw new secrets")]
    SanityCheckFailed,
    #[error("invalid secret: {0}")]
    InvalidSecret(String),
    #[error("recovered value exceeds the parameter bound")]
    NoiseOverflow,
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("announcement failed verification")]
    BadAnnouncement,
    #[error("signing failed")]
    Signature,
    #[error("channel: {0}")]
    Channel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoarseClass {
    Hit,
    /// Same identifier heard in a different cell than the uploader's.
    WormholeSuspect,
    /// Same identifier and cell, but heard outside its validity interval.
    ReplaySuspect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoarseOutcome {
    pub exchange: ExchangeRecord,
    pub record: UploadRecord,
    pub class: CoarseClass,
}

/// Pairs each exchange with every downloaded record carrying the same RPI.
pub fn coarse_match(exchanges: &[ExchangeRecord], downloaded: &[UploadRecord]) -> Vec<CoarseOutcome> {
    let mut by_rpi: HashMap<Rpi, Vec<&UploadRecord>> = HashMap::with_capacity(downloaded.len());
    for r in downloaded {
        by_rpi.entry(r.rpi).or_default().push(r);
    }
    let mut out = Vec::new();
    for e in exchanges {
        let Some(recs) = by_rpi.get(&e.rpi) else {
            continue;
        };
        for r in recs {
            out.push(CoarseOutcome {
                exchange: *e,
                record: **r,
                class: classify(e, r),
            });
        }
    }
    out
}

pub fn classify(e: &ExchangeRecord, r: &UploadRecord) -> CoarseClass {
    if e.cell_digest != r.cell_digest {
        CoarseClass::WormholeSuspect
    } else if !validate_timestamp(e, r.coarse_time) {
        CoarseClass::ReplaySuspect
    } else {
        CoarseClass::Hit
    }
}

/// Replays carry the wormhole token too; the class keeps them apart.
pub fn coarse_log_line(o: &CoarseOutcome) -> String {
    let verdict = match o.class {
        CoarseClass::Hit => "Correct",
        CoarseClass::WormholeSuspect | CoarseClass::ReplaySuspect => "Wormhole Attack",
    };
    format!(
        "Location Verification[1]: [INFO] [P] {}{} [U] {}{} [{}]",
        o.record.rpi, o.record.cell_digest, o.exchange.rpi, o.exchange.cell_digest, verdict
    )
}

pub fn fine_log_line(d: &num_bigint::BigInt, verdict: Verdict) -> String {
    let tag = match verdict {
        Verdict::Inside => "Correct",
        Verdict::Outside => "Wormhole Attack",
    };
    format!(
        "Location Verification[2]: [INFO] [Final] {} [{}]",
        format_quantity(d),
        tag
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geocell::CellDigest;
    use crate::keysched::{interval_start, CoarseTime};

    const DAY: u32 = 18483;

    fn ex(rpi: u8, cell: u8, interval: u32) -> ExchangeRecord {
        ExchangeRecord {
            timestamp: interval_start(DAY, interval) + 240,
            rpi: Rpi([rpi; 16]),
            cell_digest: CellDigest([cell; 32]),
            rssi: -55,
        }
    }

    fn up(rpi: u8, cell: u8, interval: u32) -> UploadRecord {
        UploadRecord {
            rpi: Rpi([rpi; 16]),
            cell_digest: CellDigest([cell; 32]),
            coarse_time: CoarseTime::new(DAY, interval).unwrap(),
            multiplicity: 1,
        }
    }

    #[test]
    fn equal_everything_is_a_hit() {
        let out = coarse_match(&[ex(1, 1, 37)], &[up(1, 1, 37)]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].class, CoarseClass::Hit);
    }

    #[test]
    fn different_cell_is_a_wormhole_suspect() {
        let out = coarse_match(&[ex(1, 2, 37)], &[up(1, 1, 37)]);
        assert_eq!(out[0].class, CoarseClass::WormholeSuspect);
        assert!(out.iter().all(|o| o.class != CoarseClass::Hit));
    }

    #[test]
    fn stale_interval_is_a_replay_suspect() {
        let out = coarse_match(&[ex(1, 1, 42)], &[up(1, 1, 37)]);
        assert_eq!(out[0].class, CoarseClass::ReplaySuspect);
    }

    #[test]
    fn unrelated_rpis_produce_nothing() {
        assert!(coarse_match(&[ex(1, 1, 37)], &[up(2, 1, 37)]).is_empty());
        assert!(coarse_match(&[], &[up(2, 1, 37)]).is_empty());
    }

    #[test]
    fn log_lines_follow_the_verification_format() {
        let o = coarse_match(&[ex(0xab, 2, 37)], &[up(0xab, 1, 37)])[0];
        let line = coarse_log_line(&o);
        let want = format!(
            "Location Verification[1]: [INFO] [P] {}{} [U] {}{} [Wormhole Attack]",
            "ab".repeat(16),
            "01".repeat(32),
            "ab".repeat(16),
            "02".repeat(32)
        );
        assert_eq!(line, want);
        let fine = fine_log_line(&num_bigint::BigInt::from(12345), Verdict::Outside);
        assert_eq!(fine, "Location Verification[2]: [INFO] [Final] 1.2345e+4 [Wormhole Attack]");
        let fine = fine_log_line(&num_bigint::BigInt::from(-2), Verdict::Inside);
        assert!(fine.ends_with("[Final] -2e+0 [Correct]"));
    }
}
