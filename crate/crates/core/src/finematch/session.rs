//! Signed announcements and the encrypted patient/user exchange.
//!
//! Message flow for one session, all carried by the relay:
//!
//! 1. user -> patient: user's X25519 public key
//! 2. patient -> user: patient's X25519 public key, then sealed
//!    (signed announcement, signing public key)
//! 3. user -> patient: sealed response
//! 4. patient -> user: sealed decision quantity

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use num_bigint::{BigInt, BigUint, Sign};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use x25519_dalek::{EphemeralSecret, PublicKey};

use super::params::{FineGrainParams, ParamSpec};
use super::protocol::{
    decision_quantity, encrypt_anchor, put_uint, respond, take_bytes, take_uint, AnchorSecrets,
    Blind, DecisionKey, DiameterPair, EncryptedAnchor, FixedPoint, UserResponse, Verdict,
};
use super::signature::{KeyPair, SignatureScheme};
use super::FineMatchError;
use crate::edgeserver::SessionId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Announcement {
    pub p: BigUint,
    pub alpha: BigUint,
    pub anchor: EncryptedAnchor,
    pub timestamp: u64,
    pub sid: SessionId,
}

impl Announcement {
    /// The signed byte string: p, alpha, en1..en7 (each length-prefixed),
    /// 8-byte timestamp, 16-byte session id.
    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 * 110);
        put_uint(&mut out, &self.p);
        put_uint(&mut out, &self.alpha);
        self.anchor.write_to(&mut out);
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        out.extend_from_slice(&self.sid.0);
        out
    }

    fn read_from(buf: &mut &[u8]) -> Result<Self, FineMatchError> {
        let p = take_uint(buf)?;
        let alpha = take_uint(buf)?;
        let anchor = EncryptedAnchor::read_from(buf)?;
        if buf.len() < 24 {
            return Err(FineMatchError::Malformed("truncated announcement".into()));
        }
        let timestamp = u64::from_be_bytes(buf[..8].try_into().unwrap());
        let sid = SessionId(buf[8..24].try_into().unwrap());
        *buf = &buf[24..];
        Ok(Announcement {
            p,
            alpha,
            anchor,
            timestamp,
            sid,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedAnnouncement {
    pub announcement: Announcement,
    pub signature: Vec<u8>,
}

impl SignedAnnouncement {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.announcement.signed_bytes();
        out.extend_from_slice(&(self.signature.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(mut buf: &[u8]) -> Result<Self, FineMatchError> {
        let s = Self::read_from(&mut buf)?;
        if !buf.is_empty() {
            return Err(FineMatchError::Malformed("trailing bytes".into()));
        }
        Ok(s)
    }

    fn read_from(buf: &mut &[u8]) -> Result<Self, FineMatchError> {
        let announcement = Announcement::read_from(buf)?;
        let signature = take_bytes(buf)?.to_vec();
        Ok(SignedAnnouncement {
            announcement,
            signature,
        })
    }
}

pub fn sign_announcement(
    scheme: &dyn SignatureScheme,
    keys: &KeyPair,
    params: &FineGrainParams,
    anchor: EncryptedAnchor,
    timestamp: u64,
    sid: SessionId,
) -> Result<SignedAnnouncement, FineMatchError> {
    let announcement = Announcement {
        p: params.p.clone(),
        alpha: params.alpha.clone(),
        anchor,
        timestamp,
        sid,
    };
    let signature = scheme
        .sign(keys.secret(), &announcement.signed_bytes())
        .ok_or(FineMatchError::Signature)?;
    Ok(SignedAnnouncement {
        announcement,
        signature,
    })
}

/// Signature, freshness (within `max_age` seconds either way) and the
/// anchor's non-degeneracy checks.
pub fn verify_announcement(
    scheme: &dyn SignatureScheme,
    signed: &SignedAnnouncement,
    public: &[u8],
    now: u64,
    max_age: u64,
) -> bool {
    let a = &signed.announcement;
    a.timestamp.abs_diff(now) <= max_age
        && a.p.bits() > 1
        && a.anchor.sanity_ok(&a.p)
        && scheme.verify(public, &a.signed_bytes(), &signed.signature)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    User,
    Patient,
}

/// Ephemeral X25519 half of the channel setup.
pub struct Handshake {
    secret: EphemeralSecret,
    public: [u8; 32],
}

impl Handshake {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let secret = EphemeralSecret::random_from_rng(rng);
        let public = PublicKey::from(&secret).to_bytes();
        Handshake { secret, public }
    }

    pub fn public(&self) -> [u8; 32] {
        self.public
    }

    pub fn finish(
        self,
        peer: &[u8; 32],
        sid: &SessionId,
        role: Role,
    ) -> Result<SecureChannel, FineMatchError> {
        let shared = self.secret.diffie_hellman(&PublicKey::from(*peer));
        if !shared.was_contributory() {
            return Err(FineMatchError::Channel("degenerate key share".into()));
        }
        let (user_pk, patient_pk) = match role {
            Role::User => (self.public, *peer),
            Role::Patient => (*peer, self.public),
        };
        let mut h = Sha256::new();
        h.update(b"coavoid-channel-v1");
        h.update(sid.0);
        h.update(user_pk);
        h.update(patient_pk);
        h.update(shared.as_bytes());
        let key = h.finalize();
        Ok(SecureChannel {
            cipher: ChaCha20Poly1305::new(Key::from_slice(&key)),
            sid: *sid,
            role,
            sent: 0,
            received: 0,
        })
    }
}

/// Authenticated encryption bound to one session. Each direction uses its own
/// counter-based nonces, so messages must be opened in order.
pub struct SecureChannel {
    cipher: ChaCha20Poly1305,
    sid: SessionId,
    role: Role,
    sent: u64,
    received: u64,
}

impl SecureChannel {
    fn nonce(from: Role, counter: u64) -> [u8; 12] {
        let mut n = [0u8; 12];
        n[0] = match from {
            Role::User => 1,
            Role::Patient => 2,
        };
        n[4..].copy_from_slice(&counter.to_be_bytes());
        n
    }

    pub fn seal(&mut self, plaintext: &[u8]) -> Vec<u8> {
        let nonce = Self::nonce(self.role, self.sent);
        self.sent += 1;
        self.cipher
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: plaintext,
                    aad: &self.sid.0,
                },
            )
            .expect("chacha20poly1305 encryption is infallible for small inputs")
    }

    pub fn open(&mut self, ciphertext: &[u8]) -> Result<Vec<u8>, FineMatchError> {
        let peer = match self.role {
            Role::User => Role::Patient,
            Role::Patient => Role::User,
        };
        let nonce = Self::nonce(peer, self.received);
        let pt = self
            .cipher
            .decrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: ciphertext,
                    aad: &self.sid.0,
                },
            )
            .map_err(|_| FineMatchError::Channel("authentication failed".into()))?;
        self.received += 1;
        Ok(pt)
    }
}

fn peer_key(msg: &[u8]) -> Result<([u8; 32], &[u8]), FineMatchError> {
    if msg.len() < 32 {
        return Err(FineMatchError::Malformed("missing key share".into()));
    }
    Ok((msg[..32].try_into().unwrap(), &msg[32..]))
}

/// Patient side after answering a hello.
pub struct PatientSession {
    channel: SecureChannel,
    key: DecisionKey,
}

/// Answers a user's hello with a fresh encrypted anchor for `pair`.
#[allow(clippy::too_many_arguments)]
pub fn patient_accept<R: RngCore + CryptoRng>(
    scheme: &dyn SignatureScheme,
    keys: &KeyPair,
    params: &FineGrainParams,
    sid: SessionId,
    hello: &[u8],
    pair: &DiameterPair,
    now: u64,
    rng: &mut R,
) -> Result<(PatientSession, Vec<u8>), FineMatchError> {
    let (user_pk, rest) = peer_key(hello)?;
    if !rest.is_empty() {
        return Err(FineMatchError::Malformed("oversized hello".into()));
    }
    let hs = Handshake::new(rng);
    let my_pk = hs.public();
    let mut channel = hs.finish(&user_pk, &sid, Role::Patient)?;
    let (anchor, key) = loop {
        match encrypt_anchor(params, AnchorSecrets::generate(params, rng), pair) {
            Err(FineMatchError::SanityCheckFailed) => continue,
            other => break other?,
        }
    };
    let signed = sign_announcement(scheme, keys, params, anchor, now, sid)?;
    let mut body = signed.to_bytes();
    body.extend_from_slice(&(keys.public().len() as u32).to_be_bytes());
    body.extend_from_slice(keys.public());
    let mut msg = my_pk.to_vec();
    msg.extend_from_slice(&channel.seal(&body));
    Ok((PatientSession { channel, key }, msg))
}

impl PatientSession {
    /// Decides on the user's response and seals the decision quantity.
    pub fn conclude(
        mut self,
        params: &FineGrainParams,
        msg: &[u8],
    ) -> Result<(Verdict, BigInt, Vec<u8>), FineMatchError> {
        let resp = UserResponse::from_bytes(&self.channel.open(msg)?)?;
        let d = decision_quantity(params, &self.key, &resp)?;
        let verdict = verdict_of(&d);
        let reply = self.channel.seal(&encode_signed(&d));
        Ok((verdict, d, reply))
    }
}

/// User side before the announcement arrives.
pub struct UserHello {
    handshake: Handshake,
    sid: SessionId,
}

pub fn user_hello<R: RngCore + CryptoRng>(sid: SessionId, rng: &mut R) -> (UserHello, Vec<u8>) {
    let handshake = Handshake::new(rng);
    let msg = handshake.public().to_vec();
    (UserHello { handshake, sid }, msg)
}

/// User side waiting for the decision.
pub struct UserAwaiting {
    channel: SecureChannel,
    blind: Blind,
}

impl UserHello {
    /// Verifies the announcement and answers with the user's blinded position.
    #[allow(clippy::too_many_arguments)]
    pub fn respond<R: RngCore + CryptoRng>(
        self,
        scheme: &dyn SignatureScheme,
        spec: ParamSpec,
        msg: &[u8],
        user: &FixedPoint,
        now: u64,
        max_age: u64,
        rng: &mut R,
    ) -> Result<(UserAwaiting, Vec<u8>), FineMatchError> {
        let (patient_pk, sealed) = peer_key(msg)?;
        let mut channel = self.handshake.finish(&patient_pk, &self.sid, Role::User)?;
        let body = channel.open(sealed)?;
        let mut rest = body.as_slice();
        let signed = SignedAnnouncement::read_from(&mut rest)?;
        let public = take_bytes(&mut rest)?;
        if !rest.is_empty() {
            return Err(FineMatchError::Malformed("trailing bytes".into()));
        }
        if signed.announcement.sid != self.sid
            || !verify_announcement(scheme, &signed, public, now, max_age)
        {
            return Err(FineMatchError::BadAnnouncement);
        }
        let a = signed.announcement;
        let params = FineGrainParams::from_public(spec, a.p, a.alpha)?;
        let (resp, blind) = respond(&params, &a.anchor, user, rng)?;
        let msg = channel.seal(&resp.to_bytes());
        Ok((UserAwaiting { channel, blind }, msg))
    }
}

impl UserAwaiting {
    pub fn blind(&self) -> &Blind {
        &self.blind
    }

    pub fn finish(mut self, msg: &[u8]) -> Result<(Verdict, BigInt), FineMatchError> {
        let d = decode_signed(&self.channel.open(msg)?)?;
        Ok((verdict_of(&d), d))
    }
}

fn verdict_of(d: &BigInt) -> Verdict {
    if d.sign() == Sign::Minus {
        Verdict::Inside
    } else {
        Verdict::Outside
    }
}

fn encode_signed(d: &BigInt) -> Vec<u8> {
    let (sign, mag) = d.to_bytes_be();
    let mut out = vec![u8::from(sign == Sign::Minus)];
    out.extend_from_slice(&mag);
    out
}

fn decode_signed(b: &[u8]) -> Result<BigInt, FineMatchError> {
    let (&s, mag) = b
        .split_first()
        .ok_or_else(|| FineMatchError::Malformed("empty decision".into()))?;
    let sign = match s {
        0 => Sign::Plus,
        1 => Sign::Minus,
        _ => return Err(FineMatchError::Malformed("bad sign byte".into())),
    };
    Ok(BigInt::from_bytes_be(sign, mag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finematch::params::gen_params;
    use crate::finematch::protocol::{make_diameter_pair, Heading};
    use crate::finematch::signature::{Bls12381, Ed25519};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn setup() -> (FineGrainParams, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        (gen_params(ParamSpec::TOY, &mut rng).unwrap(), rng)
    }

    fn anchor(params: &FineGrainParams, rng: &mut ChaCha20Rng) -> EncryptedAnchor {
        let pair = make_diameter_pair(FixedPoint::new(300, 300), 10, Heading::EAST, 10).unwrap();
        encrypt_anchor(params, AnchorSecrets::generate(params, rng), &pair)
            .unwrap()
            .0
    }

    #[test]
    fn serialization_field_order_is_frozen() {
        let a = Announcement {
            p: BigUint::from(0x0102u32),
            alpha: BigUint::from(3u32),
            anchor: EncryptedAnchor {
                en: std::array::from_fn(|j| BigUint::from(j as u32 + 10)),
            },
            timestamp: 0x1122_3344_5566_7788,
            sid: SessionId([0xaa; 16]),
        };
        let b = a.signed_bytes();
        assert_eq!(&b[..6], &[0, 0, 0, 2, 1, 2]);
        assert_eq!(&b[6..11], &[0, 0, 0, 1, 3]);
        assert_eq!(&b[11..16], &[0, 0, 0, 1, 10]);
        let tail = &b[b.len() - 24..];
        assert_eq!(&tail[..8], &0x1122_3344_5566_7788u64.to_be_bytes());
        assert_eq!(&tail[8..], &[0xaa; 16]);
        assert_eq!(b.len(), 6 + 5 * 8 + 24);
    }

    #[test]
    fn sign_then_verify() {
        let (params, mut rng) = setup();
        for scheme in [&Bls12381 as &dyn SignatureScheme, &Ed25519] {
            let keys = scheme.keypair_from_seed(&[4; 32]);
            let signed =
                sign_announcement(scheme, &keys, &params, anchor(&params, &mut rng), 1000, SessionId([1; 16]))
                    .unwrap();
            assert!(verify_announcement(scheme, &signed, keys.public(), 1000, 3600));
            let round = SignedAnnouncement::from_bytes(&signed.to_bytes()).unwrap();
            assert_eq!(round, signed);
        }
    }

    #[test]
    fn flipped_byte_fails() {
        let (params, mut rng) = setup();
        let scheme = Ed25519;
        let keys = scheme.keypair_from_seed(&[4; 32]);
        let signed =
            sign_announcement(&scheme, &keys, &params, anchor(&params, &mut rng), 1000, SessionId([1; 16]))
                .unwrap();
        let bytes = signed.to_bytes();
        for i in [0, 7, 40, bytes.len() - 30, bytes.len() - 70] {
            let mut b = bytes.clone();
            b[i] ^= 0x04;
            let ok = SignedAnnouncement::from_bytes(&b)
                .map(|s| verify_announcement(&scheme, &s, keys.public(), 1000, 3600))
                .unwrap_or(false);
            assert!(!ok, "byte {i}");
        }
    }

    #[test]
    fn valid_signature_over_degenerate_anchor_fails() {
        let (params, mut rng) = setup();
        let scheme = Ed25519;
        let keys = scheme.keypair_from_seed(&[4; 32]);
        let mut a = anchor(&params, &mut rng);
        a.en[6] = BigUint::from(0u32);
        let signed = sign_announcement(&scheme, &keys, &params, a, 1000, SessionId([1; 16])).unwrap();
        assert!(scheme.verify(keys.public(), &signed.announcement.signed_bytes(), &signed.signature));
        assert!(!verify_announcement(&scheme, &signed, keys.public(), 1000, 3600));
    }

    #[test]
    fn stale_announcement_fails() {
        let (params, mut rng) = setup();
        let scheme = Ed25519;
        let keys = scheme.keypair_from_seed(&[4; 32]);
        let signed =
            sign_announcement(&scheme, &keys, &params, anchor(&params, &mut rng), 1000, SessionId([1; 16]))
                .unwrap();
        assert!(verify_announcement(&scheme, &signed, keys.public(), 4600, 3600));
        assert!(!verify_announcement(&scheme, &signed, keys.public(), 4601, 3600));
    }

    #[test]
    fn channel_rejects_reordering_and_tampering() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let sid = SessionId([2; 16]);
        let u = Handshake::new(&mut rng);
        let p = Handshake::new(&mut rng);
        let (upk, ppk) = (u.public(), p.public());
        let mut uc = u.finish(&ppk, &sid, Role::User).unwrap();
        let mut pc = p.finish(&upk, &sid, Role::Patient).unwrap();
        let m1 = uc.seal(b"one");
        let m2 = uc.seal(b"two");
        assert!(pc.open(&m2).is_err());
        assert_eq!(pc.open(&m1).unwrap(), b"one");
        let mut bad = m2.clone();
        bad[0] ^= 1;
        assert!(pc.open(&bad).is_err());
        assert_eq!(pc.open(&m2).unwrap(), b"two");
        let back = pc.seal(b"reply");
        assert_eq!(uc.open(&back).unwrap(), b"reply");
    }

    #[test]
    fn full_exchange_inside_and_outside() {
        let (params, mut rng) = setup();
        let scheme = Bls12381;
        let keys = scheme.keypair_from_seed(&[9; 32]);
        let pair = make_diameter_pair(FixedPoint::new(300, 300), 10, Heading::EAST, 10).unwrap();
        for (user, want) in [
            (FixedPoint::new(303, 304), Verdict::Inside),
            (FixedPoint::new(300, 310), Verdict::Outside),
            (FixedPoint::new(320, 300), Verdict::Outside),
        ] {
            let sid = SessionId([3; 16]);
            let (hello_state, hello) = user_hello(sid, &mut rng);
            let (patient, ann) =
                patient_accept(&scheme, &keys, &params, sid, &hello, &pair, 5000, &mut rng).unwrap();
            let (waiting, resp) = hello_state
                .respond(&scheme, ParamSpec::TOY, &ann, &user, 5010, 3600, &mut rng)
                .unwrap();
            let blind = waiting.blind().clone();
            let (pv, pd, reply) = patient.conclude(&params, &resp).unwrap();
            let (uv, ud) = waiting.finish(&reply).unwrap();
            assert_eq!(pv, want);
            assert_eq!(uv, want);
            assert_eq!(pd, ud);
            assert_eq!(ud, BigInt::from(blind.0) * BigInt::from(pair.dot(&user)));
        }
    }

    #[test]
    fn announcement_for_another_session_is_refused() {
        let (params, mut rng) = setup();
        let scheme = Ed25519;
        let keys = scheme.keypair_from_seed(&[9; 32]);
        let pair = make_diameter_pair(FixedPoint::new(300, 300), 10, Heading::EAST, 10).unwrap();
        let (hello_state, hello) = user_hello(SessionId([3; 16]), &mut rng);
        // The patient answers under a different session id.
        let res = patient_accept(&scheme, &keys, &params, SessionId([4; 16]), &hello, &pair, 0, &mut rng);
        let (_, ann) = res.unwrap();
        let out = hello_state.respond(&scheme, ParamSpec::TOY, &ann, &FixedPoint::new(1, 1), 0, 60, &mut rng);
        assert!(out.is_err());
    }

    #[test]
    fn signed_quantity_round_trip() {
        for v in [0i64, 1, -1, i64::MIN + 1, 1 << 40] {
            let d = BigInt::from(v);
            assert_eq!(decode_signed(&encode_signed(&d)).unwrap(), d);
        }
        assert!(decode_signed(&[]).is_err());
        assert!(decode_signed(&[2, 1]).is_err());
    }
}
