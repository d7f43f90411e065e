//! Announcement signatures.
//!
//! `Bls12381` is a hash-to-group signature checked with a pairing:
//! `sig = H(m)^sk` in G2, `pk = g1^sk`, valid iff `e(g1, sig) == e(pk, H(m))`.
//! `Ed25519` is a faster drop-in with the same contract.

use bls12_381::hash_to_curve::{ExpandMsgXmd, HashToCurve};
use bls12_381::{pairing, G1Affine, G1Projective, G2Affine, G2Projective, Scalar};
use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use sha2::{Digest, Sha512};

pub struct KeyPair {
    secret: Vec<u8>,
    public: Vec<u8>,
}

impl KeyPair {
    pub fn public(&self) -> &[u8] {
        &self.public
    }

    pub fn secret(&self) -> &[u8] {
        &self.secret
    }
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "KeyPair {{ public: {} }}", hex::encode(&self.public))
    }
}

pub trait SignatureScheme: Send + Sync {
    fn name(&self) -> &'static str;
    fn keypair_from_seed(&self, seed: &[u8; 32]) -> KeyPair;
    /// Returns `None` if `secret` is not a key of this scheme.
    fn sign(&self, secret: &[u8], msg: &[u8]) -> Option<Vec<u8>>;
    fn verify(&self, public: &[u8], msg: &[u8], sig: &[u8]) -> bool;
}

pub fn scheme_by_name(name: &str) -> Option<Box<dyn SignatureScheme>> {
    match name {
        "bls12-381" | "bls" => Some(Box::new(Bls12381)),
        "ed25519" => Some(Box::new(Ed25519)),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Bls12381;

const BLS_DST: &[u8] = b"COAVOID-V01-CS01-with-BLS12381G2_XMD:SHA-256_SSWU_RO_";

fn hash_to_g2(msg: &[u8]) -> G2Affine {
    let h = <G2Projective as HashToCurve<ExpandMsgXmd<sha2_09::Sha256>>>::hash_to_curve(
        msg, BLS_DST,
    );
    G2Affine::from(h)
}

fn bls_scalar(secret: &[u8]) -> Option<Scalar> {
    let bytes: [u8; 32] = secret.try_into().ok()?;
    Option::from(Scalar::from_bytes(&bytes))
}

impl SignatureScheme for Bls12381 {
    fn name(&self) -> &'static str {
        "bls12-381"
    }

    fn keypair_from_seed(&self, seed: &[u8; 32]) -> KeyPair {
        let mut h = Sha512::new();
        h.update(b"coavoid-bls-keygen");
        h.update(seed);
        let wide: [u8; 64] = h.finalize().into();
        let mut sk = Scalar::from_bytes_wide(&wide);
        if sk == Scalar::zero() {
            sk = Scalar::one();
        }
        let pk = G1Affine::from(G1Projective::generator() * sk);
        KeyPair {
            secret: sk.to_bytes().to_vec(),
            public: pk.to_compressed().to_vec(),
        }
    }

    fn sign(&self, secret: &[u8], msg: &[u8]) -> Option<Vec<u8>> {
        let sk = bls_scalar(secret)?;
        let sig = G2Affine::from(G2Projective::from(hash_to_g2(msg)) * sk);
        Some(sig.to_compressed().to_vec())
    }

    fn verify(&self, public: &[u8], msg: &[u8], sig: &[u8]) -> bool {
        let (Ok(pk), Ok(sig)) = (<[u8; 48]>::try_from(public), <[u8; 96]>::try_from(sig)) else {
            return false;
        };
        let pk: Option<G1Affine> = G1Affine::from_compressed(&pk).into();
        let sig: Option<G2Affine> = G2Affine::from_compressed(&sig).into();
        let (Some(pk), Some(sig)) = (pk, sig) else {
            return false;
        };
        if bool::from(G1Projective::from(pk).is_identity()) {
            return false;
        }
        pairing(&G1Affine::generator(), &sig) == pairing(&pk, &hash_to_g2(msg))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Ed25519;

impl SignatureScheme for Ed25519 {
    fn name(&self) -> &'static str {
        "ed25519"
    }

    fn keypair_from_seed(&self, seed: &[u8; 32]) -> KeyPair {
        let sk = SigningKey::from_bytes(seed);
        KeyPair {
            secret: seed.to_vec(),
            public: sk.verifying_key().to_bytes().to_vec(),
        }
    }

    fn sign(&self, secret: &[u8], msg: &[u8]) -> Option<Vec<u8>> {
        let seed: [u8; 32] = secret.try_into().ok()?;
        Some(SigningKey::from_bytes(&seed).sign(msg).to_bytes().to_vec())
    }

    fn verify(&self, public: &[u8], msg: &[u8], sig: &[u8]) -> bool {
        let Ok(pk) = <[u8; 32]>::try_from(public) else {
            return false;
        };
        let Ok(vk) = VerifyingKey::from_bytes(&pk) else {
            return false;
        };
        let Ok(sig) = ed25519_dalek::Signature::from_slice(sig) else {
            return false;
        };
        vk.verify_strict(msg, &sig).is_ok()
    }
}
