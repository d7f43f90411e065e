//! Blinded point-in-circle test.
//!
//! The patient encodes the two ends of a diameter of the contact circle. The
//! user folds its own position into a blinded response, and the patient
//! recovers `r * (u - p1)·(u - p2)`, which is negative exactly when the user
//! is strictly inside the circle.

use num_bigint::{BigInt, BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::{CryptoRng, RngCore};

use super::params::FineGrainParams;
use super::FineMatchError;
use crate::geocell::PlanarPoint;

/// Non-negative fixed-point planar coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedPoint {
    pub x: u64,
    pub y: u64,
}

impl FixedPoint {
    pub const fn new(x: u64, y: u64) -> Self {
        FixedPoint { x, y }
    }

    /// Metres around the region centre to 1 m fixed point, shifted so the
    /// centre sits at `2^(bits-1)`.
    pub fn from_planar(p: &PlanarPoint, coord_bits: u32) -> Result<Self, FineMatchError> {
        let offset = (1i64 << (coord_bits - 1)) as f64;
        let limit = (1u64 << coord_bits) as f64;
        let x = (p.x.round() + offset).round();
        let y = (p.y.round() + offset).round();
        if !(0.0..limit).contains(&x) || !(0.0..limit).contains(&y) {
            return Err(FineMatchError::CoordinateOverflow);
        }
        Ok(FixedPoint {
            x: x as u64,
            y: y as u64,
        })
    }

    pub fn dist_sq(&self, other: &FixedPoint) -> u64 {
        let dx = self.x.abs_diff(other.x);
        let dy = self.y.abs_diff(other.y);
        dx * dx + dy * dy
    }

    fn check(&self, limit: u64) -> Result<(), FineMatchError> {
        if self.x >= limit || self.y >= limit {
            return Err(FineMatchError::CoordinateOverflow);
        }
        Ok(())
    }
}

/// Unit direction for laying out a diameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Heading {
    dx: f64,
    dy: f64,
}

impl Heading {
    pub const EAST: Heading = Heading { dx: 1.0, dy: 0.0 };
    pub const NORTH: Heading = Heading { dx: 0.0, dy: 1.0 };

    pub fn from_angle(theta: f64) -> Self {
        Heading {
            dx: theta.cos(),
            dy: theta.sin(),
        }
    }

    pub fn new(dx: f64, dy: f64) -> Option<Self> {
        let n = dx.hypot(dy);
        (n.is_finite() && n > 0.0).then(|| Heading {
            dx: dx / n,
            dy: dy / n,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiameterPair {
    pub p1: FixedPoint,
    pub p2: FixedPoint,
}

impl DiameterPair {
    /// The plaintext predicate the protocol evaluates.
    pub fn dot(&self, u: &FixedPoint) -> i128 {
        let (ux, uy) = (u.x as i128, u.y as i128);
        (ux - self.p1.x as i128) * (ux - self.p2.x as i128)
            + (uy - self.p1.y as i128) * (uy - self.p2.y as i128)
    }
}

pub fn make_diameter_pair(
    anchor: FixedPoint,
    radius: u64,
    heading: Heading,
    coord_bits: u32,
) -> Result<DiameterPair, FineMatchError> {
    let limit = 1i128 << coord_bits;
    let ox = (radius as f64 * heading.dx).round() as i128;
    let oy = (radius as f64 * heading.dy).round() as i128;
    let (ax, ay) = (anchor.x as i128, anchor.y as i128);
    let pts = [(ax - ox, ay - oy), (ax + ox, ay + oy)];
    if pts
        .iter()
        .any(|&(x, y)| x < 0 || y < 0 || x >= limit || y >= limit)
    {
        return Err(FineMatchError::CoordinateOverflow);
    }
    Ok(DiameterPair {
        p1: FixedPoint::new(pts[0].0 as u64, pts[0].1 as u64),
        p2: FixedPoint::new(pts[1].0 as u64, pts[1].1 as u64),
    })
}

/// Single-use masking material for one anchor encryption.
#[derive(Debug)]
pub struct AnchorSecrets {
    s: BigUint,
    a: [BigUint; 7],
}

impl AnchorSecrets {
    pub fn generate<R: RngCore + CryptoRng>(params: &FineGrainParams, rng: &mut R) -> Self {
        let lo = BigUint::one() << (params.spec.k1 / 2) as usize;
        let s = loop {
            let s = rng.gen_biguint_range(&lo, &params.p);
            if s.gcd(&params.p).is_one() {
                break s;
            }
        };
        let k3 = params.spec.k3 as u64;
        let a = std::array::from_fn(|_| rng.gen_biguint(k3));
        AnchorSecrets { s, a }
    }

    /// Fixed secrets for reproducible fixtures.
    pub fn from_parts(
        params: &FineGrainParams,
        s: BigUint,
        a: [BigUint; 7],
    ) -> Result<Self, FineMatchError> {
        if s.is_zero() || s >= params.p || !s.gcd(&params.p).is_one() {
            return Err(FineMatchError::InvalidSecret("s must be a unit mod p".into()));
        }
        if a.iter().any(|v| v.bits() > params.spec.k3 as u64) {
            return Err(FineMatchError::InvalidSecret("mask wider than k3".into()));
        }
        Ok(AnchorSecrets { s, a })
    }
}

/// The only secret the patient keeps after encrypting.
#[derive(Debug)]
pub struct DecisionKey {
    s_inv: BigUint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedAnchor {
    pub en: [BigUint; 7],
}

impl EncryptedAnchor {
    /// en1+en3, en2+en4 and en7 must all be non-zero mod p.
    pub fn sanity_ok(&self, p: &BigUint) -> bool {
        let e = &self.en;
        let nz = |v: BigUint| !(v % p).is_zero();
        nz(&e[0] + &e[2]) && nz(&e[1] + &e[3]) && nz(e[6].clone())
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        for v in &self.en {
            put_uint(out, v);
        }
    }

    pub fn read_from(buf: &mut &[u8]) -> Result<Self, FineMatchError> {
        let mut en: [BigUint; 7] = Default::default();
        for v in en.iter_mut() {
            *v = take_uint(buf)?;
        }
        Ok(EncryptedAnchor { en })
    }
}

pub fn encrypt_anchor(
    params: &FineGrainParams,
    secrets: AnchorSecrets,
    pair: &DiameterPair,
) -> Result<(EncryptedAnchor, DecisionKey), FineMatchError> {
    let limit = params.coord_limit();
    pair.p1.check(limit)?;
    pair.p2.check(limit)?;
    let AnchorSecrets { s, a } = secrets;
    let p = &params.p;
    let alpha = &params.alpha;
    let (x1, y1) = (BigUint::from(pair.p1.x), BigUint::from(pair.p1.y));
    let (x2, y2) = (BigUint::from(pair.p2.x), BigUint::from(pair.p2.y));
    let plain = [
        x1.clone(),
        y1.clone(),
        x2.clone(),
        y2.clone(),
        &x1 * &x2,
        &y1 * &y2,
        BigUint::one(),
    ];
    let en: [BigUint; 7] = std::array::from_fn(|j| (&s * (&plain[j] * alpha + &a[j])) % p);
    let anchor = EncryptedAnchor { en };
    if !anchor.sanity_ok(p) {
        return Err(FineMatchError::SanityCheckFailed);
    }
    let s_inv = mod_inverse(&s, p).ok_or_else(|| FineMatchError::InvalidSecret("s not invertible".into()))?;
    Ok((anchor, DecisionKey { s_inv }))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserResponse {
    pub a1: BigUint,
    pub a2: BigUint,
}

impl UserResponse {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_uint(&mut out, &self.a1);
        put_uint(&mut out, &self.a2);
        out
    }

    pub fn from_bytes(mut buf: &[u8]) -> Result<Self, FineMatchError> {
        let a1 = take_uint(&mut buf)?;
        let a2 = take_uint(&mut buf)?;
        if !buf.is_empty() {
            return Err(FineMatchError::Malformed("trailing bytes in response".into()));
        }
        Ok(UserResponse { a1, a2 })
    }
}

/// The user's blinding factor. Never sent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blind(pub BigUint);

pub fn respond<R: RngCore + CryptoRng>(
    params: &FineGrainParams,
    anchor: &EncryptedAnchor,
    user: &FixedPoint,
    rng: &mut R,
) -> Result<(UserResponse, Blind), FineMatchError> {
    let k4 = params.spec.k4 as u64;
    let mut r = rng.gen_biguint(k4);
    r.set_bit(k4 - 1, true);
    let resp = respond_with_blind(params, anchor, user, &r)?;
    Ok((resp, Blind(r)))
}

/// `respond` with a caller-chosen blind.
pub fn respond_with_blind(
    params: &FineGrainParams,
    anchor: &EncryptedAnchor,
    user: &FixedPoint,
    r: &BigUint,
) -> Result<UserResponse, FineMatchError> {
    user.check(params.coord_limit())?;
    let p = &params.p;
    let e = &anchor.en;
    let (xu, yu) = (BigUint::from(user.x), BigUint::from(user.y));
    let ra = (r * &params.alpha) % p;
    let s1 = (&xu * (&e[0] + &e[2]) + &yu * (&e[1] + &e[3])) % p;
    let norm = &xu * &xu + &yu * &yu;
    let s2 = (&e[4] + &e[5] + norm * &e[6]) % p;
    Ok(UserResponse {
        a1: (&ra * s1) % p,
        a2: (&ra * s2) % p,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Inside,
    Outside,
}

/// Recovers D = c2 - c1, which equals r·(u-p1)·(u-p2).
pub fn decision_quantity(
    params: &FineGrainParams,
    key: &DecisionKey,
    response: &UserResponse,
) -> Result<BigInt, FineMatchError> {
    let p = &params.p;
    let b1 = (&key.s_inv * &response.a1) % p;
    let b2 = (&key.s_inv * &response.a2) % p;
    if &b1 >= params.cap() || &b2 >= params.cap() {
        return Err(FineMatchError::NoiseOverflow);
    }
    let c1 = b1 / params.alpha_sq();
    let c2 = b2 / params.alpha_sq();
    Ok(BigInt::from(c2) - BigInt::from(c1))
}

pub fn decide(
    params: &FineGrainParams,
    key: &DecisionKey,
    response: &UserResponse,
) -> Result<Verdict, FineMatchError> {
    let d = decision_quantity(params, key, response)?;
    Ok(if d.is_negative() {
        Verdict::Inside
    } else {
        Verdict::Outside
    })
}

/// `D` rendered in exponent notation with an explicit exponent sign.
pub fn format_quantity(d: &BigInt) -> String {
    let v = d.to_f64().unwrap_or(f64::NAN);
    let s = format!("{v:e}");
    match s.split_once('e') {
        Some((m, e)) if !e.starts_with('-') => format!("{m}e+{e}"),
        _ => s,
    }
}

pub fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    let a = BigInt::from(a.clone());
    let m = BigInt::from(m.clone());
    let e = a.extended_gcd(&m);
    if !e.gcd.is_one() {
        return None;
    }
    e.x.mod_floor(&m).to_biguint()
}

pub(crate) fn put_uint(out: &mut Vec<u8>, v: &BigUint) {
    let bytes = if v.is_zero() { Vec::new() } else { v.to_bytes_be() };
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(&bytes);
}

pub(crate) fn take_uint(buf: &mut &[u8]) -> Result<BigUint, FineMatchError> {
    let bytes = take_bytes(buf)?;
    Ok(BigUint::from_bytes_be(bytes))
}

pub(crate) fn take_bytes<'a>(buf: &mut &'a [u8]) -> Result<&'a [u8], FineMatchError> {
    if buf.len() < 4 {
        return Err(FineMatchError::Malformed("truncated length".into()));
    }
    let n = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
    if buf.len() < 4 + n {
        return Err(FineMatchError::Malformed("truncated field".into()));
    }
    let out = &buf[4..4 + n];
    *buf = &buf[4 + n..];
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finematch::params::{gen_params, ParamSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn toy() -> (FineGrainParams, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        (gen_params(ParamSpec::TOY, &mut rng).unwrap(), rng)
    }

    #[test]
    fn diameter_pair_examples() {
        let pair = make_diameter_pair(FixedPoint::new(10, 10), 2, Heading::EAST, 10).unwrap();
        assert_eq!(pair.p1, FixedPoint::new(8, 10));
        assert_eq!(pair.p2, FixedPoint::new(12, 10));
        assert_eq!(pair.p1.x + pair.p2.x, 20);

        let zero = make_diameter_pair(FixedPoint::new(10, 10), 0, Heading::NORTH, 10).unwrap();
        assert_eq!(zero.p1, zero.p2);

        assert!(matches!(
            make_diameter_pair(FixedPoint::new(1, 500), 2, Heading::EAST, 10),
            Err(FineMatchError::CoordinateOverflow)
        ));
        assert!(matches!(
            make_diameter_pair(FixedPoint::new(1022, 500), 2, Heading::EAST, 10),
            Err(FineMatchError::CoordinateOverflow)
        ));
    }

    #[test]
    fn midpoint_identity_holds_for_oblique_headings() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..500 {
            let a = FixedPoint::new(rng.gen_range(100..900), rng.gen_range(100..900));
            let h = Heading::from_angle(rng.gen_range(0.0..std::f64::consts::TAU));
            let pair = make_diameter_pair(a, rng.gen_range(0..50), h, 10).unwrap();
            assert_eq!(pair.p1.x + pair.p2.x, 2 * a.x);
            assert_eq!(pair.p1.y + pair.p2.y, 2 * a.y);
        }
    }

    #[test]
    fn known_secrets_hand_computed_components() {
        let (params, _) = toy();
        let s = BigUint::from(0x1234_5678_9abc_def1u64);
        let a: [BigUint; 7] = std::array::from_fn(|j| BigUint::from(1000u32 + j as u32));
        let secrets = AnchorSecrets::from_parts(&params, s.clone(), a).unwrap();
        let pair = DiameterPair {
            p1: FixedPoint::new(8, 10),
            p2: FixedPoint::new(12, 10),
        };
        let (anchor, _) = encrypt_anchor(&params, secrets, &pair).unwrap();
        // Independent evaluation with plain integers before a single reduction.
        let al = &params.alpha;
        let plain = [8u32, 10, 12, 10, 96, 100, 1];
        for (j, m) in plain.iter().enumerate() {
            let want = (&s * (BigUint::from(*m) * al + BigUint::from(1000u32 + j as u32))) % &params.p;
            assert_eq!(anchor.en[j], want, "component {}", j + 1);
        }
    }

    #[test]
    fn decryption_identity_recovers_coordinates() {
        let (params, mut rng) = toy();
        let pair = DiameterPair {
            p1: FixedPoint::new(301, 77),
            p2: FixedPoint::new(321, 97),
        };
        let s = rng.gen_biguint_range(&BigUint::from(2u32), &params.p);
        let a: [BigUint; 7] = std::array::from_fn(|_| rng.gen_biguint(32));
        let secrets = AnchorSecrets::from_parts(&params, s.clone(), a.clone()).unwrap();
        let (anchor, _) = encrypt_anchor(&params, secrets, &pair).unwrap();
        let s_inv = mod_inverse(&s, &params.p).unwrap();
        let x1 = ((&s_inv * &anchor.en[0]) % &params.p - &a[0]) / &params.alpha;
        assert_eq!(x1, BigUint::from(301u32));
    }

    #[test]
    fn center_is_inside_and_boundary_is_outside() {
        let (params, mut rng) = toy();
        let pair = make_diameter_pair(FixedPoint::new(500, 500), 2, Heading::EAST, 10).unwrap();
        let run = |u: FixedPoint, rng: &mut ChaCha20Rng| {
            let (anchor, key) =
                encrypt_anchor(&params, AnchorSecrets::generate(&params, rng), &pair).unwrap();
            let (resp, blind) = respond(&params, &anchor, &u, rng).unwrap();
            let d = decision_quantity(&params, &key, &resp).unwrap();
            assert_eq!(d, BigInt::from(blind.0.clone()) * BigInt::from(pair.dot(&u)));
            decide(&params, &key, &resp).unwrap()
        };
        assert_eq!(run(FixedPoint::new(500, 500), &mut rng), Verdict::Inside);
        assert_eq!(run(FixedPoint::new(500, 502), &mut rng), Verdict::Outside);
        assert_eq!(run(FixedPoint::new(502, 500), &mut rng), Verdict::Outside);
        assert_eq!(run(FixedPoint::new(501, 501), &mut rng), Verdict::Inside);
    }

    #[test]
    fn unit_blind_matches_direct_formula() {
        let (params, mut rng) = toy();
        let pair = make_diameter_pair(FixedPoint::new(40, 60), 5, Heading::NORTH, 10).unwrap();
        let (anchor, _) =
            encrypt_anchor(&params, AnchorSecrets::generate(&params, &mut rng), &pair).unwrap();
        let u = FixedPoint::new(43, 61);
        let resp = respond_with_blind(&params, &anchor, &u, &BigUint::one()).unwrap();
        let p = &params.p;
        let e = &anchor.en;
        let (xu, yu) = (BigUint::from(43u32), BigUint::from(61u32));
        let want1 = (&params.alpha * (&xu * (&e[0] + &e[2]) + &yu * (&e[1] + &e[3]))) % p;
        let want2 = (&params.alpha
            * (&e[4] + &e[5] + (&xu * &xu + &yu * &yu) * &e[6]))
            % p;
        assert_eq!(resp.a1, want1);
        assert_eq!(resp.a2, want2);
    }

    #[test]
    fn blinds_are_fresh_and_hide_the_response() {
        let (params, mut rng) = toy();
        let pair = make_diameter_pair(FixedPoint::new(100, 100), 10, Heading::EAST, 10).unwrap();
        let (anchor, key) =
            encrypt_anchor(&params, AnchorSecrets::generate(&params, &mut rng), &pair).unwrap();
        let u = FixedPoint::new(103, 98);
        let (r1, b1) = respond(&params, &anchor, &u, &mut rng).unwrap();
        let (r2, b2) = respond(&params, &anchor, &u, &mut rng).unwrap();
        assert_ne!(b1, b2);
        assert_ne!(r1, r2);
        assert_eq!(b1.0.bits(), 32);
        assert_eq!(decide(&params, &key, &r1).unwrap(), decide(&params, &key, &r2).unwrap());
    }

    #[test]
    fn user_outside_the_grid_is_rejected() {
        let (params, mut rng) = toy();
        let pair = make_diameter_pair(FixedPoint::new(100, 100), 10, Heading::EAST, 10).unwrap();
        let (anchor, _) =
            encrypt_anchor(&params, AnchorSecrets::generate(&params, &mut rng), &pair).unwrap();
        assert!(matches!(
            respond(&params, &anchor, &FixedPoint::new(1024, 0), &mut rng),
            Err(FineMatchError::CoordinateOverflow)
        ));
    }

    #[test]
    fn forged_response_overflows() {
        let (params, mut rng) = toy();
        let pair = make_diameter_pair(FixedPoint::new(100, 100), 10, Heading::EAST, 10).unwrap();
        let (_, key) =
            encrypt_anchor(&params, AnchorSecrets::generate(&params, &mut rng), &pair).unwrap();
        let mut hits = 0;
        for _ in 0..20 {
            let junk = UserResponse {
                a1: rng.gen_biguint_below(&params.p),
                a2: rng.gen_biguint_below(&params.p),
            };
            if matches!(decide(&params, &key, &junk), Err(FineMatchError::NoiseOverflow)) {
                hits += 1;
            }
        }
        assert!(hits >= 19);
    }

    #[test]
    fn response_bytes_round_trip() {
        let r = UserResponse {
            a1: BigUint::from(0u32),
            a2: BigUint::from(0xdead_beefu32),
        };
        assert_eq!(UserResponse::from_bytes(&r.to_bytes()).unwrap(), r);
        assert!(UserResponse::from_bytes(&[0, 0, 0, 9, 1]).is_err());
    }

    #[test]
    fn quantity_formatting() {
        assert_eq!(format_quantity(&BigInt::from(0)), "0e+0");
        assert_eq!(format_quantity(&BigInt::from(-1500)), "-1.5e+3");
        let big: BigInt = BigInt::from(38422948129866016u64) * BigInt::from(10).pow(181);
        assert_eq!(format_quantity(&big), "3.8422948129866016e+197");
    }
}
