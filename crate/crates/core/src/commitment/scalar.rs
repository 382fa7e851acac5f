//! Prime-field arithmetic for the commitment backend.
//!
//! The field is Z_p for the 253-bit prime
//! `p = 2^252 + 27742317777372353535851937790883648493`
//! (the order of the prime-order subgroup of Curve25519). Elements are kept
//! in Montgomery form with four 64-bit limbs; all public constructors reduce
//! their input, so a `Scalar` is always a canonical residue.

/// The field modulus, little-endian limbs.
pub const MODULUS: [u64; 4] = [
    0x5812_631a_5cf5_d3ed,
    0x14de_f9de_a2f7_9cd6,
    0x0000_0000_0000_0000,
    0x1000_0000_0000_0000,
];

/// R = 2^256 mod p.
const R: [u64; 4] = [
    0xd6ec_3174_8d98_951d,
    0xc6ef_5bf4_737d_cf70,
    0xffff_ffff_ffff_fffe,
    0x0fff_ffff_ffff_ffff,
];

/// R^2 mod p, used to convert into Montgomery form.
const R2: [u64; 4] = [
    0xa406_11e3_449c_0f01,
    0xd00e_1ba7_6885_9347,
    0xceec_73d2_17f5_be65,
    0x0399_411b_7c30_9a3d,
];

/// -p^-1 mod 2^64.
const P_INV: u64 = 0xd2b5_1da3_1254_7e1b;

/// A field element, stored in Montgomery form (`value * R mod p`).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Scalar([u64; 4]);

impl std::fmt::Debug for Scalar {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Scalar(0x{})", hex::encode(rev(self.to_bytes())))
    }
}

fn rev(mut b: [u8; 32]) -> [u8; 32] {
    b.reverse();
    b
}

#[inline]
fn adc(a: u64, b: u64, carry: u64) -> (u64, u64) {
    let t = a as u128 + b as u128 + carry as u128;
    (t as u64, (t >> 64) as u64)
}

#[inline]
fn sbb(a: u64, b: u64, borrow: u64) -> (u64, u64) {
    let t = (a as u128).wrapping_sub(b as u128 + (borrow >> 63) as u128);
    (t as u64, (t >> 64) as u64)
}

#[inline]
fn mac(a: u64, b: u64, c: u64, carry: u64) -> (u64, u64) {
    let t = a as u128 + (b as u128) * (c as u128) + carry as u128;
    (t as u64, (t >> 64) as u64)
}

/// a - p if a >= p, else a. Input must be < 2p.
#[inline]
fn reduce_once(a: [u64; 4]) -> [u64; 4] {
    let (r0, borrow) = sbb(a[0], MODULUS[0], 0);
    let (r1, borrow) = sbb(a[1], MODULUS[1], borrow);
    let (r2, borrow) = sbb(a[2], MODULUS[2], borrow);
    let (r3, borrow) = sbb(a[3], MODULUS[3], borrow);
    // borrow != 0 means a < p, keep a.
    if borrow != 0 {
        a
    } else {
        [r0, r1, r2, r3]
    }
}

/// Montgomery multiplication: a * b * R^-1 mod p (CIOS).
#[allow(clippy::needless_range_loop)]
fn mont_mul(a: &[u64; 4], b: &[u64; 4]) -> [u64; 4] {
    let mut t = [0u64; 6];
    for i in 0..4 {
        let mut carry = 0;
        for j in 0..4 {
            let (lo, c) = mac(t[j], a[i], b[j], carry);
            t[j] = lo;
            carry = c;
        }
        let (lo, c) = adc(t[4], carry, 0);
        t[4] = lo;
        t[5] = c;

        let m = t[0].wrapping_mul(P_INV);
        let (_, mut carry) = mac(t[0], m, MODULUS[0], 0);
        for j in 1..4 {
            let (lo, c) = mac(t[j], m, MODULUS[j], carry);
            t[j - 1] = lo;
            carry = c;
        }
        let (lo, c) = adc(t[4], carry, 0);
        t[3] = lo;
        let (lo, _) = adc(t[5], c, 0);
        t[4] = lo;
        t[5] = 0;
    }
    debug_assert_eq!(t[4] & !1, 0);
    // t may be up to 2p - 1; one conditional subtraction suffices because
    // 2p < 2^254 and the CIOS bound keeps t < 2p here (p < 2^253).
    if t[4] != 0 {
        let (r0, borrow) = sbb(t[0], MODULUS[0], 0);
        let (r1, borrow) = sbb(t[1], MODULUS[1], borrow);
        let (r2, borrow) = sbb(t[2], MODULUS[2], borrow);
        let (r3, _) = sbb(t[3], MODULUS[3], borrow);
        let _ = borrow;
        [r0, r1, r2, r3]
    } else {
        reduce_once([t[0], t[1], t[2], t[3]])
    }
}

impl Scalar {
    pub const ZERO: Scalar = Scalar([0, 0, 0, 0]);
    pub const ONE: Scalar = Scalar(R);

    /// Interprets 32 little-endian bytes as an integer and reduces it mod p.
    pub fn from_bytes_le(bytes: &[u8; 32]) -> Scalar {
        let mut limbs = [0u64; 4];
        for (i, limb) in limbs.iter_mut().enumerate() {
            *limb = u64::from_le_bytes(bytes[i * 8..(i + 1) * 8].try_into().unwrap());
        }
        // raw -> raw * R mod p, i.e. Montgomery form of (raw mod p).
        Scalar(mont_mul(&limbs, &R2))
    }

    /// Little-endian scalar from fewer than 32 bytes (zero-extended).
    pub fn from_le_slice(bytes: &[u8]) -> Scalar {
        assert!(bytes.len() <= 32, "scalar input exceeds 32 bytes");
        let mut buf = [0u8; 32];
        buf[..bytes.len()].copy_from_slice(bytes);
        Scalar::from_bytes_le(&buf)
    }

    pub fn from_u64(v: u64) -> Scalar {
        Scalar(mont_mul(&[v, 0, 0, 0], &R2))
    }

    /// Canonical little-endian encoding of the residue (always < p < 2^253).
    pub fn to_bytes(&self) -> [u8; 32] {
        let raw = mont_mul(&self.0, &[1, 0, 0, 0]);
        let mut out = [0u8; 32];
        for i in 0..4 {
            out[i * 8..(i + 1) * 8].copy_from_slice(&raw[i].to_le_bytes());
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0, 0, 0, 0]
    }

    pub fn add(&self, other: &Scalar) -> Scalar {
        let (r0, carry) = adc(self.0[0], other.0[0], 0);
        let (r1, carry) = adc(self.0[1], other.0[1], carry);
        let (r2, carry) = adc(self.0[2], other.0[2], carry);
        let (r3, carry) = adc(self.0[3], other.0[3], carry);
        debug_assert_eq!(carry, 0); // both inputs < p < 2^253
        Scalar(reduce_once([r0, r1, r2, r3]))
    }

    pub fn sub(&self, other: &Scalar) -> Scalar {
        let (r0, borrow) = sbb(self.0[0], other.0[0], 0);
        let (r1, borrow) = sbb(self.0[1], other.0[1], borrow);
        let (r2, borrow) = sbb(self.0[2], other.0[2], borrow);
        let (r3, borrow) = sbb(self.0[3], other.0[3], borrow);
        if borrow != 0 {
            let (r0, carry) = adc(r0, MODULUS[0], 0);
            let (r1, carry) = adc(r1, MODULUS[1], carry);
            let (r2, carry) = adc(r2, MODULUS[2], carry);
            let (r3, _) = adc(r3, MODULUS[3], carry);
            Scalar([r0, r1, r2, r3])
        } else {
            Scalar([r0, r1, r2, r3])
        }
    }

    pub fn neg(&self) -> Scalar {
        Scalar::ZERO.sub(self)
    }

    pub fn mul(&self, other: &Scalar) -> Scalar {
        Scalar(mont_mul(&self.0, &other.0))
    }
}
