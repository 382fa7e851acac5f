//! Value-half encoding for extension-node commitments.
//!
//! The group order is a 253-bit prime, so 32-byte values cannot be committed
//! directly. Each value is split into two 16-byte little-endian halves, and
//! bit 128 of the low half is set when the value is present. An absent slot
//! encodes as (0, 0), while a present all-zero value encodes as (2^128, 0),
//! which keeps deletion distinguishable from writing zeros.

use crate::commitment::scalar::Scalar;

/// The two committed scalars of one value slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueHalves {
    /// Low 16 bytes plus the presence marker at bit 128.
    pub low_mod: Scalar,
    /// High 16 bytes.
    pub high: Scalar,
}

impl ValueHalves {
    pub const ABSENT: ValueHalves = ValueHalves {
        low_mod: Scalar::ZERO,
        high: Scalar::ZERO,
    };
}

/// Encodes an optional 32-byte value into its committed halves.
pub fn encode_value(present: bool, value: &[u8; 32]) -> ValueHalves {
    if !present {
        return ValueHalves::ABSENT;
    }
    let mut low = [0u8; 32];
    low[..16].copy_from_slice(&value[..16]);
    low[16] = 1; // bit 128: presence marker
    let mut high = [0u8; 32];
    high[..16].copy_from_slice(&value[16..]);
    ValueHalves {
        low_mod: Scalar::from_bytes_le(&low),
        high: Scalar::from_bytes_le(&high),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_pow_128() -> Scalar {
        let mut bytes = [0u8; 32];
        bytes[16] = 1;
        Scalar::from_bytes_le(&bytes)
    }

    #[test]
    fn absent_encodes_to_zero() {
        assert_eq!(encode_value(false, &[0xab; 32]), ValueHalves::ABSENT);
    }

    #[test]
    fn present_zero_value_carries_marker() {
        let halves = encode_value(true, &[0u8; 32]);
        assert_eq!(halves.low_mod, two_pow_128());
        assert_eq!(halves.high, Scalar::ZERO);
    }

    #[test]
    fn little_endian_low_half() {
        let mut value = [0u8; 32];
        value[0] = 0x01;
        let halves = encode_value(true, &value);
        assert_eq!(
            halves.low_mod,
            Scalar::from_u64(1).add(&two_pow_128()),
        );
        assert_eq!(halves.high, Scalar::ZERO);
    }

    #[test]
    fn high_half_is_upper_sixteen_bytes() {
        let mut value = [0u8; 32];
        value[16] = 0x02;
        value[31] = 0x7f;
        let halves = encode_value(true, &value);
        let mut expected = [0u8; 32];
        expected[0] = 0x02;
        expected[15] = 0x7f;
        assert_eq!(halves.high, Scalar::from_bytes_le(&expected));
    }
}
